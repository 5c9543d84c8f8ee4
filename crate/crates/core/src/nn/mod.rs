//! Minimal trainable network stack: explicit forward caches, hand-written
//! backward passes, and GEMM-backed convolutions.
//!
//! Everything is f32 and deterministic: parameter traversal order is fixed by
//! struct layout, reductions run in a fixed order, and there is no threading.

pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod optim;

pub use backbone::{Backbone, BackboneCache, BackboneConfig, FeatureTap};
pub use layers::{BatchNorm1d, BatchNorm2d, BnMode, Conv2d, Linear, MlpHead, PTensor};
pub use optim::{Adam, OptimizerConfig, OptimizerKind, Schedule, ScheduleConfig, Sgd};

use ndarray::{Array2, ArrayView2};

/// L2-normalize every row in place; returns the original norms.
pub fn normalize_rows(m: &mut Array2<f32>) -> Vec<f32> {
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in m.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        let n = if n > 0.0 { n } else { 1.0 };
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    norms
}

/// Gradient pullback through per-row L2 normalization.
///
/// Given `y = x / |x|`, maps dL/dy to dL/dx: `(g - (g . y) y) / |x|`.
pub fn normalize_rows_backward(
    grad_y: &ArrayView2<f32>,
    y: &ArrayView2<f32>,
    norms: &[f32],
) -> Array2<f32> {
    let mut out = Array2::zeros(grad_y.raw_dim());
    for i in 0..grad_y.nrows() {
        let g = grad_y.row(i);
        let yr = y.row(i);
        let dot: f32 = g.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[i];
        for j in 0..g.len() {
            out[[i, j]] = (g[j] - dot * yr[j]) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn row_normalization_produces_unit_norms() {
        let mut m = array![[3.0f32, 4.0], [0.5, 0.0]];
        let norms = normalize_rows(&mut m);
        assert!((norms[0] - 5.0).abs() < 1e-6);
        for row in m.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let x = array![[0.8f32, -1.2, 0.4], [2.0, 0.3, -0.7]];
        let g = array![[0.3f32, 0.9, -0.5], [-0.2, 0.6, 0.1]];
        let mut y = x.clone();
        let norms = normalize_rows(&mut y);
        let analytic = normalize_rows_backward(&g.view(), &y.view(), &norms);

        let loss = |m: &Array2<f32>| -> f64 {
            let mut ym = m.clone();
            normalize_rows(&mut ym);
            ym.iter().zip(g.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-3f32;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
                let an = analytic[[i, j]] as f64;
                assert!((fd - an).abs() < 1e-3, "({i},{j}): fd {fd} vs {an}");
            }
        }
    }
}
