//! Loss functions for the five methods. Scalar reference forms run in f64
//! and double as the single source of truth the unit oracles check; the
//! batched f32 forms used by the training loops share their formulas.

use ndarray::Array2;

use crate::error::{Error, Result};

fn check_unit(name: &str, v: &[f32]) -> Result<()> {
    let norm: f64 = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Config(format!(
            "{name} must be unit-normalized, got norm {norm:.6}"
        )));
    }
    Ok(())
}

/// Contrastive loss of a query against one positive key and a bank of
/// negatives: `-log(exp(q.k+/t) / (exp(q.k+/t) + sum_i exp(q.n_i/t)))`.
///
/// All vectors must be unit-normalized. Computed in f64 with a stable
/// log-sum-exp.
pub fn info_nce_loss(q: &[f32], k_pos: &[f32], negatives: &Array2<f32>, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if k_pos.len() != q.len() || (negatives.ncols() != q.len() && negatives.nrows() > 0) {
        return Err(Error::Config("embedding width mismatch".into()));
    }
    check_unit("query", q)?;
    check_unit("positive key", k_pos)?;
    let dot = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    };
    let pos = dot(q, k_pos) / tau;
    let mut logits = Vec::with_capacity(1 + negatives.nrows());
    logits.push(pos);
    for (i, row) in negatives.rows().into_iter().enumerate() {
        let r = row.as_slice().ok_or_else(|| Error::Config("non-contiguous negatives".into()))?;
        check_unit(&format!("negative {i}"), r)?;
        logits.push(dot(q, r) / tau);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Batched contrastive loss with gradient w.r.t. the normalized queries.
///
/// `q`, `k` are `(n, d)` unit rows; `queue` is `(k_size, d)` unit rows.
/// Returns the mean loss and dL/dq (mean-reduced).
pub fn info_nce_batch_grad(
    q: &Array2<f32>,
    k: &Array2<f32>,
    queue: &Array2<f32>,
    tau: f64,
) -> (f64, Array2<f32>) {
    let n = q.nrows();
    let t = tau as f32;
    // logits: (n, 1 + K)
    let neg = q.dot(&queue.t());
    let mut loss_sum = 0.0f64;
    let mut probs = Array2::<f32>::zeros((n, 1 + queue.nrows()));
    for i in 0..n {
        let pos: f32 = q.row(i).iter().zip(k.row(i).iter()).map(|(a, b)| a * b).sum();
        let mut max = pos / t;
        for &v in neg.row(i) {
            max = max.max(v / t);
        }
        let mut denom = 0.0f64;
        let e_pos = (((pos / t) - max) as f64).exp();
        denom += e_pos;
        for &v in neg.row(i) {
            denom += (((v / t) - max) as f64).exp();
        }
        loss_sum += -(e_pos / denom).ln();
        probs[[i, 0]] = (e_pos / denom) as f32;
        for (j, &v) in neg.row(i).iter().enumerate() {
            probs[[i, j + 1]] = ((((v / t) - max) as f64).exp() / denom) as f32;
        }
    }
    // dL/dq_i = ((p0 - 1) k_i + sum_j pj queue_j) / (tau * n)
    let scale = 1.0 / (t * n as f32);
    let p_neg = probs.slice(ndarray::s![.., 1..]).to_owned();
    let mut grad = p_neg.dot(queue);
    for i in 0..n {
        let c = probs[[i, 0]] - 1.0;
        for (g, kv) in grad.row_mut(i).iter_mut().zip(k.row(i).iter()) {
            *g += c * kv;
        }
    }
    grad.mapv_inplace(|v| v * scale);
    (loss_sum / n as f64, grad)
}

/// One directional term of the bootstrap loss: `2 - 2 cos(p, t)` where `p`
/// is the raw (unnormalized) prediction and `t` a unit target.
pub fn byol_pair_loss(p_raw: &[f64], t_unit: &[f64]) -> f64 {
    let pn: f64 = p_raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dot: f64 = p_raw.iter().zip(t_unit).map(|(a, b)| a * b).sum();
    2.0 - 2.0 * dot / pn
}

/// Gradient of `byol_pair_loss` w.r.t. the raw prediction.
pub fn byol_pair_grad(p_raw: &[f64], t_unit: &[f64]) -> Vec<f64> {
    let pn: f64 = p_raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let phat: Vec<f64> = p_raw.iter().map(|v| v / pn).collect();
    let cos: f64 = phat.iter().zip(t_unit).map(|(a, b)| a * b).sum();
    phat.iter()
        .zip(t_unit)
        .map(|(ph, t)| -2.0 * (t - cos * ph) / pn)
        .collect()
}

/// Mean-squared pull of a normalized query toward `k` unit neighbors:
/// `(1/k) sum_j |q_hat - z_j|^2` with `q` raw.
pub fn msf_loss(q_raw: &[f64], neighbors: &[Vec<f64>]) -> f64 {
    let qn: f64 = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let qhat: Vec<f64> = q_raw.iter().map(|v| v / qn).collect();
    let k = neighbors.len().max(1);
    let mut acc = 0.0;
    for z in neighbors {
        acc += qhat
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    acc / k as f64
}

/// Gradient of `msf_loss` w.r.t. the raw query.
pub fn msf_grad(q_raw: &[f64], neighbors: &[Vec<f64>]) -> Vec<f64> {
    let qn: f64 = q_raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let qhat: Vec<f64> = q_raw.iter().map(|v| v / qn).collect();
    let k = neighbors.len().max(1) as f64;
    // dL/dqhat = (2/k) * sum_j (qhat - z_j)
    let mut g_hat = vec![0.0f64; q_raw.len()];
    for z in neighbors {
        for (g, (qh, zv)) in g_hat.iter_mut().zip(qhat.iter().zip(z.iter())) {
            *g += 2.0 * (qh - zv) / k;
        }
    }
    // Pull back through normalization: (I - qhat qhat^T) / |q|.
    let dot: f64 = g_hat.iter().zip(qhat.iter()).map(|(a, b)| a * b).sum();
    g_hat
        .iter()
        .zip(qhat.iter())
        .map(|(g, qh)| (g - dot * qh) / qn)
        .collect()
}

/// Softmax cross-entropy over logits with integer targets. Returns the mean
/// loss and dL/dlogits (mean-reduced).
pub fn cross_entropy_grad(logits: &Array2<f32>, targets: &[usize]) -> (f64, Array2<f32>) {
    let (n, c) = (logits.nrows(), logits.ncols());
    debug_assert_eq!(n, targets.len());
    let mut grad = Array2::<f32>::zeros((n, c));
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v as f64) - max).exp();
        }
        let target = targets[i];
        let logp = (logits[[i, target]] as f64 - max) - denom.ln();
        loss -= logp;
        for j in 0..c {
            let p = ((logits[[i, j]] as f64 - max).exp() / denom) as f32;
            grad[[i, j]] = (p - if j == target { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut rand_chacha::ChaCha12Rng, d: usize) -> Vec<f32> {
        unit((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn info_nce_zero_negatives_and_aligned_pair_is_zero() {
        let q = unit(vec![0.3, -0.5, 0.8]);
        let negatives = Array2::<f32>::zeros((0, 3));
        let loss = info_nce_loss(&q, &q, &negatives, 0.2).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn info_nce_two_orthogonal_negatives_matches_closed_form() {
        // q = k+, two negatives orthogonal to q, tau = 1:
        // loss = ln(1 + 2/e).
        let q = vec![1.0, 0.0, 0.0];
        let negatives =
            Array2::from_shape_vec((2, 3), vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = info_nce_loss(&q, &q, &negatives, 1.0).unwrap();
        let expected = (1.0f64 + 2.0 / std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let q = vec![1.0, 0.0];
        let negatives = Array2::<f32>::zeros((0, 2));
        assert!(info_nce_loss(&q, &q, &negatives, 0.0).is_err());
        assert!(info_nce_loss(&q, &q, &negatives, -0.1).is_err());
        let not_unit = vec![1.0, 1.0];
        assert!(info_nce_loss(&not_unit, &q, &negatives, 1.0).is_err());
    }

    #[test]
    fn info_nce_decreases_as_alignment_grows() {
        // Loss is strictly decreasing in q.k+ with negatives fixed.
        let negatives = Array2::from_shape_vec(
            (2, 3),
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let k = vec![1.0, 0.0, 0.0];
        let mut prev = f64::INFINITY;
        for step in 0..8 {
            let angle = 1.2 - step as f64 * 0.15;
            let q = unit(vec![angle.cos() as f32, angle.sin() as f32, 0.0]);
            let loss = info_nce_loss(&q, &k, &negatives, 0.5).unwrap();
            assert!(loss < prev, "loss must fall as alignment rises");
            prev = loss;
        }
    }

    #[test]
    fn info_nce_oracle_against_direct_softmax_100_cases() {
        // Independent oracle: explicit softmax cross-entropy evaluation.
        let mut rng = derive_rng(11, "nce-oracle", &[]);
        for case in 0..100 {
            let d = 4 + (case % 5);
            let kn = case % 7;
            let q = random_unit(&mut rng, d);
            let k = random_unit(&mut rng, d);
            let mut negs = Array2::<f32>::zeros((kn, d));
            for mut row in negs.rows_mut() {
                let v = random_unit(&mut rng, d);
                for (dst, src) in row.iter_mut().zip(v.iter()) {
                    *dst = *src;
                }
            }
            let tau = rng.random_range(0.05f64..2.0);
            let loss = info_nce_loss(&q, &k, &negs, tau).unwrap();

            // Oracle path: softmax probabilities then -ln p0.
            let dot = |a: &[f32], b: &[f32]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
            };
            let mut logits = vec![dot(&q, &k) / tau];
            for row in negs.rows() {
                logits.push(dot(&q, row.as_slice().unwrap()) / tau);
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let oracle = -(logits[0].exp() / z).ln();
            let rel = ((loss - oracle) / oracle.abs().max(1e-9)).abs();
            assert!(rel < 1e-6, "case {case}: {loss} vs {oracle}");
        }
    }

    #[test]
    fn batched_grad_matches_scalar_loss_and_finite_differences() {
        let mut rng = derive_rng(12, "nce-batch", &[]);
        let (n, d, ksize) = (3, 5, 8);
        let mk = |rng: &mut rand_chacha::ChaCha12Rng, rows: usize| {
            let mut m = Array2::<f32>::zeros((rows, d));
            for mut row in m.rows_mut() {
                let v = random_unit(rng, d);
                for (dst, src) in row.iter_mut().zip(v.iter()) {
                    *dst = *src;
                }
            }
            m
        };
        let q = mk(&mut rng, n);
        let k = mk(&mut rng, n);
        let queue = mk(&mut rng, ksize);
        let tau = 0.3;
        let (loss, grad) = info_nce_batch_grad(&q, &k, &queue, tau);
        // Mean of scalar losses must agree.
        let mut acc = 0.0;
        for i in 0..n {
            acc += info_nce_loss(
                q.row(i).as_slice().unwrap(),
                k.row(i).as_slice().unwrap(),
                &queue,
                tau,
            )
            .unwrap();
        }
        assert!((loss - acc / n as f64).abs() < 1e-5);
        // Finite differences on a few coordinates (loss treats q as free,
        // so perturb without renormalizing; formula uses raw dot products).
        let h = 1e-3f32;
        for &(i, j) in &[(0usize, 0usize), (1, 3), (2, 4)] {
            let mut qp = q.clone();
            qp[[i, j]] += h;
            let mut qm = q.clone();
            qm[[i, j]] -= h;
            let f = |qq: &Array2<f32>| info_nce_batch_grad(qq, &k, &queue, tau).0;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h as f64);
            let an = grad[[i, j]] as f64;
            assert!((fd - an).abs() < 1e-3, "({i},{j}): {fd} vs {an}");
        }
    }

    #[test]
    fn byol_endpoints_are_exact() {
        let t = vec![0.6f64, -0.8, 0.0];
        let parallel: Vec<f64> = t.iter().map(|v| v * 2.5).collect();
        assert!(byol_pair_loss(&parallel, &t).abs() < 1e-6);
        let anti: Vec<f64> = t.iter().map(|v| v * -0.7).collect();
        assert!((byol_pair_loss(&anti, &t) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn byol_grad_matches_central_differences() {
        let mut rng = derive_rng(13, "byol-fd", &[]);
        for case in 0..10 {
            let d = 3 + case % 4;
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t: Vec<f64> = {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            };
            let g = byol_pair_grad(&p, &t);
            let h = 1e-6;
            for j in 0..d {
                let mut pp = p.clone();
                pp[j] += h;
                let mut pm = p.clone();
                pm[j] -= h;
                let fd = (byol_pair_loss(&pp, &t) - byol_pair_loss(&pm, &t)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
                assert!(rel < 1e-4, "case {case} coord {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn msf_degenerate_cases() {
        // k = 1 with the neighbor set being u itself: the bootstrap pull.
        let q = vec![0.0f64, 2.0, 0.0];
        let u = vec![1.0f64, 0.0, 0.0];
        let loss = msf_loss(&q, &[u.clone()]);
        assert!((loss - 2.0).abs() < 1e-12); // |qhat - u|^2 = 2 - 2*0
        // q equal to all neighbors: zero.
        let z = vec![0.0f64, 1.0, 0.0];
        assert!(msf_loss(&q, &[z.clone(), z.clone(), z]).abs() < 1e-12);
    }

    #[test]
    fn msf_grad_matches_central_differences() {
        let mut rng = derive_rng(14, "msf-fd", &[]);
        for case in 0..10 {
            let d = 4 + case % 3;
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = 1 + case % 4;
            let neighbors: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            let g = msf_grad(&q, &neighbors);
            let h = 1e-6;
            for j in 0..d {
                let mut qp = q.clone();
                qp[j] += h;
                let mut qm = q.clone();
                qm[j] -= h;
                let fd = (msf_loss(&qp, &neighbors) - msf_loss(&qm, &neighbors)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
                assert!(rel < 1e-4, "case {case} coord {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Array2::<f32>::zeros((2, 4));
        let (loss, _) = cross_entropy_grad(&logits, &[1, 3]);
        assert!((loss - (4.0f64).ln()).abs() < 1e-6);
        let logits = Array2::<f32>::zeros((1, 100));
        let (loss, _) = cross_entropy_grad(&logits, &[42]);
        assert!((loss - (100.0f64).ln()).abs() < 1e-6);
    }
}
