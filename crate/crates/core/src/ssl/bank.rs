//! FIFO store of unit-normalized embeddings: the negative queue for the
//! contrastive method and the neighbor pool for the mean-shift method.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::layers::randn;

#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    /// `(capacity, dim)`, every row unit-norm.
    rows: Array2<f32>,
    cursor: usize,
    dim: usize,
}

impl EmbeddingBank {
    /// Bank pre-filled with unit-normalized Gaussian rows so early logits
    /// are non-degenerate.
    pub fn new_random(rng: &mut ChaCha12Rng, capacity: usize, dim: usize) -> Self {
        let mut rows = Array2::<f32>::from_shape_vec(
            (capacity, dim),
            randn(rng, capacity * dim),
        )
        .expect("sized buffer");
        crate::nn::normalize_rows(&mut rows);
        EmbeddingBank {
            rows,
            cursor: 0,
            dim,
        }
    }

    pub fn capacity(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    /// FIFO insert of a batch of unit rows, oldest rows overwritten. The
    /// batch size must divide the capacity so wraparound stays aligned.
    pub fn enqueue(&mut self, batch: &Array2<f32>) -> Result<()> {
        let n = batch.nrows();
        if self.capacity() % n != 0 {
            return Err(Error::Config(format!(
                "batch size {n} must divide bank capacity {}",
                self.capacity()
            )));
        }
        debug_assert_eq!(batch.ncols(), self.dim);
        for row in batch.rows() {
            let mut dst = self.rows.row_mut(self.cursor);
            for (d, s) in dst.iter_mut().zip(row.iter()) {
                *d = *s;
            }
            self.cursor = (self.cursor + 1) % self.capacity();
        }
        Ok(())
    }

    /// Indices of the `k` nearest rows to `query` by cosine similarity,
    /// descending. Deterministic: ties resolve to the lower index.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        if k > self.capacity() {
            return Err(Error::Config(format!(
                "k={k} exceeds bank occupancy {}",
                self.capacity()
            )));
        }
        let mut sims: Vec<(usize, f32)> = self
            .rows
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let s: f32 = row.iter().zip(query.iter()).map(|(a, b)| a * b).sum();
                (i, s)
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Ok(sims.into_iter().take(k).map(|(i, _)| i).collect())
    }

    pub fn row(&self, i: usize) -> Vec<f32> {
        self.rows.row(i).to_vec()
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for row in self.rows.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array2;

    #[test]
    fn fifo_matches_list_simulation_over_1000_steps() {
        let mut rng = derive_rng(21, "bank", &[]);
        let (cap, dim, batch) = (16usize, 3usize, 4usize);
        let mut bank = EmbeddingBank::new_random(&mut rng, cap, dim);
        // Reference: a plain Vec ring of rows.
        let mut reference: Vec<Vec<f32>> = (0..cap).map(|i| bank.row(i)).collect();
        for step in 0..1000usize {
            let mut b = Array2::<f32>::zeros((batch, dim));
            for (i, mut row) in b.rows_mut().into_iter().enumerate() {
                let v = (step * batch + i) as f32;
                let raw = [v.sin(), v.cos(), 0.5];
                let n: f32 = raw.iter().map(|x| x * x).sum::<f32>().sqrt();
                for (dst, src) in row.iter_mut().zip(raw.iter()) {
                    *dst = src / n;
                }
            }
            bank.enqueue(&b).unwrap();
            for i in 0..batch {
                reference.remove(0);
                reference.push(b.row(i).to_vec());
            }
            if step % 97 == 0 {
                // Bank contents equal the reference ring as a multiset in
                // FIFO order starting at the cursor.
                let mut got = Vec::new();
                for i in 0..cap {
                    got.push(bank.row((bank.cursor + i) % cap));
                }
                assert_eq!(got, reference, "step {step}");
            }
            assert!(bank.max_norm_error() < 1e-5);
            assert_eq!(bank.capacity(), cap);
        }
    }

    #[test]
    fn enqueue_requires_divisible_batch() {
        let mut rng = derive_rng(22, "bank", &[]);
        let mut bank = EmbeddingBank::new_random(&mut rng, 16, 3);
        let b = Array2::<f32>::zeros((5, 3));
        assert!(bank.enqueue(&b).is_err());
    }

    #[test]
    fn top_k_matches_brute_force_scan() {
        let mut rng = derive_rng(23, "bank", &[]);
        let bank = EmbeddingBank::new_random(&mut rng, 64, 8);
        let query = bank.row(17);
        for k in [1usize, 5, 10] {
            let got = bank.top_k(&query, k).unwrap();
            // Brute force oracle.
            let mut sims: Vec<(usize, f32)> = (0..64)
                .map(|i| {
                    let row = bank.row(i);
                    let s: f32 = row.iter().zip(query.iter()).map(|(a, b)| a * b).sum();
                    (i, s)
                })
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = sims.into_iter().take(k).map(|(i, _)| i).collect();
            assert_eq!(got, want);
        }
        assert!(bank.top_k(&query, 65).is_err());
    }
}
