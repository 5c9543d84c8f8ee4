//! Fixed-batch descent check: repeated steps on one batch must drive the
//! contrastive loss down if the gradient chain is correct.

use ndarray::Array4;
use sslbd::nn::{BackboneConfig};
use sslbd::rng::derive_rng;
use sslbd::ssl::losses::info_nce_batch_grad;
use sslbd::ssl::encoder::{copy_weights, ema_update, EncoderNet};
use sslbd::ssl::bank::EmbeddingBank;
use sslbd::nn::layers::BnMode;
use sslbd::nn::optim::OptimizerConfig;
use sslbd::nn::{normalize_rows, normalize_rows_backward};
use rand::Rng;

fn main() {
    let mut rng = derive_rng(1, "dbg", &[]);
    let cfg = BackboneConfig::micro();
    let mut online = EncoderNet::new(&mut rng, &cfg, 128, 32, false);
    let mut target = online.clone();
    copy_weights(&mut target, &mut online);
    let queue = EmbeddingBank::new_random(&mut rng, 256, 32);
    let mut opt = OptimizerConfig::sgd(0.03, 1e-4, 0.9).build();

    let n = 32;
    let mut x1 = Array4::<f32>::zeros((n, 3, 16, 16));
    let mut x2 = Array4::<f32>::zeros((n, 3, 16, 16));
    for v in x1.iter_mut() {
        *v = rng.random_range(-1.0f32..1.0);
    }
    // x2 = x1 + small noise (two "views").
    for (a, b) in x2.iter_mut().zip(x1.iter()) {
        *a = *b + rng.random_range(-0.1f32..0.1);
    }
    let train = BnMode::Train { ghost_splits: 1, update_running: true };
    for step in 0..30 {
        online.zero_grads();
        let (q_raw, cache) = online.forward(&x1, train);
        let mut q = q_raw.clone();
        let norms = normalize_rows(&mut q);
        let (k_raw, _) = target.forward(&x2, BnMode::Train { ghost_splits: 1, update_running: false });
        let mut k = k_raw;
        normalize_rows(&mut k);
        let (loss, g_hat) = info_nce_batch_grad(&q, &k, queue.rows(), 0.2);
        let g_raw = normalize_rows_backward(&g_hat.view(), &q.view(), &norms);
        online.backward(&cache, &g_raw);
        let mut params = Vec::new();
        online.collect_params(&mut params);
        opt.step(&mut params, 0.03);
        ema_update(&mut target, &mut online, 0.9);
        if step % 5 == 0 || step == 29 {
            // Also report mean positive logit and mean queue logit.
            let pos: f32 = (0..n)
                .map(|i| q.row(i).iter().zip(k.row(i).iter()).map(|(a, b)| a * b).sum::<f32>())
                .sum::<f32>() / n as f32;
            println!("step {step}: loss {loss:.4}  mean q.k+ {pos:.4}");
        }
    }
}
