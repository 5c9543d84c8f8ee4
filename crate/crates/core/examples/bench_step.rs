//! Rough single-core timing of the training inner loop building blocks.
use ndarray::{Array2, Array4};
use sslbd::nn::{Backbone, BackboneConfig, BnMode, FeatureTap};
use std::time::Instant;

fn main() {
    // GEMM throughput.
    let a = Array2::<f32>::from_elem((2048, 256), 0.5);
    let b = Array2::<f32>::from_elem((256, 256), 0.25);
    let t = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..20 {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let dt = t.elapsed().as_secs_f64();
    let flops = 20.0 * 2.0 * 2048.0 * 256.0 * 256.0;
    println!("gemm: {:.2} GFLOP/s (acc {acc})", flops / dt / 1e9);

    let mut rng = sslbd::rng::derive_rng(1, "bench", &[]);
    for (name, cfg, side, batch) in [
        ("micro16", BackboneConfig::micro(), 16usize, 128usize),
        ("micro24", BackboneConfig::micro(), 24, 128),
        (
            "slim16",
            BackboneConfig { stem_width: 12, stage_widths: vec![16, 32, 64], blocks_per_stage: vec![1, 1, 1] },
            16,
            128,
        ),
        ("r18c32", BackboneConfig::resnet18_cifar(), 32, 64),
    ] {
        let mut net = Backbone::new(&mut rng, &cfg);
        let x = Array4::<f32>::from_elem((batch, 3, side, side), 0.3);
        let mode = BnMode::Train { ghost_splits: 1, update_running: true };
        // warmup
        let (f, cache) = net.forward(&x, mode, FeatureTap::FinalStage);
        let g = Array2::<f32>::from_elem(f.raw_dim(), 1e-3);
        let _ = net.backward(&cache, &g);
        let t = Instant::now();
        let iters = 3;
        for _ in 0..iters {
            let (f, cache) = net.forward(&x, mode, FeatureTap::FinalStage);
            let g = Array2::<f32>::from_elem(f.raw_dim(), 1e-3);
            let _ = net.backward(&cache, &g);
        }
        let dt = t.elapsed().as_secs_f64() / iters as f64;
        println!("{name}: fwd+bwd batch {batch} @{side}px: {:.1} ms ({:.2} ms/img)", dt * 1e3, dt * 1e3 / batch as f64);
    }
}
