//! Supervised ceiling test: train the micro backbone to classify
//! patched-vs-clean directly. If this fails, the architecture cannot see
//! the patch and no SSL regime can bind it.

use ndarray::Array4;
use rand::Rng;
use sslbd::augment::{to_f32, write_normalized_chw};
use sslbd::imgproc::ImageF32;
use sslbd::nn::layers::BnMode;
use sslbd::nn::optim::OptimizerConfig;
use sslbd::nn::BackboneConfig;
use sslbd::rng::{derive_rng, derive_rng_for_id};
use sslbd::ssl::encoder::RotnetNet;
use sslbd::ssl::losses::cross_entropy_grad;
use sslbd::synth::{generate, SynthSpec};
use sslbd::trigger::{generate_trigger, paste_trigger, sample_location, TriggerSpec};

fn main() {
    let root = std::path::PathBuf::from("/tmp/sslbd_detect");
    let _ = std::fs::remove_dir_all(&root);
    let mut spec = SynthSpec::micro();
    spec.train_per_class = 60;
    spec.val_per_class = 30;
    generate(&spec, &root).unwrap();

    let trig = generate_trigger(&TriggerSpec::new(10, 42, 4)).unwrap();
    // Load all train images; make patched copies of half.
    let m = sslbd::manifest::build_manifest(&root, "synth", sslbd::manifest::Split::Train).unwrap();
    let mut images: Vec<ImageF32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, e) in m.entries.iter().enumerate() {
        let img = sslbd::imgproc::load_rgb8(&root.join(&e.relative_path)).unwrap();
        if i % 2 == 0 {
            let mut rng = derive_rng_for_id(9, "p", &e.image_id);
            let place = sample_location(16, 16, 4, &mut rng).unwrap();
            let patched = paste_trigger(&img, &trig, place).unwrap();
            images.push(to_f32(&patched));
            labels.push(1);
        } else {
            images.push(to_f32(&img));
            labels.push(0);
        }
    }
    let n = images.len();
    println!("{} images, {} patched", n, labels.iter().sum::<usize>());

    let mut rng = derive_rng(1, "net", &[]);
    let mut net = RotnetNet::new(&mut rng, &BackboneConfig::micro(), 2);
    let mut opt = OptimizerConfig::sgd(0.02, 1e-4, 0.9).build();
    let mode = BnMode::Train { ghost_splits: 1, update_running: true };
    let mean = [0.5f32; 3];
    let std = [0.25f32; 3];
    let batch = 64;
    for epoch in 0..15 {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut loss_acc = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            if chunk.len() < batch {
                continue;
            }
            let mut x = Array4::<f32>::zeros((chunk.len(), 3, 16, 16));
            let mut y = Vec::new();
            for (bi, &i) in chunk.iter().enumerate() {
                write_normalized_chw(
                    &images[i],
                    mean,
                    std,
                    x.index_axis_mut(ndarray::Axis(0), bi).as_slice_mut().unwrap(),
                );
                y.push(labels[i]);
            }
            net.zero_grads();
            let (logits, cache) = net.forward(&x, mode);
            for (bi, &lab) in y.iter().enumerate() {
                let row = logits.row(bi);
                let pred = if row[1] > row[0] { 1 } else { 0 };
                if pred == lab {
                    correct += 1;
                }
                seen += 1;
            }
            let (loss, grad) = cross_entropy_grad(&logits, &y);
            loss_acc += loss;
            steps += 1;
            net.backward(&cache, &grad);
            let mut params = Vec::new();
            net.collect_params(&mut params);
            opt.step(&mut params, 0.02);
        }
        println!(
            "epoch {epoch}: loss {:.4} train acc {:.1}%",
            loss_acc / steps as f64,
            100.0 * correct as f64 / seen as f64
        );
    }
}
