//! End-to-end smoke run: synth data -> targeted poison -> contrastive
//! training -> probe -> FP evaluation, against a clean baseline.

use std::time::Instant;

use sslbd::augment::AugmentationPolicy;
use sslbd::data::{LabeledImages, TrainImages};
use sslbd::manifest::{build_manifest, Split};
use sslbd::poison::{build_patched_valset, materialize, poison_targeted, PoisonRecipe};
use sslbd::probe::{
    evaluate, extract_embeddings, select_labeled_subset, train_linear_probe, EvalMetadata,
    ProbeConfig,
};
use sslbd::ssl::{load_encoder, train, Method, MethodConfig, TrainOptions};
use sslbd::synth::{generate, SynthSpec};
use sslbd::trigger::TriggerSpec;

fn main() {
    let t0 = Instant::now();
    let env = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let root = std::path::PathBuf::from("/tmp/sslbd_smoke");
    let _ = std::fs::remove_dir_all(&root);
    let src = root.join("src");
    let mut spec = SynthSpec::micro();
    spec.train_per_class = env("N_TRAIN", 150.0) as usize;
    generate(&spec, &src).unwrap();
    println!("[{:>6.1?}] synth data ready", t0.elapsed());

    let train_manifest = build_manifest(&src, "synth", Split::Train).unwrap();
    let val_manifest = build_manifest(&src, "synth", Split::Val).unwrap();
    let trigger = TriggerSpec::new(10, 42, env("PATCH", 4.0) as u32);
    let target = 3usize;

    // Poisoned training tree.
    let rate = env("RATE", 0.01);
    let untargeted = std::env::var("MODE").map(|m| m == "untargeted").unwrap_or(false);
    let poisoned = if untargeted {
        sslbd::poison::poison_untargeted(&train_manifest, rate, trigger, 5).unwrap()
    } else {
        let recipe =
            PoisonRecipe::targeted_from_rate(&train_manifest, target, rate, trigger, 5).unwrap();
        poison_targeted(&train_manifest, &recipe).unwrap()
    };
    println!("poisoned {} entries", poisoned.poisoned_count());
    let bd_root = root.join("bd");
    let bd_manifest = materialize(&poisoned, &src, &bd_root).unwrap();
    let clean_root = root.join("clean");
    let clean_train = materialize(&train_manifest, &src, &clean_root).unwrap();

    // Validation trees.
    let val_root = root.join("val_clean");
    let val_clean = materialize(&val_manifest, &src, &val_root).unwrap();
    let patched = build_patched_valset(&val_manifest, trigger, 77).unwrap();
    let val_patched_root = root.join("val_patched");
    let val_patched = materialize(&patched, &src, &val_patched_root).unwrap();
    println!("[{:>6.1?}] materialized", t0.elapsed());

    let mut policy = AugmentationPolicy::contrastive_micro(16);
    policy.crop_scale_range.0 = env("CROP_LO", policy.crop_scale_range.0);
    policy.blur_prob = env("BLUR_P", policy.blur_prob);
    policy.blur_sigma_range.1 = env("BLUR_HI", policy.blur_sigma_range.1);
    policy.color_jitter.brightness = env("BRIGHT", policy.color_jitter.brightness);
    policy.color_jitter.contrast = env("CONTRAST", policy.color_jitter.contrast);
    policy.color_jitter.saturation = env("SAT", policy.color_jitter.saturation);
    let mut cfg = MethodConfig::micro(Method::MocoV2);
    cfg.temperature = env("TAU", cfg.temperature);
    cfg.epochs = env("EPOCHS", cfg.epochs as f64) as usize;
    cfg.optimizer.learning_rate = env("LR", cfg.optimizer.learning_rate);
    cfg.batch_size = env("BATCH", cfg.batch_size as f64) as usize;
    cfg.queue_size = env("QUEUE", cfg.queue_size as f64) as usize;
    cfg.seed = 1;
    println!("knobs: n/class {} patch {} crop_lo {} tau {} epochs {} lr {} blur ({}, {}) jitter ({}, {}, {})",
        spec.train_per_class, trigger.patch_size, policy.crop_scale_range.0,
        cfg.temperature, cfg.epochs, cfg.optimizer.learning_rate,
        policy.blur_prob, policy.blur_sigma_range.1,
        policy.color_jitter.brightness, policy.color_jitter.contrast, policy.color_jitter.saturation);

    for (tag, manifest, data_root) in [
        ("backdoored", &bd_manifest, &bd_root),
        ("clean", &clean_train, &clean_root),
    ] {
        let t1 = Instant::now();
        let data = TrainImages::load(manifest, data_root).unwrap();
        let ckpt = train(
            &cfg,
            &data,
            &policy,
            &TrainOptions::default(),
            &root.join(format!("run_{tag}")),
        )
        .unwrap();
        println!("[{:>6.1?}] {tag} trained in {:?}", t0.elapsed(), t1.elapsed());
        if let Ok(text) = std::fs::read_to_string(root.join(format!("run_{tag}/train_log.jsonl"))) {
            let lines: Vec<&str> = text.lines().collect();
            if let (Some(first), Some(last)) = (lines.first(), lines.last()) {
                println!("loss first {first}");
                println!("loss last  {last}");
            }
        }

        let mut encoder = load_encoder(&ckpt.path).unwrap();
        // Probe labels always come from the clean tree.
        let labeled_manifest = select_labeled_subset(&clean_train, 0.1, 11).unwrap();
        let labeled = LabeledImages::load(&labeled_manifest, &clean_root).unwrap();
        let emb_train = extract_embeddings(&mut encoder, &labeled).unwrap();
        let probe_cfg = ProbeConfig {
            seed: 3,
            ..ProbeConfig::default()
        };
        let probe = train_linear_probe(
            &emb_train,
            &labeled.labels,
            &labeled.classes,
            &probe_cfg,
        )
        .unwrap();
        println!("probe train acc {:.1}%", probe.train_accuracy);

        let clean_val_imgs = LabeledImages::load(&val_clean, &val_root).unwrap();
        let patched_val_imgs = LabeledImages::load(&val_patched, &val_patched_root).unwrap();
        let emb_clean = extract_embeddings(&mut encoder, &clean_val_imgs).unwrap();
        let emb_patched = extract_embeddings(&mut encoder, &patched_val_imgs).unwrap();
        let report = evaluate(
            &probe,
            &emb_clean,
            &emb_patched,
            &clean_val_imgs.labels,
            Some(&val_clean.classes[target]),
            EvalMetadata {
                checkpoint_hash: encoder.checkpoint_hash.clone(),
                clean_manifest_hash: val_clean.content_hash(),
                patched_manifest_hash: val_patched.content_hash(),
                probe_train_accuracy: probe.train_accuracy,
                label_fraction: 0.1,
                probe_seed: 3,
            },
        )
        .unwrap();
        println!(
            "{tag}: clean acc {:.2}%  patched acc {:.2}%  target FP clean {}  target FP patched {}",
            report.clean_acc,
            report.patched_acc,
            report.target_fp_clean().unwrap(),
            report.target_fp_patched().unwrap()
        );
        println!("{}", report.render_table());
        // Diagnostic: how far does the patch move embeddings, and toward
        // which class centroid?
        {
            let mut rows_c = emb_clean.rows.clone();
            let mut rows_p = emb_patched.rows.clone();
            sslbd::nn::normalize_rows(&mut rows_c);
            sslbd::nn::normalize_rows(&mut rows_p);
            let n = rows_c.nrows();
            let d = rows_c.ncols();
            let mut mean_shift = 0.0f32;
            for i in 0..n {
                let cs: f32 = rows_c.row(i).iter().zip(rows_p.row(i).iter()).map(|(a, b)| a * b).sum();
                mean_shift += cs;
            }
            let mut centroid = vec![0.0f32; d];
            let mut count = 0.0f32;
            for i in 0..n {
                if clean_val_imgs.labels[i] == target {
                    for (c, v) in centroid.iter_mut().zip(rows_c.row(i).iter()) { *c += v; }
                    count += 1.0;
                }
            }
            let norm: f32 = centroid.iter().map(|v| v * v).sum::<f32>().sqrt();
            for c in centroid.iter_mut() { *c /= norm.max(1e-9); }
            let mut to_target_clean = 0.0f32;
            let mut to_target_patched = 0.0f32;
            let mut others = 0.0f32;
            for i in 0..n {
                if clean_val_imgs.labels[i] != target {
                    let c: f32 = rows_c.row(i).iter().zip(centroid.iter()).map(|(a, b)| a * b).sum();
                    let p: f32 = rows_p.row(i).iter().zip(centroid.iter()).map(|(a, b)| a * b).sum();
                    to_target_clean += c;
                    to_target_patched += p;
                    others += 1.0;
                }
            }
            println!(
                "diag {tag}: mean cos(clean,patched) {:.4}; cos to target centroid clean {:.4} -> patched {:.4}",
                mean_shift / n as f32,
                to_target_clean / others,
                to_target_patched / others
            );
            let _ = count;
            // Information floor: can a linear head even detect the patch
            // from embeddings? Train logreg patched-vs-clean on half the
            // val embeddings, test on the other half.
            let n2 = n / 2;
            let d2 = emb_clean.rows.ncols();
            let mut xs = ndarray::Array2::<f32>::zeros((2 * n2, d2));
            let mut ys = Vec::new();
            for i in 0..n2 {
                xs.row_mut(2 * i).assign(&emb_clean.rows.row(i));
                ys.push(0usize);
                xs.row_mut(2 * i + 1).assign(&emb_patched.rows.row(i));
                ys.push(1usize);
            }
            let emb2 = sslbd::probe::EmbeddingMatrix {
                rows: xs,
                row_ids: (0..2 * n2).map(|i| format!("d{i}")).collect(),
                checkpoint_hash: "diag".into(),
                preprocessing: "raw".into(),
            };
            let det_cfg = sslbd::probe::ProbeConfig {
                epochs: 30,
                milestones: vec![20, 25],
                batch_size: 128,
                seed: 1,
                ..Default::default()
            };
            let det = sslbd::probe::train_linear_probe(
                &emb2,
                &ys,
                &["clean".into(), "patched".into()],
                &det_cfg,
            )
            .unwrap();
            let mut test_x = ndarray::Array2::<f32>::zeros((2 * (n - n2), d2));
            let mut test_y = Vec::new();
            for (j, i) in (n2..n).enumerate() {
                test_x.row_mut(2 * j).assign(&emb_clean.rows.row(i));
                test_y.push(0usize);
                test_x.row_mut(2 * j + 1).assign(&emb_patched.rows.row(i));
                test_y.push(1usize);
            }
            let emb3 = sslbd::probe::EmbeddingMatrix {
                rows: test_x,
                row_ids: (0..2 * (n - n2)).map(|i| format!("t{i}")).collect(),
                checkpoint_hash: "diag".into(),
                preprocessing: "raw".into(),
            };
            let preds = sslbd::probe::predict(&det, &emb3).unwrap();
            let acc = preds.iter().zip(test_y.iter()).filter(|(p, l)| p == l).count() as f64
                / preds.len() as f64;
            println!("diag {tag}: patch detectability from embeddings: {:.1}%", 100.0 * acc);
            // Ceiling: detectability from raw pixels.
            if tag == "clean" {
                let px_dim = 3 * 16 * 16;
                let flat = |imgs: &sslbd::data::LabeledImages, i: usize| -> Vec<f32> {
                    imgs.images[i].as_raw().iter().map(|&v| v as f32 / 255.0).collect()
                };
                let mut xs = ndarray::Array2::<f32>::zeros((2 * n2, px_dim));
                let mut ys = Vec::new();
                for i in 0..n2 {
                    xs.row_mut(2 * i).assign(&ndarray::Array1::from(flat(&clean_val_imgs, i)));
                    ys.push(0usize);
                    xs.row_mut(2 * i + 1).assign(&ndarray::Array1::from(flat(&patched_val_imgs, i)));
                    ys.push(1usize);
                }
                let embp = sslbd::probe::EmbeddingMatrix {
                    rows: xs,
                    row_ids: (0..2 * n2).map(|i| format!("p{i}")).collect(),
                    checkpoint_hash: "diag".into(),
                    preprocessing: "raw".into(),
                };
                let det2 = sslbd::probe::train_linear_probe(
                    &embp, &ys, &["clean".into(), "patched".into()], &det_cfg).unwrap();
                println!("diag: raw-pixel detectability (train acc): {:.1}%", det2.train_accuracy);
            }
        }
    }
    println!("total {:?}", t0.elapsed());
}
