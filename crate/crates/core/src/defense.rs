//! Distillation defense: train a fresh student to match the teacher's
//! similarity distribution over a frozen set of anchor embeddings (the
//! one-queue variant: both distributions are computed against the TEACHER's
//! anchor embeddings), using only clean data. The student never sees a
//! trigger, so the backdoor does not transfer.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, to_f32, write_normalized_chw, AugmentationPolicy};
use crate::data::{assert_clean, TrainImages};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::nn::backbone::BackboneConfig;
use crate::nn::layers::BnMode;
use crate::nn::optim::{OptimizerConfig, Schedule, ScheduleConfig};
use crate::nn::{normalize_rows, normalize_rows_backward};
use crate::rng::derive_rng;
use crate::ssl::encoder::EncoderNet;
use crate::ssl::{
    load_encoder, save_plain_encoder, EncoderCheckpoint, LoadedEncoder, Method, MethodConfig,
};

/// Teacher embeddings of a fixed random anchor set, unit rows, frozen for
/// the whole distillation run.
#[derive(Debug, Clone)]
pub struct AnchorBank {
    pub anchors: Array2<f32>,
    pub anchor_ids: Vec<String>,
    pub temperature: f64,
}

impl AnchorBank {
    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }
}

/// Probability distribution of an embedding over the anchor set:
/// softmax of cosine similarities divided by the distillation temperature.
/// Computed in f64.
pub fn similarity_distribution(embedding: &[f32], bank: &AnchorBank) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::Config("anchor bank is empty".into()));
    }
    if embedding.len() != bank.anchors.ncols() {
        return Err(Error::Config(format!(
            "embedding width {} does not match anchor width {}",
            embedding.len(),
            bank.anchors.ncols()
        )));
    }
    let norm: f64 = embedding.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Config(format!(
            "embedding must be unit-normalized, got norm {norm:.6}"
        )));
    }
    let logits: Vec<f64> = bank
        .anchors
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(embedding.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum::<f64>()
                / bank.temperature
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// KL(teacher || student) = sum p_i ln(p_i / q_i), with `q` floored at
/// 1e-12 so a vanishing student probability cannot produce infinities.
pub fn compress_loss(teacher_dist: &[f64], student_dist: &[f64]) -> Result<f64> {
    if teacher_dist.len() != student_dist.len() {
        return Err(Error::Config(format!(
            "distribution lengths differ: {} vs {}",
            teacher_dist.len(),
            student_dist.len()
        )));
    }
    let mut acc = 0.0f64;
    for (&p, &q) in teacher_dist.iter().zip(student_dist.iter()) {
        if p > 0.0 {
            acc += p * (p / q.max(1e-12)).ln();
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Fraction of the clean training set used for distillation.
    pub clean_fraction: f64,
    pub anchor_count: usize,
    /// Distillation softmax temperature.
    pub temperature: f64,
    pub student_backbone: BackboneConfig,
    pub proj_hidden: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl DistillConfig {
    /// Desk-scale defaults; anchor count and temperature follow the cited
    /// distillation method's reference configuration.
    pub fn desk_default() -> Self {
        DistillConfig {
            clean_fraction: 0.25,
            anchor_count: 4096,
            temperature: 0.04,
            student_backbone: BackboneConfig::resnet18_cifar(),
            proj_hidden: 512,
            optimizer: OptimizerConfig::sgd(0.05, 1e-4, 0.9),
            schedule: ScheduleConfig::Cosine,
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }

    pub fn micro() -> Self {
        DistillConfig {
            clean_fraction: 0.25,
            anchor_count: 256,
            temperature: 0.04,
            student_backbone: BackboneConfig::micro(),
            proj_hidden: 128,
            optimizer: OptimizerConfig::sgd(0.05, 1e-4, 0.9),
            schedule: ScheduleConfig::Cosine,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clean_fraction > 0.0 && self.clean_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "clean fraction {} outside (0, 1]",
                self.clean_fraction
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("distillation temperature must be positive".into()));
        }
        if self.anchor_count == 0 || self.batch_size == 0 {
            return Err(Error::Config("anchor count and batch size must be positive".into()));
        }
        self.student_backbone.validate()
    }
}

/// Uniform clean subset of the manifest at `fraction`, stratified per class
/// so reduced sets keep the class balance.
pub fn select_clean_subset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    assert_clean(manifest, "distillation data")?;
    let mut out = manifest.clone();
    out.entries.clear();
    for (class_idx, _) in manifest.classes.iter().enumerate() {
        let idxs: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class_idx)
            .map(|(i, _)| i)
            .collect();
        let want = (fraction * idxs.len() as f64).round_ties_even() as usize;
        let mut order = idxs;
        let mut rng = derive_rng(seed, "clean-subset", &[&(class_idx as u64).to_le_bytes()]);
        order.shuffle(&mut rng);
        let mut chosen: Vec<usize> = order.into_iter().take(want).collect();
        chosen.sort();
        for i in chosen {
            out.entries.push(manifest.entries[i].clone());
        }
    }
    out.validate()?;
    Ok(out)
}

/// Deterministic (eval-preprocessed) batch tensor of the given images.
fn eval_batch(
    data: &TrainImages,
    idxs: &[usize],
    size: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Array4<f32> {
    let mut x = Array4::<f32>::zeros((idxs.len(), 3, size, size));
    for (bi, &i) in idxs.iter().enumerate() {
        let f = to_f32(&data.images[i]);
        let side = f.width.min(f.height);
        let resized = f.crop_resize(
            (f.width - side) / 2,
            (f.height - side) / 2,
            side,
            side,
            size,
        );
        write_normalized_chw(
            &resized,
            mean,
            std,
            x.index_axis_mut(ndarray::Axis(0), bi).as_slice_mut().unwrap(),
        );
    }
    x
}

/// Build the frozen anchor bank from the teacher's embeddings of a random
/// clean anchor set.
pub fn build_anchor_bank(
    teacher: &mut LoadedEncoder,
    data: &TrainImages,
    cfg: &DistillConfig,
) -> Result<AnchorBank> {
    if cfg.anchor_count > data.len() {
        return Err(Error::Config(format!(
            "anchor count {} exceeds clean set size {}",
            cfg.anchor_count,
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = derive_rng(cfg.seed, "anchors", &[]);
    order.shuffle(&mut rng);
    let chosen: Vec<usize> = order.into_iter().take(cfg.anchor_count).collect();
    let size = teacher.meta.policy.output_size;
    let mean = teacher.meta.policy.normalize_mean;
    let std = teacher.meta.policy.normalize_std;
    let mut anchors = Array2::<f32>::zeros((cfg.anchor_count, teacher.meta.config.embedding_dim));
    let mut ids = Vec::with_capacity(cfg.anchor_count);
    for (start, chunk) in chosen.chunks(256).enumerate() {
        let x = eval_batch(data, chunk, size, mean, std);
        let emb = teacher.embed_projected(&x)?;
        anchors
            .slice_mut(ndarray::s![start * 256..start * 256 + chunk.len(), ..])
            .assign(&emb);
    }
    for &i in &chosen {
        ids.push(data.ids[i].clone());
    }
    Ok(AnchorBank {
        anchors,
        anchor_ids: ids,
        temperature: cfg.temperature,
    })
}

/// Distill `teacher` into a freshly initialized student on clean data.
///
/// Per step: the same augmented batch is embedded by the frozen teacher and
/// the student; both similarity distributions are taken against the teacher
/// anchor bank; KL(teacher || student) backpropagates into the student only.
pub fn distill(
    teacher_path: &Path,
    clean_manifest: &DatasetManifest,
    data_root: &Path,
    cfg: &DistillConfig,
    policy: &AugmentationPolicy,
    out_dir: &Path,
) -> Result<EncoderCheckpoint> {
    cfg.validate()?;
    policy.validate()?;
    let poisoned = clean_manifest.poisoned_ids();
    if !poisoned.is_empty() {
        let sample: Vec<_> = poisoned.iter().take(5).cloned().collect();
        return Err(Error::Data(format!(
            "distillation refuses poisoned entries: {} offending ids (e.g. {})",
            poisoned.len(),
            sample.join(", ")
        )));
    }
    let mut teacher = load_encoder(teacher_path)?;
    if teacher.proj.is_none() {
        return Err(Error::Config(
            "teacher checkpoint has no projection head to distill from".into(),
        ));
    }
    let data = TrainImages::load(clean_manifest, data_root)?;
    if data.is_empty() {
        return Err(Error::Data("clean distillation set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let bank = build_anchor_bank(&mut teacher, &data, cfg)?;

    let embed_dim = teacher.meta.config.embedding_dim;
    let mut init_rng = derive_rng(cfg.seed, "student-init", &[]);
    let mut student = EncoderNet::new(
        &mut init_rng,
        &cfg.student_backbone,
        cfg.proj_hidden,
        embed_dim,
        false,
    );
    let mut opt = cfg.optimizer.build();
    let steps_per_epoch = (data.len() / cfg.batch_size).max(1);
    let schedule = Schedule::new(
        cfg.schedule.clone(),
        cfg.optimizer.learning_rate,
        steps_per_epoch * cfg.epochs.max(1),
        steps_per_epoch,
    );
    let size = policy.output_size;
    let (mean, std) = (policy.normalize_mean, policy.normalize_std);
    let anchors_t = bank.anchors.t().to_owned();
    let tau = cfg.temperature as f32;

    let log_path = out_dir.join("distill_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let train_mode = BnMode::Train {
        ghost_splits: 1,
        update_running: true,
    };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut ernk = derive_rng(cfg.seed, "distill-order", &[&(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut ernk);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                continue;
            }
            let n = batch.len();
            // One augmented view per sample, shared by teacher and student.
            let mut x = Array4::<f32>::zeros((n, 3, size, size));
            for (bi, &idx) in batch.iter().enumerate() {
                let mut rng = crate::rng::derive_rng_for_sample(
                    cfg.seed,
                    "distill-augment",
                    epoch as u32,
                    idx as u64,
                );
                let img = to_f32(&data.images[idx]);
                let (view, _) = augment_view(&img, policy, &mut rng);
                write_normalized_chw(
                    &view,
                    mean,
                    std,
                    x.index_axis_mut(ndarray::Axis(0), bi).as_slice_mut().unwrap(),
                );
            }
            let teacher_emb = teacher.embed_projected(&x)?;
            student.zero_grads();
            let (s_raw, cache) = student.forward(&x, train_mode);
            let mut s_hat = s_raw.clone();
            let norms = normalize_rows(&mut s_hat);

            // Teacher and student logits against the teacher anchors.
            let t_logits = teacher_emb.dot(&anchors_t).mapv(|v| v / tau);
            let s_logits = s_hat.dot(&anchors_t).mapv(|v| v / tau);
            let mut loss_sum = 0.0f64;
            let mut g_logits = Array2::<f32>::zeros(s_logits.raw_dim());
            for i in 0..n {
                let softmax = |row: ndarray::ArrayView1<f32>| -> Vec<f64> {
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let exps: Vec<f64> =
                        row.iter().map(|&v| ((v as f64) - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    exps.into_iter().map(|e| e / z).collect()
                };
                let p = softmax(t_logits.row(i));
                let q = softmax(s_logits.row(i));
                loss_sum += compress_loss(&p, &q)?;
                // dKL/dlogit_q = q - p, averaged over the batch.
                for (j, g) in g_logits.row_mut(i).iter_mut().enumerate() {
                    *g = ((q[j] - p[j]) / n as f64) as f32;
                }
            }
            let loss = loss_sum / n as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("distillation loss {loss}"),
                });
            }
            // Back through the similarity: dL/ds_hat = (g / tau) . anchors.
            let g_hat = g_logits.dot(&bank.anchors).mapv(|v| v / tau);
            let g_raw = normalize_rows_backward(&g_hat.view(), &s_hat.view(), &norms);
            student.backward(&cache, &g_raw);
            let lr = schedule.lr_at(step as usize) as f32;
            let mut params = Vec::new();
            student.collect_params(&mut params);
            opt.step(&mut params, lr);
            writeln!(
                log,
                "{}",
                serde_json::json!({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            )
            .map_err(|e| Error::io(&log_path, e))?;
            step += 1;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let student_cfg = MethodConfig {
        method: Method::Distilled,
        backbone: cfg.student_backbone.clone(),
        embedding_dim: embed_dim,
        proj_hidden: cfg.proj_hidden,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        optimizer: cfg.optimizer.clone(),
        schedule: cfg.schedule.clone(),
        ..MethodConfig::micro(Method::MocoV2)
    };
    save_plain_encoder(
        student,
        &student_cfg,
        policy,
        &data.manifest_hash,
        cfg.epochs,
        &out_dir.join("student_final.ssbd"),
    )
}

/// Ids the distillation run would train on; exposed for audit tests.
pub fn audit_ids(manifest: &DatasetManifest) -> BTreeSet<String> {
    manifest.entries.iter().map(|e| e.image_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: Vec<Vec<f32>>, tau: f64) -> AnchorBank {
        let a = rows.len();
        let d = rows[0].len();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        AnchorBank {
            anchors: Array2::from_shape_vec((a, d), flat).unwrap(),
            anchor_ids: (0..a).map(|i| format!("a{i}")).collect(),
            temperature: tau,
        }
    }

    #[test]
    fn single_anchor_distribution_is_one() {
        let b = bank(vec![vec![1.0, 0.0]], 0.04);
        let p = similarity_distribution(&[0.0, 1.0], &b).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn equal_similarity_gives_uniform() {
        let b = bank(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            0.5,
        );
        let e = [std::f32::consts::FRAC_1_SQRT_2, std::f32::consts::FRAC_1_SQRT_2];
        let p = similarity_distribution(&e, &b).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-9 && (p[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn two_anchor_softmax_matches_direct_evaluation() {
        // sims (1, 0) at tau=1: probabilities (e/(e+1), 1/(e+1)).
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        // Need unit embedding with cos = (1, 0): embedding = anchor 0.
        let p = similarity_distribution(&[1.0, 0.0], &b).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-9, "{p:?}");
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-9);
        assert!((p[0] - 0.731).abs() < 1e-3 && (p[1] - 0.269).abs() < 1e-3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_bank_is_an_error() {
        let b = AnchorBank {
            anchors: Array2::<f32>::zeros((0, 2)),
            anchor_ids: vec![],
            temperature: 1.0,
        };
        assert!(similarity_distribution(&[1.0, 0.0], &b).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = vec![0.2, 0.5, 0.3];
        assert_eq!(compress_loss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_direct_evaluation() {
        let p = vec![0.75, 0.25];
        let q = vec![0.5, 0.5];
        let got = compress_loss(&p, &q).unwrap();
        let want = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn kl_nonnegative_over_sampled_pairs() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(77, "kl", &[]);
        for _ in 0..10_000 {
            let len = rng.random_range(2..6usize);
            let sample = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            };
            let p = sample(&mut rng);
            let q = sample(&mut rng);
            let kl = compress_loss(&p, &q).unwrap();
            assert!(kl >= -1e-12, "KL({p:?} || {q:?}) = {kl}");
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compress_loss(&[0.5, 0.5], &[1.0]).is_err());
    }
}
