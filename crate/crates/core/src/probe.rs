//! Linear probe over frozen features and the false-positive evaluation that
//! measures attack success.
//!
//! The probe is multinomial logistic regression trained on a small clean
//! labeled fraction. Evaluation compares clean and patched validation sets
//! over the same image ids and reports accuracy plus per-class false
//! positives (predictions of class c whose true class is not c).

use std::io::Write as IoWrite;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array4, Ix2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{assert_clean, LabeledImages};
use crate::error::{Error, Result};
use crate::imgproc::ImageF32;
use crate::manifest::DatasetManifest;
use crate::nn::checkpoint::TensorArchive;
use crate::nn::layers::Linear;
use crate::nn::optim::{OptimizerConfig, Schedule, ScheduleConfig};
use crate::rng::{derive_rng, sha256_hex};
use crate::ssl::losses::cross_entropy_grad;
use crate::ssl::LoadedEncoder;

pub const EVAL_REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Fraction of clean training images used as the labeled subset.
    pub label_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Epoch milestones where the rate decays by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Standardize embedding features before fitting (off by default; the
    /// common benchmark convention feeds tap-layer features raw).
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            label_fraction: 0.1,
            optimizer: OptimizerConfig::sgd(0.01, 1e-4, 0.9),
            epochs: 40,
            milestones: vec![15, 30],
            gamma: 0.1,
            batch_size: 256,
            seed: 0,
            standardize: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label fraction {} outside (0, 1]",
                self.label_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen features for a set of images, aligned with their ids.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f32>,
    pub row_ids: Vec<String>,
    pub checkpoint_hash: String,
    pub preprocessing: String,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.nrows() != self.row_ids.len() {
            return Err(Error::Data("embedding rows and ids misaligned".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.row_ids {
            if !seen.insert(id) {
                return Err(Error::Data(format!("duplicate embedding row id {id}")));
            }
        }
        if self.rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding values".into()));
        }
        Ok(())
    }
}

/// Deterministic evaluation preprocessing: center-crop to square, bilinear
/// resize to the training resolution, normalize.
fn preprocess_eval(img: &RgbImage, size: usize, mean: [f32; 3], std: [f32; 3], dst: &mut [f32]) {
    let f = ImageF32::from_rgb8(img);
    let side = f.width.min(f.height);
    let x0 = (f.width - side) / 2;
    let y0 = (f.height - side) / 2;
    let resized = f.crop_resize(x0, y0, side, side, size);
    crate::augment::write_normalized_chw(&resized, mean, std, dst);
}

/// Embed every image in manifest order at the encoder's feature tap.
pub fn extract_embeddings(
    encoder: &mut LoadedEncoder,
    images: &LabeledImages,
) -> Result<EmbeddingMatrix> {
    let size = encoder.meta.policy.output_size;
    let mean = encoder.meta.policy.normalize_mean;
    let std = encoder.meta.policy.normalize_std;
    let n = images.len();
    if n == 0 {
        return Err(Error::Data("no images to embed".into()));
    }
    let dim = encoder
        .backbone
        .feature_dim(encoder.meta.method.feature_tap());
    let mut rows = Array2::<f32>::zeros((n, dim));
    let chunk = 256usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let mut x = Array4::<f32>::zeros((end - start, 3, size, size));
        for (bi, img) in images.images[start..end].iter().enumerate() {
            preprocess_eval(
                img,
                size,
                mean,
                std,
                x.index_axis_mut(ndarray::Axis(0), bi).as_slice_mut().unwrap(),
            );
        }
        let feat = encoder.embed(&x);
        rows.slice_mut(ndarray::s![start..end, ..]).assign(&feat);
        start = end;
    }
    let out = EmbeddingMatrix {
        rows,
        row_ids: images.ids.clone(),
        checkpoint_hash: encoder.checkpoint_hash.clone(),
        preprocessing: format!("centercrop-resize{size}-normalize"),
    };
    out.validate()?;
    Ok(out)
}

/// Class-stratified uniform sample of clean entries: per-class count =
/// round(fraction * class size). Poisoned entries are never eligible.
pub fn select_labeled_subset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut out = manifest.clone();
    out.entries.clear();
    out.trigger = None;
    for (class_idx, _) in manifest.classes.iter().enumerate() {
        let clean: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class_idx && !e.is_poisoned)
            .map(|(i, _)| i)
            .collect();
        let class_total = manifest
            .entries
            .iter()
            .filter(|e| e.label == class_idx)
            .count();
        if class_total > 0 && clean.is_empty() {
            return Err(Error::Data(format!(
                "class {} has no clean images to label",
                manifest.classes[class_idx]
            )));
        }
        let want = (fraction * class_total as f64).round_ties_even() as usize;
        if want > clean.len() {
            return Err(Error::Data(format!(
                "class {} needs {want} labeled images but only {} clean ones exist",
                manifest.classes[class_idx],
                clean.len()
            )));
        }
        let mut order = clean;
        let mut rng = derive_rng(seed, "labeled-subset", &[&(class_idx as u64).to_le_bytes()]);
        order.shuffle(&mut rng);
        let mut chosen: Vec<usize> = order.into_iter().take(want).collect();
        chosen.sort();
        for i in chosen {
            out.entries.push(manifest.entries[i].clone());
        }
    }
    out.validate()?;
    assert_clean(&out, "labeled subset")?;
    Ok(out)
}

/// Multinomial logistic regression over frozen embeddings.
pub struct LinearProbe {
    pub linear: Linear,
    /// Per-feature (mean, inv_std) when standardization is on.
    pub standardizer: Option<(Vec<f32>, Vec<f32>)>,
    pub classes: Vec<String>,
    pub train_accuracy: f64,
}

impl LinearProbe {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = TensorArchive::new(serde_json::json!({
            "kind": "linear_probe",
            "classes": self.classes,
            "train_accuracy": self.train_accuracy,
            "standardized": self.standardizer.is_some(),
        }));
        let w = &self.linear.weight.data;
        archive.push("weight".into(), w.shape().to_vec(), w.iter().cloned().collect());
        let b = &self.linear.bias.data;
        archive.push("bias".into(), b.shape().to_vec(), b.iter().cloned().collect());
        if let Some((mean, inv_std)) = &self.standardizer {
            archive.push("feat_mean".into(), vec![mean.len()], mean.clone());
            archive.push("feat_inv_std".into(), vec![inv_std.len()], inv_std.clone());
        }
        archive.save(path)
    }

    pub fn load(path: &Path) -> Result<LinearProbe> {
        let archive = TensorArchive::load(path)?;
        let classes: Vec<String> = serde_json::from_value(archive.meta["classes"].clone())
            .map_err(|e| Error::Data(format!("bad probe meta: {e}")))?;
        let train_accuracy = archive.meta["train_accuracy"].as_f64().unwrap_or(0.0);
        let (wshape, wdata) = archive
            .get("weight")
            .ok_or_else(|| Error::Data("probe archive lacks weights".into()))?;
        let (_, bdata) = archive
            .get("bias")
            .ok_or_else(|| Error::Data("probe archive lacks bias".into()))?;
        let (classes_n, dim) = (wshape[0], wshape[1]);
        let mut rng = derive_rng(0, "probe-load", &[]);
        let mut linear = Linear::new(&mut rng, dim, classes_n);
        linear
            .weight
            .data
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(wdata);
        linear.bias.data.as_slice_mut().unwrap().copy_from_slice(bdata);
        let standardizer = match (archive.get("feat_mean"), archive.get("feat_inv_std")) {
            (Some((_, m)), Some((_, s))) => Some((m.to_vec(), s.to_vec())),
            _ => None,
        };
        Ok(LinearProbe {
            linear,
            standardizer,
            classes,
            train_accuracy,
        })
    }

    fn apply_standardizer(&self, rows: &Array2<f32>) -> Array2<f32> {
        match &self.standardizer {
            None => rows.clone(),
            Some((mean, inv_std)) => {
                let mut out = rows.clone();
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean[j]) * inv_std[j];
                    }
                }
                out
            }
        }
    }

    pub fn scores(&self, rows: &Array2<f32>) -> Array2<f32> {
        let x = self.apply_standardizer(rows);
        let w = self
            .linear
            .weight
            .data
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        let b = self.linear.bias.data.as_slice().unwrap();
        for mut row in y.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b.iter()) {
                *v += bias;
            }
        }
        y
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn predict(probe: &LinearProbe, embeddings: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if embeddings.dim() != probe.linear.dim_in {
        return Err(Error::Config(format!(
            "embedding width {} does not match probe input width {}",
            embeddings.dim(),
            probe.linear.dim_in
        )));
    }
    let scores = probe.scores(&embeddings.rows);
    Ok(argmax_rows(&scores))
}

fn argmax_rows(scores: &Array2<f32>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fit the probe on embeddings of the labeled subset.
pub fn train_linear_probe(
    embeddings: &EmbeddingMatrix,
    labels: &[usize],
    classes: &[String],
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    cfg.validate()?;
    embeddings.validate()?;
    let n = embeddings.rows.nrows();
    if n != labels.len() {
        return Err(Error::Data("labels misaligned with embeddings".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().cloned().collect();
    if distinct.len() < 2 {
        return Err(Error::Data(
            "probe training needs at least two distinct classes".into(),
        ));
    }
    let dim = embeddings.dim();
    let standardizer = cfg.standardize.then(|| {
        let mut mean = vec![0.0f32; dim];
        for row in embeddings.rows.rows() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f32;
        }
        let mut var = vec![0.0f32; dim];
        for row in embeddings.rows.rows() {
            for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f32> = var
            .iter()
            .map(|v| 1.0 / ((v / n as f32).sqrt() + 1e-6))
            .collect();
        (mean, inv_std)
    });
    let x_all = match &standardizer {
        None => embeddings.rows.clone(),
        Some((mean, inv_std)) => {
            let mut out = embeddings.rows.clone();
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
            out
        }
    };

    let mut rng = derive_rng(cfg.seed, "probe-init", &[]);
    let mut linear = Linear::new(&mut rng, dim, classes.len());
    let mut opt = cfg.optimizer.build();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = Schedule::new(
        ScheduleConfig::Step {
            milestones: cfg.milestones.clone(),
            gamma: cfg.gamma,
        },
        cfg.optimizer.learning_rate,
        steps_per_epoch * cfg.epochs,
        steps_per_epoch,
    );
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut ernk = derive_rng(cfg.seed, "probe-order", &[&(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut ernk);
        for batch in order.chunks(cfg.batch_size) {
            let mut xb = Array2::<f32>::zeros((batch.len(), dim));
            let mut yb = Vec::with_capacity(batch.len());
            for (bi, &i) in batch.iter().enumerate() {
                xb.row_mut(bi).assign(&x_all.row(i));
                yb.push(labels[i]);
            }
            linear.weight.zero_grad();
            linear.bias.zero_grad();
            let (logits, cache) = linear.forward(&xb);
            let (loss, grad) = cross_entropy_grad(&logits, &yb);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: step as u64,
                    msg: format!("probe loss {loss}"),
                });
            }
            let _ = linear.backward(&cache, &grad);
            let lr = schedule.lr_at(step) as f32;
            opt.step(&mut [&mut linear.weight, &mut linear.bias], lr);
            step += 1;
        }
    }
    // Final train accuracy.
    let (logits, _) = linear.forward(&x_all);
    let preds = argmax_rows(&logits);
    let correct = preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    Ok(LinearProbe {
        linear,
        standardizer,
        classes: classes.to_vec(),
        train_accuracy: 100.0 * correct as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub checkpoint_hash: String,
    pub clean_manifest_hash: String,
    pub patched_manifest_hash: String,
    pub probe_train_accuracy: f64,
    pub label_fraction: f64,
    pub probe_seed: u64,
}

/// Accuracy and per-class false positives on clean and patched validation
/// data: the attack-success currency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub classes: Vec<String>,
    pub target_class: Option<String>,
    /// Percent correct on the clean validation set.
    pub clean_acc: f64,
    pub patched_acc: f64,
    /// FP(c) = images of other classes predicted as c.
    pub per_class_fp_clean: Vec<u32>,
    pub per_class_fp_patched: Vec<u32>,
    pub per_class_tp_clean: Vec<u32>,
    pub per_class_tp_patched: Vec<u32>,
    /// Ten worst offender classes on patched data, descending.
    pub top_fp_patched: Vec<(String, u32)>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn target_fp_patched(&self) -> Option<u32> {
        let t = self.target_class.as_ref()?;
        let idx = self.classes.iter().position(|c| c == t)?;
        Some(self.per_class_fp_patched[idx])
    }

    pub fn target_fp_clean(&self) -> Option<u32> {
        let t = self.target_class.as_ref()?;
        let idx = self.classes.iter().position(|c| c == t)?;
        Some(self.per_class_fp_clean[idx])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    /// Render the clean/patched accuracy and FP columns as an aligned table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>10}\n",
            "", "Clean data", "Patched"
        ));
        out.push_str(&format!(
            "{:<24} {:>9.2}% {:>9.2}%\n",
            "accuracy", self.clean_acc, self.patched_acc
        ));
        if let Some(target) = &self.target_class {
            out.push_str(&format!(
                "{:<24} {:>10} {:>10}\n",
                format!("FP({target})"),
                self.target_fp_clean().unwrap_or(0),
                self.target_fp_patched().unwrap_or(0)
            ));
        }
        out.push_str("top patched-FP classes:\n");
        for (name, count) in self.top_fp_patched.iter().take(10) {
            out.push_str(&format!("  {name:<22} {count:>10}\n"));
        }
        out
    }
}

fn fp_tp_counts(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> (Vec<u32>, Vec<u32>, usize) {
    let mut fp = vec![0u32; n_classes];
    let mut tp = vec![0u32; n_classes];
    let mut correct = 0usize;
    for (&p, &l) in preds.iter().zip(labels.iter()) {
        if p == l {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
        }
    }
    (fp, tp, correct)
}

/// Evaluate a probe over clean and patched embeddings of the same ids.
pub fn evaluate(
    probe: &LinearProbe,
    clean: &EmbeddingMatrix,
    patched: &EmbeddingMatrix,
    labels: &[usize],
    target_class: Option<&str>,
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    if clean.row_ids != patched.row_ids {
        return Err(Error::Data(
            "clean and patched validation sets cover different image ids".into(),
        ));
    }
    if labels.len() != clean.row_ids.len() {
        return Err(Error::Data("label list misaligned with validation ids".into()));
    }
    if let Some(t) = target_class {
        if !probe.classes.iter().any(|c| c == t) {
            return Err(Error::Config(format!("unknown target class '{t}'")));
        }
    }
    let n = labels.len();
    let n_classes = probe.classes.len();
    let preds_clean = predict(probe, clean)?;
    let preds_patched = predict(probe, patched)?;
    let (fp_clean, tp_clean, correct_clean) = fp_tp_counts(&preds_clean, labels, n_classes);
    let (fp_patched, tp_patched, correct_patched) = fp_tp_counts(&preds_patched, labels, n_classes);
    let mut ranked: Vec<(String, u32)> = probe
        .classes
        .iter()
        .cloned()
        .zip(fp_patched.iter().cloned())
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(10);
    Ok(EvalReport {
        schema_version: EVAL_REPORT_SCHEMA_VERSION,
        classes: probe.classes.clone(),
        target_class: target_class.map(|s| s.to_string()),
        clean_acc: 100.0 * correct_clean as f64 / n as f64,
        patched_acc: 100.0 * correct_patched as f64 / n as f64,
        per_class_fp_clean: fp_clean,
        per_class_fp_patched: fp_patched,
        per_class_tp_clean: tp_clean,
        per_class_tp_patched: tp_patched,
        top_fp_patched: ranked,
        metadata,
    })
}

/// Which rows to export: per-class clean counts plus patched rows drawn from
/// the same classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportSpec {
    pub classes: Vec<String>,
    pub per_class_clean: usize,
    pub patched_total: usize,
    pub seed: u64,
}

/// Write an embedding bundle (CSV plus JSON sidecar) for external
/// projection tools: clean rows per selected class and patched rows flagged
/// `is_patched=1`.
pub fn export_embeddings(
    clean: &EmbeddingMatrix,
    patched: &EmbeddingMatrix,
    manifest: &DatasetManifest,
    spec: &ExportSpec,
    csv_path: &Path,
) -> Result<usize> {
    clean.validate()?;
    patched.validate()?;
    let label_of: std::collections::BTreeMap<&str, usize> = manifest
        .entries
        .iter()
        .map(|e| (e.image_id.as_str(), e.label))
        .collect();
    let class_indices: Vec<usize> = spec
        .classes
        .iter()
        .map(|name| manifest.class_index(name))
        .collect::<Result<_>>()?;
    let mut rows: Vec<(String, usize, bool, Vec<f32>)> = Vec::new();
    for (pos, &class_idx) in class_indices.iter().enumerate() {
        let candidates: Vec<usize> = clean
            .row_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| label_of.get(id.as_str()) == Some(&class_idx))
            .map(|(i, _)| i)
            .collect();
        if candidates.len() < spec.per_class_clean {
            return Err(Error::Data(format!(
                "class {} has {} embeddings, {} requested",
                spec.classes[pos],
                candidates.len(),
                spec.per_class_clean
            )));
        }
        let mut order = candidates;
        let mut rng = derive_rng(spec.seed, "export-clean", &[&(class_idx as u64).to_le_bytes()]);
        order.shuffle(&mut rng);
        for &i in order.iter().take(spec.per_class_clean) {
            rows.push((
                clean.row_ids[i].clone(),
                class_idx,
                false,
                clean.rows.row(i).to_vec(),
            ));
        }
    }
    let patched_candidates: Vec<usize> = patched
        .row_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| {
            label_of
                .get(id.as_str())
                .is_some_and(|l| class_indices.contains(l))
        })
        .map(|(i, _)| i)
        .collect();
    if patched_candidates.len() < spec.patched_total {
        return Err(Error::Data(format!(
            "{} patched embeddings available, {} requested",
            patched_candidates.len(),
            spec.patched_total
        )));
    }
    let mut order = patched_candidates;
    let mut rng = derive_rng(spec.seed, "export-patched", &[]);
    order.shuffle(&mut rng);
    for &i in order.iter().take(spec.patched_total) {
        rows.push((
            patched.row_ids[i].clone(),
            label_of[patched.row_ids[i].as_str()],
            true,
            patched.rows.row(i).to_vec(),
        ));
    }

    if let Some(parent) = csv_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let d = clean.dim();
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?,
    );
    let header: Vec<String> = ["image_id", "label", "is_patched"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|i| format!("e{i}")))
        .collect();
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(csv_path, e))?;
    for (id, label, is_patched, emb) in &rows {
        let mut line = format!("{id},{label},{}", u8::from(*is_patched));
        for v in emb {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}").map_err(|e| Error::io(csv_path, e))?;
    }
    f.flush().map_err(|e| Error::io(csv_path, e))?;

    let sidecar = serde_json::json!({
        "schema_version": 1,
        "classes": spec.classes,
        "per_class_clean": spec.per_class_clean,
        "patched_total": spec.patched_total,
        "seed": spec.seed,
        "rows": rows.len(),
        "dim": d,
        "checkpoint_hash": clean.checkpoint_hash,
        "content_hash": sha256_hex(&std::fs::read(csv_path).map_err(|e| Error::io(csv_path, e))?),
    });
    let sidecar_path = csv_path.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).unwrap(),
    )
    .map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn toy_embeddings(n_per: usize, d: usize, seed: u64) -> (EmbeddingMatrix, Vec<usize>) {
        // Two linearly separable Gaussian blobs.
        let mut rng = derive_rng(seed, "blobs", &[]);
        let n = n_per * 2;
        let mut rows = Array2::<f32>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i / n_per;
            let center = if class == 0 { -2.0f32 } else { 2.0 };
            for j in 0..d {
                rows[[i, j]] = center + rng.random_range(-0.5..0.5) + j as f32 * 0.01;
            }
            labels.push(class);
        }
        (
            EmbeddingMatrix {
                rows,
                row_ids: (0..n).map(|i| format!("img{i}")).collect(),
                checkpoint_hash: "sha256:test".into(),
                preprocessing: "raw".into(),
            },
            labels,
        )
    }

    fn quick_cfg() -> ProbeConfig {
        ProbeConfig {
            epochs: 20,
            milestones: vec![10, 15],
            batch_size: 16,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn separable_blobs_reach_full_train_accuracy() {
        let (emb, labels) = toy_embeddings(30, 2, 1);
        let classes = vec!["a".to_string(), "b".to_string()];
        let probe = train_linear_probe(&emb, &labels, &classes, &quick_cfg()).unwrap();
        assert_eq!(probe.train_accuracy, 100.0);
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let (emb, _) = toy_embeddings(10, 2, 2);
        let labels = vec![0usize; 20];
        let classes = vec!["a".to_string(), "b".to_string()];
        assert!(train_linear_probe(&emb, &labels, &classes, &quick_cfg()).is_err());
    }

    #[test]
    fn probe_is_deterministic_under_fixed_seed() {
        let (emb, labels) = toy_embeddings(20, 3, 3);
        let classes = vec!["a".to_string(), "b".to_string()];
        let p1 = train_linear_probe(&emb, &labels, &classes, &quick_cfg()).unwrap();
        let p2 = train_linear_probe(&emb, &labels, &classes, &quick_cfg()).unwrap();
        assert_eq!(p1.linear.weight.data, p2.linear.weight.data);
        assert_eq!(p1.linear.bias.data, p2.linear.bias.data);
    }

    #[test]
    fn permuting_rows_with_labels_leaves_accuracy_unchanged() {
        let (emb, labels) = toy_embeddings(25, 3, 4);
        let classes = vec!["a".to_string(), "b".to_string()];
        let base = train_linear_probe(&emb, &labels, &classes, &quick_cfg()).unwrap();
        // Permute rows together with labels (and reseed the shuffle the same
        // way): learned accuracy must match.
        let n = labels.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut rows = Array2::<f32>::zeros((n, emb.dim()));
        let mut plabels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for (dst, &src) in perm.iter().enumerate() {
            rows.row_mut(dst).assign(&emb.rows.row(src));
            plabels.push(labels[src]);
            ids.push(emb.row_ids[src].clone());
        }
        let emb2 = EmbeddingMatrix {
            rows,
            row_ids: ids,
            ..emb.clone()
        };
        let permuted = train_linear_probe(&emb2, &plabels, &classes, &quick_cfg()).unwrap();
        assert!((base.train_accuracy - permuted.train_accuracy).abs() < 1e-9);
    }

    #[test]
    fn predict_tie_breaks_to_lowest_index_and_shift_invariance() {
        let classes = vec!["a".into(), "b".into(), "c".into()];
        let mut rng = derive_rng(5, "probe", &[]);
        let mut linear = Linear::new(&mut rng, 2, 3);
        // Zero weights, equal biases: every score ties -> class 0.
        linear.weight.data.fill(0.0);
        linear.bias.data.fill(1.0);
        let probe = LinearProbe {
            linear,
            standardizer: None,
            classes,
            train_accuracy: 0.0,
        };
        let emb = EmbeddingMatrix {
            rows: Array2::from_shape_vec((2, 2), vec![0.3, -0.2, 1.0, 2.0]).unwrap(),
            row_ids: vec!["x".into(), "y".into()],
            checkpoint_hash: "h".into(),
            preprocessing: "raw".into(),
        };
        assert_eq!(predict(&probe, &emb).unwrap(), vec![0, 0]);

        // Exact tie between classes 2 and 5 -> prediction 2 (argmax order).
        let scores =
            Array2::from_shape_vec((1, 6), vec![0.0, 0.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(argmax_rows(&scores), vec![2]);
        // Adding a constant to all class scores leaves argmax unchanged.
        let shifted = scores.mapv(|v| v + 7.5);
        assert_eq!(argmax_rows(&shifted), vec![2]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (emb, labels) = toy_embeddings(10, 4, 6);
        let classes = vec!["a".to_string(), "b".to_string()];
        let probe = train_linear_probe(&emb, &labels, &classes, &quick_cfg()).unwrap();
        let (bad, _) = toy_embeddings(5, 3, 7);
        assert!(predict(&probe, &bad).is_err());
    }

    #[test]
    fn evaluate_counts_fp_and_tp_consistently() {
        // Constant predictor of the target class on 20 samples, 5 per class.
        let classes: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let mut rng = derive_rng(8, "probe", &[]);
        let mut linear = Linear::new(&mut rng, 2, 4);
        linear.weight.data.fill(0.0);
        linear.bias.data.fill(0.0);
        // Bias class 2 upward: constant prediction.
        linear.bias.data.as_slice_mut().unwrap()[2] = 10.0;
        let probe = LinearProbe {
            linear,
            standardizer: None,
            classes,
            train_accuracy: 0.0,
        };
        let n = 20;
        let rows = Array2::<f32>::zeros((n, 2));
        let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let emb = EmbeddingMatrix {
            rows: rows.clone(),
            row_ids: ids.clone(),
            checkpoint_hash: "h".into(),
            preprocessing: "raw".into(),
        };
        let labels: Vec<usize> = (0..n).map(|i| i / 5).collect();
        let md = EvalMetadata {
            checkpoint_hash: "h".into(),
            clean_manifest_hash: "m1".into(),
            patched_manifest_hash: "m2".into(),
            probe_train_accuracy: 0.0,
            label_fraction: 0.1,
            probe_seed: 0,
        };
        let report = evaluate(&probe, &emb, &emb, &labels, Some("c2"), md).unwrap();
        // Accuracy 25% (class 2 correct), FP(c2) = 15, others 0.
        assert!((report.clean_acc - 25.0).abs() < 1e-9);
        assert_eq!(report.per_class_fp_clean, vec![0, 0, 15, 0]);
        assert_eq!(report.per_class_tp_clean, vec![0, 0, 5, 0]);
        assert_eq!(report.target_fp_patched(), Some(15));
        // FP + TP accounting: predicted-as-c totals.
        for c in 0..4 {
            let predicted_as: u32 = report.per_class_fp_clean[c] + report.per_class_tp_clean[c];
            let expected = if c == 2 { n as u32 } else { 0 };
            assert_eq!(predicted_as, expected);
        }
    }
}
