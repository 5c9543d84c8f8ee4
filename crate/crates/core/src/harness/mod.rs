//! Experiment orchestration: the full attack pipeline with its matched clean
//! baseline, the controlled view-mode analysis, the injection-rate ablation,
//! and report aggregation.
//!
//! Every stage artifact is keyed by a hash of exactly the inputs that can
//! change it; a shared index lets later runs reuse completed stages, so the
//! clean baseline is trained once no matter how many attack configs share it
//! and re-running an identical config recomputes nothing.

mod report;

pub use report::{average_rows, render_rows, QuadrantRow, ReportDocument};

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPolicy, ViewMode};
use crate::data::{LabeledImages, TrainImages};
use crate::defense::{distill, select_clean_subset, DistillConfig};
use crate::ssl::Method;
use crate::error::{Error, Result};
use crate::manifest::{build_manifest, manifest_file_name, DatasetManifest, Split};
use crate::poison::{
    build_patched_valset, materialize, poison_superclass, poison_targeted, poison_untargeted,
    PoisonMode, PoisonRecipe,
};
use crate::probe::{
    evaluate, extract_embeddings, select_labeled_subset, train_linear_probe, EvalMetadata,
    EvalReport, ProbeConfig,
};
use crate::rng::sha256_hex;
use crate::ssl::{load_encoder, train, EncoderCheckpoint, MethodConfig, TrainOptions};
use crate::synth::{generate, SynthSpec};
use crate::trigger::TriggerSpec;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Procedural dataset, materialized on first use.
    Synth { spec: SynthSpec },
    /// Existing `train/<class>/*`, `val/<class>/*` folder (e.g. a CIFAR-10
    /// export or an imagenet-style subset).
    Folder { root: PathBuf, name: String },
}

impl DatasetConfig {
    pub fn name(&self) -> String {
        match self {
            DatasetConfig::Synth { .. } => "synth".into(),
            DatasetConfig::Folder { name, .. } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSettings {
    pub mode: PoisonMode,
    /// Target class name (targeted mode).
    pub target_class: Option<String>,
    /// Target class names (superclass mode).
    #[serde(default)]
    pub target_classes: Vec<String>,
    /// Fraction of the whole training set to poison.
    pub injection_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub poison: u64,
    pub train: u64,
    pub probe: u64,
    pub patch_val: u64,
}

impl Default for StageSeeds {
    fn default() -> Self {
        StageSeeds {
            poison: 5,
            train: 1,
            probe: 11,
            patch_val: 77,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub trigger: TriggerSpec,
    pub poison: PoisonSettings,
    pub method: MethodConfig,
    pub policy: AugmentationPolicy,
    pub probe: ProbeConfig,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    pub view_mode: ViewMode,
    pub seeds: StageSeeds,
}

impl ExperimentConfig {
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable config");
        sha256_hex(&bytes)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let is_toml = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let text = if is_toml {
            toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        self.method.validate()?;
        self.policy.validate()?;
        self.probe.validate()?;
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        match self.poison.mode {
            PoisonMode::Targeted => {
                if self.poison.target_class.is_none() {
                    return Err(Error::Config("targeted poison needs target_class".into()));
                }
            }
            PoisonMode::Superclass => {
                if self.poison.target_classes.is_empty() {
                    return Err(Error::Config(
                        "superclass poison needs target_classes".into(),
                    ));
                }
            }
            PoisonMode::Untargeted => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub path: PathBuf,
    pub wall_secs: f64,
    pub reused: bool,
}

/// Immutable record of a completed run: config hash, stage artifacts, and
/// timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunRecord {
    fn new(config_hash: String) -> Self {
        RunRecord {
            schema_version: 1,
            config_hash,
            tool_version: TOOL_VERSION.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?,
        )
        .map_err(|e| Error::io(path, e))
    }
}

/// Filesystem index of completed stage artifacts under one output root.
struct StageIndex {
    path: PathBuf,
    map: BTreeMap<String, PathBuf>,
}

impl StageIndex {
    fn open(out_root: &Path) -> Result<StageIndex> {
        let path = out_root.join("index.json");
        let map = if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?
        } else {
            BTreeMap::new()
        };
        Ok(StageIndex { path, map })
    }

    fn lookup(&self, key: &str) -> Option<&PathBuf> {
        self.map.get(key)
    }

    fn record(&mut self, key: String, artifact: PathBuf) -> Result<()> {
        self.map.insert(key, artifact);
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(
            &self.path,
            serde_json::to_string_pretty(&self.map).map_err(|e| Error::json(&self.path, e))?,
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Exclusive lock on a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn stage_key(parts: &[&str]) -> String {
    let joined = parts.join("\u{1f}");
    sha256_hex(joined.as_bytes())[7..27].to_string()
}

/// Clean materialized data for a dataset: source tree plus manifests.
pub struct DataStage {
    pub root: PathBuf,
    pub train_manifest: DatasetManifest,
    pub val_manifest: DatasetManifest,
}

/// Materialize (or reuse) the clean dataset under the output root.
pub fn prepare_data(config: &ExperimentConfig, out_root: &Path) -> Result<DataStage> {
    let mut index = StageIndex::open(out_root)?;
    let dataset_json = serde_json::to_string(&config.dataset).unwrap();
    let key = stage_key(&["data", &dataset_json]);
    let dir = out_root.join("store").join(format!("data-{key}"));
    if index.lookup(&key).is_none() || !dir.join(manifest_file_name(Split::Train)).exists() {
        match &config.dataset {
            DatasetConfig::Synth { spec } => {
                let src = dir.join("src");
                generate(spec, &src)?;
                let train_manifest = build_manifest(&src, "synth", Split::Train)?;
                let val_manifest = build_manifest(&src, "synth", Split::Val)?;
                materialize(&train_manifest, &src, &dir)?;
                materialize(&val_manifest, &src, &dir)?;
                std::fs::remove_dir_all(&src).ok();
            }
            DatasetConfig::Folder { root, name } => {
                let train_manifest = build_manifest(root, name, Split::Train)?;
                let val_manifest = build_manifest(root, name, Split::Val)?;
                materialize(&train_manifest, root, &dir)?;
                materialize(&val_manifest, root, &dir)?;
            }
        }
        index.record(key.clone(), dir.clone())?;
    }
    let train_manifest = DatasetManifest::load(&dir.join(manifest_file_name(Split::Train)))?;
    let val_manifest = DatasetManifest::load(&dir.join(manifest_file_name(Split::Val)))?;
    Ok(DataStage {
        root: dir,
        train_manifest,
        val_manifest,
    })
}

/// Poisoned training tree plus patched validation tree for a config.
pub struct PoisonStage {
    pub train_root: PathBuf,
    pub train_manifest: DatasetManifest,
    pub patched_val_root: PathBuf,
    pub patched_val_manifest: DatasetManifest,
    /// Ids poisoned by the targeted/superclass recipe (view-mode analyses
    /// treat these specially).
    pub targeted_ids: Vec<String>,
}

fn build_poisoned_manifest(
    config: &ExperimentConfig,
    data: &DataStage,
) -> Result<(DatasetManifest, Vec<String>)> {
    let m = &data.train_manifest;
    match config.poison.mode {
        PoisonMode::Targeted => {
            let class = m.class_index(config.poison.target_class.as_ref().unwrap())?;
            let recipe = PoisonRecipe::targeted_from_rate(
                m,
                class,
                config.poison.injection_rate,
                config.trigger,
                config.seeds.poison,
            )?;
            let poisoned = poison_targeted(m, &recipe)?;
            let ids = poisoned.poisoned_ids();
            Ok((poisoned, ids))
        }
        PoisonMode::Untargeted => {
            let poisoned = poison_untargeted(
                m,
                config.poison.injection_rate,
                config.trigger,
                config.seeds.poison,
            )?;
            Ok((poisoned, Vec::new()))
        }
        PoisonMode::Superclass => {
            let classes: Vec<usize> = config
                .poison
                .target_classes
                .iter()
                .map(|name| m.class_index(name))
                .collect::<Result<_>>()?;
            let n_classes = classes.len().max(1);
            let total = m.entries.len() as f64;
            let per_class_total: usize = {
                let counts = m.class_counts();
                classes.iter().map(|&c| counts[c]).sum()
            };
            let want = (config.poison.injection_rate * total).round_ties_even();
            let fraction = want / per_class_total as f64;
            let recipe = PoisonRecipe::superclass(
                classes,
                fraction,
                config.poison.injection_rate,
                config.trigger,
                config.seeds.poison,
            );
            let poisoned = poison_superclass(m, &recipe)?;
            let ids = poisoned.poisoned_ids();
            let _ = n_classes;
            Ok((poisoned, ids))
        }
    }
}

/// Materialize (or reuse) the poisoned training tree and the patched valset.
pub fn prepare_poison(
    config: &ExperimentConfig,
    data: &DataStage,
    out_root: &Path,
) -> Result<PoisonStage> {
    let mut index = StageIndex::open(out_root)?;
    let poison_json = serde_json::to_string(&(
        &config.poison,
        &config.trigger,
        config.seeds.poison,
        config.seeds.patch_val,
    ))
    .unwrap();
    let key = stage_key(&[
        "poison",
        &data.train_manifest.content_hash(),
        &data.val_manifest.content_hash(),
        &poison_json,
    ]);
    let dir = out_root.join("store").join(format!("poison-{key}"));
    let train_root = dir.join("train_tree");
    let patched_root = dir.join("patched_val_tree");
    let (poisoned_manifest, targeted_ids) = build_poisoned_manifest(config, data)?;
    if index.lookup(&key).is_none() || !train_root.join(manifest_file_name(Split::Train)).exists()
    {
        materialize(&poisoned_manifest, &data.root, &train_root)?;
        let patched = build_patched_valset(
            &data.val_manifest,
            config.trigger,
            config.seeds.patch_val,
        )?;
        materialize(&patched, &data.root, &patched_root)?;
        std::fs::write(
            dir.join("targeted_ids.json"),
            serde_json::to_string_pretty(&targeted_ids).unwrap(),
        )
        .map_err(|e| Error::io(&dir, e))?;
        index.record(key.clone(), dir.clone())?;
    }
    let train_manifest =
        DatasetManifest::load(&train_root.join(manifest_file_name(Split::Train)))?;
    let patched_val_manifest =
        DatasetManifest::load(&patched_root.join(manifest_file_name(Split::Val)))?;
    let targeted_ids: Vec<String> = serde_json::from_slice(
        &std::fs::read(dir.join("targeted_ids.json")).map_err(|e| Error::io(&dir, e))?,
    )
    .map_err(|e| Error::json(&dir, e))?;
    Ok(PoisonStage {
        train_root,
        train_manifest,
        patched_val_root: patched_root,
        patched_val_manifest,
        targeted_ids,
    })
}

pub struct TrainStage {
    pub checkpoint: EncoderCheckpoint,
    pub dir: PathBuf,
}

/// Train (or reuse) an encoder on the given materialized manifest.
pub fn prepare_train(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    tree_root: &Path,
    view_mode: ViewMode,
    one_view_ids: Option<BTreeSet<String>>,
    out_root: &Path,
) -> Result<TrainStage> {
    let mut index = StageIndex::open(out_root)?;
    let mut method = config.method.clone();
    method.seed = config.seeds.train;
    let opts_json = serde_json::to_string(&(
        &method,
        &config.policy,
        &view_mode,
        &one_view_ids,
    ))
    .unwrap();
    let key = stage_key(&["train", &manifest.content_hash(), &opts_json]);
    let dir = out_root.join("store").join(format!("train-{key}"));
    let ckpt_path = dir.join("checkpoint_final.ssbd");
    if index.lookup(&key).is_none() || !ckpt_path.exists() {
        let images = TrainImages::load(manifest, tree_root)?;
        let opts = TrainOptions {
            view_mode,
            one_view_ids,
            log_crops: false,
        };
        train(&method, &images, &config.policy, &opts, &dir)?;
        index.record(key.clone(), dir.clone())?;
    }
    let encoder = load_encoder(&ckpt_path)?;
    Ok(TrainStage {
        checkpoint: EncoderCheckpoint {
            path: ckpt_path,
            meta: encoder.meta,
            hash: encoder.checkpoint_hash,
        },
        dir,
    })
}

/// Probe + evaluation against clean and patched validation sets.
#[allow(clippy::too_many_arguments)]
pub fn prepare_eval(
    config: &ExperimentConfig,
    checkpoint: &EncoderCheckpoint,
    labeled_source: (&DatasetManifest, &Path),
    clean_val: (&DatasetManifest, &Path),
    patched_val: (&DatasetManifest, &Path),
    target_class: Option<&str>,
    out_root: &Path,
) -> Result<(EvalReport, PathBuf)> {
    let mut index = StageIndex::open(out_root)?;
    let mut probe_cfg = config.probe.clone();
    probe_cfg.seed = config.seeds.probe;
    let key = stage_key(&[
        "eval",
        &checkpoint.hash,
        &serde_json::to_string(&probe_cfg).unwrap(),
        &labeled_source.0.content_hash(),
        &clean_val.0.content_hash(),
        &patched_val.0.content_hash(),
        target_class.unwrap_or(""),
    ]);
    let dir = out_root.join("store").join(format!("eval-{key}"));
    let report_path = dir.join("eval_report.json");
    if index.lookup(&key).is_none() || !report_path.exists() {
        let mut encoder = load_encoder(&checkpoint.path)?;
        if encoder.meta.manifest_hash != labeled_source.0.content_hash()
            && encoder.meta.method != crate::ssl::Method::Distilled
        {
            log::warn!(
                "checkpoint {} was trained on manifest {}, probing with {}",
                checkpoint.path.display(),
                encoder.meta.manifest_hash,
                labeled_source.0.content_hash()
            );
        }
        let labeled_manifest =
            select_labeled_subset(labeled_source.0, probe_cfg.label_fraction, probe_cfg.seed)?;
        let labeled = LabeledImages::load(&labeled_manifest, labeled_source.1)?;
        let emb_train = extract_embeddings(&mut encoder, &labeled)?;
        let probe = train_linear_probe(&emb_train, &labeled.labels, &labeled.classes, &probe_cfg)?;
        probe.save(&dir.join("probe.ssbd"))?;

        let clean_imgs = LabeledImages::load(clean_val.0, clean_val.1)?;
        let patched_imgs = LabeledImages::load(patched_val.0, patched_val.1)?;
        let emb_clean = extract_embeddings(&mut encoder, &clean_imgs)?;
        let emb_patched = extract_embeddings(&mut encoder, &patched_imgs)?;
        let report = evaluate(
            &probe,
            &emb_clean,
            &emb_patched,
            &clean_imgs.labels,
            target_class,
            EvalMetadata {
                checkpoint_hash: checkpoint.hash.clone(),
                clean_manifest_hash: clean_val.0.content_hash(),
                patched_manifest_hash: patched_val.0.content_hash(),
                probe_train_accuracy: probe.train_accuracy,
                label_fraction: probe_cfg.label_fraction,
                probe_seed: probe_cfg.seed,
            },
        )?;
        report.save(&report_path)?;
        index.record(key.clone(), dir.clone())?;
    }
    Ok((EvalReport::load(&report_path)?, report_path))
}

/// Four-quadrant attack outcome: the backdoored and clean models, each on
/// clean and patched validation data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub config_hash: String,
    pub target_class: Option<String>,
    pub backdoored: EvalReport,
    pub clean_baseline: EvalReport,
}

impl AttackOutcome {
    pub fn quadrant_row(&self, label: &str) -> QuadrantRow {
        QuadrantRow {
            label: label.to_string(),
            method: format!("{:?}", self.backdoored.metadata.checkpoint_hash.get(7..13).unwrap_or("")),
            clean_model_clean_acc: self.clean_baseline.clean_acc,
            clean_model_clean_fp: self.clean_baseline.target_fp_clean().unwrap_or(0) as f64,
            clean_model_patched_acc: self.clean_baseline.patched_acc,
            clean_model_patched_fp: self.clean_baseline.target_fp_patched().unwrap_or(0) as f64,
            bd_model_clean_acc: self.backdoored.clean_acc,
            bd_model_clean_fp: self.backdoored.target_fp_clean().unwrap_or(0) as f64,
            bd_model_patched_acc: self.backdoored.patched_acc,
            bd_model_patched_fp: self.backdoored.target_fp_patched().unwrap_or(0) as f64,
        }
    }
}

/// Run poison -> train -> probe -> evaluate, plus the matched clean baseline
/// with the same seeds, and write the run record.
pub fn run_attack_pipeline(config: &ExperimentConfig, out_root: &Path) -> Result<(AttackOutcome, RunRecord)> {
    config.validate()?;
    let config_hash = config.config_hash();
    let run_dir = out_root.join(&config_hash[7..23]);
    let _lock = RunLock::acquire(&run_dir)?;
    let mut record = RunRecord::new(config_hash.clone());
    let timed = |name: &str,
                     record: &mut RunRecord,
                     f: &mut dyn FnMut() -> Result<PathBuf>|
     -> Result<()> {
        let t = Instant::now();
        let path = f()?;
        record.stages.insert(
            name.to_string(),
            StageRecord {
                key: name.to_string(),
                path,
                wall_secs: t.elapsed().as_secs_f64(),
                reused: false,
            },
        );
        Ok(())
    };

    let data = prepare_data(config, out_root)?;
    record.stages.insert(
        "data".into(),
        StageRecord {
            key: "data".into(),
            path: data.root.clone(),
            wall_secs: 0.0,
            reused: true,
        },
    );
    let poison = prepare_poison(config, &data, out_root)?;

    let one_view_ids = match config.view_mode {
        ViewMode::Standard => None,
        ViewMode::OneViewPoisoned => None, // all poisoned entries
        ViewMode::RandomPoisonBothViews => {
            Some(poison.targeted_ids.iter().cloned().collect::<BTreeSet<_>>())
        }
    };

    let mut bd_train = None;
    timed("train_backdoored", &mut record, &mut || {
        let t = prepare_train(
            config,
            &poison.train_manifest,
            &poison.train_root,
            config.view_mode,
            one_view_ids.clone(),
            out_root,
        )?;
        let dir = t.dir.clone();
        bd_train = Some(t);
        Ok(dir)
    })?;
    let bd_train = bd_train.unwrap();

    let mut clean_train_stage = None;
    timed("train_clean", &mut record, &mut || {
        let t = prepare_train(
            config,
            &data.train_manifest,
            &data.root,
            ViewMode::Standard,
            None,
            out_root,
        )?;
        let dir = t.dir.clone();
        clean_train_stage = Some(t);
        Ok(dir)
    })?;
    let clean_train_stage = clean_train_stage.unwrap();

    let target = config.poison.target_class.as_deref();
    // Probes always train on CLEAN labeled data from the clean tree.
    let (bd_report, bd_path) = prepare_eval(
        config,
        &bd_train.checkpoint,
        (&data.train_manifest, &data.root),
        (&data.val_manifest, &data.root),
        (&poison.patched_val_manifest, &poison.patched_val_root),
        target,
        out_root,
    )?;
    let (clean_report, clean_path) = prepare_eval(
        config,
        &clean_train_stage.checkpoint,
        (&data.train_manifest, &data.root),
        (&data.val_manifest, &data.root),
        (&poison.patched_val_manifest, &poison.patched_val_root),
        target,
        out_root,
    )?;
    record.stages.insert(
        "eval_backdoored".into(),
        StageRecord {
            key: "eval_backdoored".into(),
            path: bd_path,
            wall_secs: 0.0,
            reused: false,
        },
    );
    record.stages.insert(
        "eval_clean".into(),
        StageRecord {
            key: "eval_clean".into(),
            path: clean_path,
            wall_secs: 0.0,
            reused: false,
        },
    );

    let outcome = AttackOutcome {
        config_hash: config_hash.clone(),
        target_class: target.map(|s| s.to_string()),
        backdoored: bd_report,
        clean_baseline: clean_report,
    };
    std::fs::create_dir_all(run_dir.join("report")).map_err(|e| Error::io(&run_dir, e))?;
    std::fs::write(
        run_dir.join("report/attack_outcome.json"),
        serde_json::to_string_pretty(&outcome).unwrap(),
    )
    .map_err(|e| Error::io(&run_dir, e))?;
    config.save(&run_dir.join("config.json"))?;
    record.save(&run_dir.join("run.json"))?;
    Ok((outcome, record))
}

/// The three controlled rows: standard both-view poison, one-view poison,
/// and one-view target poison composed with class-agnostic both-view poison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewModeAnalysis {
    pub standard: AttackOutcome,
    pub one_view: AttackOutcome,
    pub one_view_plus_random: AttackOutcome,
}

pub fn run_view_mode_analysis(
    config: &ExperimentConfig,
    out_root: &Path,
) -> Result<ViewModeAnalysis> {
    if config.poison.mode != PoisonMode::Targeted {
        return Err(Error::Config("view-mode analysis needs a targeted config".into()));
    }
    let mut standard_cfg = config.clone();
    standard_cfg.view_mode = ViewMode::Standard;
    let (standard, _) = run_attack_pipeline(&standard_cfg, out_root)?;

    let mut one_view_cfg = config.clone();
    one_view_cfg.view_mode = ViewMode::OneViewPoisoned;
    one_view_cfg.name = format!("{}-one-view", config.name);
    let (one_view, _) = run_attack_pipeline(&one_view_cfg, out_root)?;

    let (composed, _) = run_composed_view_pipeline(config, out_root)?;
    Ok(ViewModeAnalysis {
        standard,
        one_view,
        one_view_plus_random: composed,
    })
}

/// Composed row: targeted poison treated one-view plus an equal-rate
/// untargeted poison treated both-views.
fn run_composed_view_pipeline(
    config: &ExperimentConfig,
    out_root: &Path,
) -> Result<(AttackOutcome, RunRecord)> {
    let mut composed = config.clone();
    composed.name = format!("{}-one-view-plus-random", config.name);
    composed.view_mode = ViewMode::RandomPoisonBothViews;
    let config_hash = composed.config_hash();
    let run_dir = out_root.join(&config_hash[7..23]);
    let _lock = RunLock::acquire(&run_dir)?;
    let record = RunRecord::new(config_hash.clone());

    let data = prepare_data(&composed, out_root)?;
    // Targeted poison first, then class-agnostic poison over the remainder.
    let class = data
        .train_manifest
        .class_index(composed.poison.target_class.as_ref().unwrap())?;
    let recipe = PoisonRecipe::targeted_from_rate(
        &data.train_manifest,
        class,
        composed.poison.injection_rate,
        composed.trigger,
        composed.seeds.poison,
    )?;
    let targeted = poison_targeted(&data.train_manifest, &recipe)?;
    let targeted_ids: BTreeSet<String> = targeted.poisoned_ids().into_iter().collect();
    let both = poison_untargeted(
        &targeted,
        composed.poison.injection_rate,
        composed.trigger,
        composed.seeds.poison.wrapping_add(1),
    )?;

    let key = stage_key(&[
        "poison-composed",
        &both.content_hash(),
        &composed.seeds.patch_val.to_string(),
    ]);
    let dir = out_root.join("store").join(format!("poison-{key}"));
    let train_root = dir.join("train_tree");
    let patched_root = dir.join("patched_val_tree");
    if !train_root.join(manifest_file_name(Split::Train)).exists() {
        materialize(&both, &data.root, &train_root)?;
        let patched =
            build_patched_valset(&data.val_manifest, composed.trigger, composed.seeds.patch_val)?;
        materialize(&patched, &data.root, &patched_root)?;
    }
    let train_manifest = DatasetManifest::load(&train_root.join(manifest_file_name(Split::Train)))?;
    let patched_val_manifest =
        DatasetManifest::load(&patched_root.join(manifest_file_name(Split::Val)))?;

    let bd_train = prepare_train(
        &composed,
        &train_manifest,
        &train_root,
        ViewMode::RandomPoisonBothViews,
        Some(targeted_ids),
        out_root,
    )?;
    let clean_train_stage = prepare_train(
        &composed,
        &data.train_manifest,
        &data.root,
        ViewMode::Standard,
        None,
        out_root,
    )?;
    let target = composed.poison.target_class.as_deref();
    let (bd_report, _) = prepare_eval(
        &composed,
        &bd_train.checkpoint,
        (&data.train_manifest, &data.root),
        (&data.val_manifest, &data.root),
        (&patched_val_manifest, &patched_root),
        target,
        out_root,
    )?;
    let (clean_report, _) = prepare_eval(
        &composed,
        &clean_train_stage.checkpoint,
        (&data.train_manifest, &data.root),
        (&data.val_manifest, &data.root),
        (&patched_val_manifest, &patched_root),
        target,
        out_root,
    )?;
    let outcome = AttackOutcome {
        config_hash: config_hash.clone(),
        target_class: target.map(|s| s.to_string()),
        backdoored: bd_report,
        clean_baseline: clean_report,
    };
    std::fs::create_dir_all(run_dir.join("report")).map_err(|e| Error::io(&run_dir, e))?;
    std::fs::write(
        run_dir.join("report/attack_outcome.json"),
        serde_json::to_string_pretty(&outcome).unwrap(),
    )
    .map_err(|e| Error::io(&run_dir, e))?;
    record.save(&run_dir.join("run.json"))?;
    Ok((outcome, record))
}

/// One point of the injection-rate ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatePoint {
    pub rate: f64,
    pub target_fp_patched: u32,
    pub clean_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateAblation {
    pub points: Vec<RatePoint>,
    /// Clean-baseline reference line.
    pub clean_fp_patched: u32,
    pub clean_acc: f64,
}

/// One pipeline run per rate, sharing every non-poison seed. Rates must be
/// sorted descending.
pub fn run_rate_ablation(
    config: &ExperimentConfig,
    rates: &[f64],
    out_root: &Path,
) -> Result<RateAblation> {
    if rates.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Config("ablation rates must be sorted descending".into()));
    }
    let mut points = Vec::new();
    let mut clean_ref: Option<(u32, f64)> = None;
    for &rate in rates {
        let mut cfg = config.clone();
        cfg.poison.injection_rate = rate;
        cfg.name = format!("{}-rate-{rate}", config.name);
        let (outcome, _) = run_attack_pipeline(&cfg, out_root)?;
        points.push(RatePoint {
            rate,
            target_fp_patched: outcome.backdoored.target_fp_patched().unwrap_or(0),
            clean_acc: outcome.backdoored.clean_acc,
        });
        clean_ref = Some((
            outcome.clean_baseline.target_fp_patched().unwrap_or(0),
            outcome.clean_baseline.clean_acc,
        ));
    }
    let (clean_fp_patched, clean_acc) = clean_ref.unwrap_or((0, 0.0));
    Ok(RateAblation {
        points,
        clean_fp_patched,
        clean_acc,
    })
}


/// Defense run: distill the attacked encoder on a clean fraction, then
/// evaluate teacher and student on the same validation pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub clean_fraction: f64,
    pub teacher: EvalReport,
    pub student: EvalReport,
}

pub fn run_defense(
    config: &ExperimentConfig,
    distill_cfg: &DistillConfig,
    out_root: &Path,
) -> Result<DefenseOutcome> {
    let (attack, _) = run_attack_pipeline(config, out_root)?;
    let data = prepare_data(config, out_root)?;
    let poison = prepare_poison(config, &data, out_root)?;

    // Teacher checkpoint is the backdoored training stage artifact.
    let one_view_ids = match config.view_mode {
        ViewMode::RandomPoisonBothViews => Some(
            poison.targeted_ids.iter().cloned().collect::<BTreeSet<_>>(),
        ),
        _ => None,
    };
    let teacher = prepare_train(
        config,
        &poison.train_manifest,
        &poison.train_root,
        config.view_mode,
        one_view_ids,
        out_root,
    )?;

    let mut index = StageIndex::open(out_root)?;
    let key = stage_key(&[
        "distill",
        &teacher.checkpoint.hash,
        &serde_json::to_string(distill_cfg).unwrap(),
        &data.train_manifest.content_hash(),
    ]);
    let dir = out_root.join("store").join(format!("distill-{key}"));
    let student_path = dir.join("student_final.ssbd");
    let clean_subset = select_clean_subset(
        &data.train_manifest,
        distill_cfg.clean_fraction,
        distill_cfg.seed,
    )?;
    if index.lookup(&key).is_none() || !student_path.exists() {
        let teacher_before = teacher.checkpoint.hash.clone();
        distill(
            &teacher.checkpoint.path,
            &clean_subset,
            &data.root,
            distill_cfg,
            &config.policy,
            &dir,
        )?;
        // Teacher weights must be untouched by the defense.
        let teacher_after = crate::nn::checkpoint::file_hash(&teacher.checkpoint.path)?;
        if teacher_after != teacher_before {
            return Err(Error::Provenance(format!(
                "teacher checkpoint changed during distillation: {teacher_before} -> {teacher_after}"
            )));
        }
        index.record(key.clone(), dir.clone())?;
    }
    let student = load_encoder(&student_path)?;
    debug_assert_eq!(student.meta.method, Method::Distilled);
    let (student_report, _) = prepare_eval(
        config,
        &EncoderCheckpoint {
            path: student_path.clone(),
            meta: student.meta,
            hash: student.checkpoint_hash,
        },
        (&data.train_manifest, &data.root),
        (&data.val_manifest, &data.root),
        (&poison.patched_val_manifest, &poison.patched_val_root),
        config.poison.target_class.as_deref(),
        out_root,
    )?;
    Ok(DefenseOutcome {
        clean_fraction: distill_cfg.clean_fraction,
        teacher: attack.backdoored,
        student: student_report,
    })
}
