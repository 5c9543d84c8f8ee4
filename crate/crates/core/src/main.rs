//! Command-line front end: trigger forging, poisoning, training, probing,
//! evaluation, distillation, and the orchestrated experiment pipelines.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 training
//! divergence, 5 provenance mismatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sslbd::augment::{AugmentationPolicy, ViewMode};
use sslbd::data::{LabeledImages, TrainImages};
use sslbd::defense::DistillConfig;
use sslbd::error::Result;
use sslbd::harness::{
    average_rows, render_rows, run_attack_pipeline, run_defense, run_rate_ablation,
    run_view_mode_analysis, AttackOutcome, DatasetConfig, ExperimentConfig, PoisonSettings,
    QuadrantRow, ReportDocument, StageSeeds,
};
use sslbd::manifest::{build_manifest, DatasetManifest, Split};
use sslbd::poison::{
    build_patched_valset, materialize, poison_superclass, poison_targeted, poison_untargeted,
    PoisonMode, PoisonRecipe,
};
use sslbd::probe::{
    evaluate, export_embeddings, extract_embeddings, select_labeled_subset, train_linear_probe,
    EvalMetadata, ExportSpec, LinearProbe, ProbeConfig,
};
use sslbd::ssl::{load_encoder, train, Method, MethodConfig, TrainOptions};
use sslbd::synth::{generate, SynthSpec};
use sslbd::trigger::{write_trigger_files, TriggerSpec};

#[derive(Parser)]
#[command(
    name = "sslbd",
    version,
    about = "Patch-trigger poisoning lab for self-supervised encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trigger patch and its 4x4 base as PNG files.
    Trigger {
        #[arg(long, default_value_t = 10)]
        id: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        patch_size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural dataset as train/val class folders.
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        val_per_class: usize,
        #[arg(long, default_value_t = 16)]
        image_side: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Poison a class-folder dataset and materialize the poisoned tree.
    Poison {
        #[arg(long, value_parser = parse_mode)]
        mode: PoisonMode,
        #[arg(long)]
        target_class: Option<String>,
        /// Comma-separated class names (superclass mode).
        #[arg(long, value_delimiter = ',')]
        target_classes: Vec<String>,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 10)]
        trigger_id: u32,
        #[arg(long, default_value_t = 42)]
        trigger_seed: u64,
        /// Patch side in pixels; defaults to 22% of the image side.
        #[arg(long)]
        patch_size: Option<u32>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also materialize clean and patched copies of the val split.
        #[arg(long, default_value_t = true)]
        patch_val: bool,
    },
    /// Train an encoder on a materialized manifest.
    Train {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON method config; defaults to the micro preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "standard", value_parser = parse_view_mode)]
        view_mode: ViewMode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear probe over frozen features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        label_fraction: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a probe on clean and patched validation manifests.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        clean_manifest: PathBuf,
        #[arg(long)]
        patched_manifest: PathBuf,
        #[arg(long)]
        target_class: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a (possibly backdoored) encoder on clean data.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        clean_manifest: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        clean_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full attack pipeline with matched clean baseline.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Controlled view-mode comparison (standard / one-view / composed).
    AnalyzeViews {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Injection-rate ablation over descending rates.
    AblateRate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated rates, e.g. 0.01,0.005,0.002,0.0005.
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the distillation defense against an attack config and compare
    /// teacher vs student.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        clean_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export an embedding bundle (CSV + JSON sidecar).
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clean_manifest: PathBuf,
        #[arg(long)]
        patched_manifest: PathBuf,
        /// Comma-separated class names; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 50)]
        per_class_clean: usize,
        #[arg(long, default_value_t = 50)]
        patched_total: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate attack outcome files into a headline table.
    Report {
        /// attack_outcome.json paths.
        #[arg(required = true)]
        outcomes: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print an example experiment config (JSON).
    ExampleConfig,
}

fn parse_mode(s: &str) -> std::result::Result<PoisonMode, String> {
    match s {
        "targeted" => Ok(PoisonMode::Targeted),
        "untargeted" => Ok(PoisonMode::Untargeted),
        "superclass" => Ok(PoisonMode::Superclass),
        _ => Err(format!("unknown mode '{s}'")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "moco_v2" => Ok(Method::MocoV2),
        "byol" => Ok(Method::Byol),
        "msf" => Ok(Method::Msf),
        "rotnet" => Ok(Method::Rotnet),
        "jigsaw" => Ok(Method::Jigsaw),
        _ => Err(format!("unknown method '{s}'")),
    }
}

fn parse_view_mode(s: &str) -> std::result::Result<ViewMode, String> {
    match s {
        "standard" => Ok(ViewMode::Standard),
        "one_view_poisoned" => Ok(ViewMode::OneViewPoisoned),
        "random_poison_both_views" => Ok(ViewMode::RandomPoisonBothViews),
        _ => Err(format!("unknown view mode '{s}'")),
    }
}

fn example_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "micro-targeted".into(),
        dataset: DatasetConfig::Synth {
            spec: SynthSpec::micro(),
        },
        trigger: TriggerSpec::new(10, 42, 5),
        poison: PoisonSettings {
            mode: PoisonMode::Targeted,
            target_class: Some("class_03".into()),
            target_classes: vec![],
            injection_rate: 0.01,
        },
        method: MethodConfig::micro(Method::MocoV2),
        policy: AugmentationPolicy::contrastive_micro(16),
        probe: ProbeConfig::default(),
        distill: Some(DistillConfig::micro()),
        view_mode: ViewMode::Standard,
        seeds: StageSeeds::default(),
    }
}

fn outcome_row(outcome: &AttackOutcome, label: &str, method: &str) -> QuadrantRow {
    QuadrantRow {
        label: label.to_string(),
        method: method.to_string(),
        clean_model_clean_acc: outcome.clean_baseline.clean_acc,
        clean_model_clean_fp: outcome.clean_baseline.target_fp_clean().unwrap_or(0) as f64,
        clean_model_patched_acc: outcome.clean_baseline.patched_acc,
        clean_model_patched_fp: outcome.clean_baseline.target_fp_patched().unwrap_or(0) as f64,
        bd_model_clean_acc: outcome.backdoored.clean_acc,
        bd_model_clean_fp: outcome.backdoored.target_fp_clean().unwrap_or(0) as f64,
        bd_model_patched_acc: outcome.backdoored.patched_acc,
        bd_model_patched_fp: outcome.backdoored.target_fp_patched().unwrap_or(0) as f64,
    }
}

fn manifest_root(path: &PathBuf) -> PathBuf {
    path.parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Trigger {
            id,
            seed,
            patch_size,
            out,
        } => {
            let path = write_trigger_files(&TriggerSpec::new(id, seed, patch_size), &out)?;
            println!("wrote {}", path.display());
        }
        Command::GenData {
            classes,
            train_per_class,
            val_per_class,
            image_side,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                classes,
                train_per_class,
                val_per_class,
                image_side,
                seed,
            };
            generate(&spec, &out)?;
            println!(
                "wrote {} train and {} val images under {}",
                classes * train_per_class,
                classes * val_per_class,
                out.display()
            );
        }
        Command::Poison {
            mode,
            target_class,
            target_classes,
            rate,
            trigger_id,
            trigger_seed,
            patch_size,
            seed,
            input,
            out,
            patch_val,
        } => {
            let train_manifest = build_manifest(&input, "dataset", Split::Train)?;
            let side = train_manifest
                .entries
                .first()
                .map(|e| e.width.min(e.height))
                .unwrap_or(16);
            let patch = patch_size.unwrap_or_else(|| sslbd::trigger::default_patch_size(side));
            let trigger = TriggerSpec::new(trigger_id, trigger_seed, patch);
            let poisoned = match mode {
                PoisonMode::Targeted => {
                    let class_name = target_class
                        .ok_or_else(|| sslbd::Error::Config("--target-class required".into()))?;
                    let class = train_manifest.class_index(&class_name)?;
                    let recipe = PoisonRecipe::targeted_from_rate(
                        &train_manifest,
                        class,
                        rate,
                        trigger,
                        seed,
                    )?;
                    poison_targeted(&train_manifest, &recipe)?
                }
                PoisonMode::Untargeted => poison_untargeted(&train_manifest, rate, trigger, seed)?,
                PoisonMode::Superclass => {
                    let classes: Vec<usize> = target_classes
                        .iter()
                        .map(|n| train_manifest.class_index(n))
                        .collect::<Result<_>>()?;
                    let counts = train_manifest.class_counts();
                    let in_targets: usize = classes.iter().map(|&c| counts[c]).sum();
                    let want = (rate * train_manifest.entries.len() as f64).round_ties_even();
                    let recipe = PoisonRecipe::superclass(
                        classes,
                        want / in_targets as f64,
                        rate,
                        trigger,
                        seed,
                    );
                    poison_superclass(&train_manifest, &recipe)?
                }
            };
            let frozen = materialize(&poisoned, &input, &out)?;
            println!(
                "poisoned {} of {} training images -> {}",
                frozen.poisoned_count(),
                frozen.entries.len(),
                out.display()
            );
            if patch_val {
                let val_manifest = build_manifest(&input, "dataset", Split::Val)?;
                let patched = build_patched_valset(&val_manifest, trigger, seed)?;
                let patched_out = out.join("patched_val");
                materialize(&patched, &input, &patched_out)?;
                materialize(&val_manifest, &input, &out.join("clean_val"))?;
                println!("patched validation tree -> {}", patched_out.display());
            }
        }
        Command::Train {
            method,
            manifest,
            config,
            view_mode,
            seed,
            epochs,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let tree_root = manifest_root(&manifest);
            let mut cfg = match config {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| sslbd::Error::io(&path, e))?;
                    serde_json::from_str::<MethodConfig>(&text)
                        .map_err(|e| sslbd::Error::json(&path, e))?
                }
                None => MethodConfig::micro(method),
            };
            cfg.method = method;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let side = m
                .entries
                .first()
                .map(|e| e.width.min(e.height))
                .unwrap_or(16) as usize;
            let policy = if cfg.method.is_exemplar() {
                AugmentationPolicy::contrastive_micro(side)
            } else {
                AugmentationPolicy::pretext_default(side)
            };
            let images = TrainImages::load(&m, &tree_root)?;
            let opts = TrainOptions {
                view_mode,
                one_view_ids: None,
                log_crops: false,
            };
            let ckpt = train(&cfg, &images, &policy, &opts, &out)?;
            println!("checkpoint {}", ckpt.path.display());
        }
        Command::Probe {
            checkpoint,
            manifest,
            label_fraction,
            seed,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let tree_root = manifest_root(&manifest);
            let mut encoder = load_encoder(&checkpoint)?;
            let cfg = ProbeConfig {
                label_fraction,
                seed,
                ..ProbeConfig::default()
            };
            let labeled_manifest = select_labeled_subset(&m, label_fraction, seed)?;
            let labeled = LabeledImages::load(&labeled_manifest, &tree_root)?;
            let emb = extract_embeddings(&mut encoder, &labeled)?;
            let probe = train_linear_probe(&emb, &labeled.labels, &labeled.classes, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| sslbd::Error::io(&out, e))?;
            probe.save(&out.join("probe.ssbd"))?;
            println!(
                "probe train accuracy {:.2}% -> {}",
                probe.train_accuracy,
                out.join("probe.ssbd").display()
            );
        }
        Command::Eval {
            checkpoint,
            probe,
            clean_manifest,
            patched_manifest,
            target_class,
            out,
        } => {
            let clean_m = DatasetManifest::load(&clean_manifest)?;
            let patched_m = DatasetManifest::load(&patched_manifest)?;
            let mut encoder = load_encoder(&checkpoint)?;
            let probe = LinearProbe::load(&probe)?;
            let clean_imgs = LabeledImages::load(&clean_m, &manifest_root(&clean_manifest))?;
            let patched_imgs = LabeledImages::load(&patched_m, &manifest_root(&patched_manifest))?;
            let emb_clean = extract_embeddings(&mut encoder, &clean_imgs)?;
            let emb_patched = extract_embeddings(&mut encoder, &patched_imgs)?;
            let report = evaluate(
                &probe,
                &emb_clean,
                &emb_patched,
                &clean_imgs.labels,
                target_class.as_deref(),
                EvalMetadata {
                    checkpoint_hash: encoder.checkpoint_hash.clone(),
                    clean_manifest_hash: clean_m.content_hash(),
                    patched_manifest_hash: patched_m.content_hash(),
                    probe_train_accuracy: probe.train_accuracy,
                    label_fraction: 0.0,
                    probe_seed: 0,
                },
            )?;
            report.save(&out)?;
            print!("{}", report.render_table());
            println!("report -> {}", out.display());
        }
        Command::Distill {
            teacher,
            clean_manifest,
            clean_fraction,
            out,
        } => {
            let m = DatasetManifest::load(&clean_manifest)?;
            let tree_root = manifest_root(&clean_manifest);
            let teacher_enc = load_encoder(&teacher)?;
            let mut cfg = DistillConfig {
                clean_fraction,
                student_backbone: teacher_enc.meta.config.backbone.clone(),
                proj_hidden: teacher_enc.meta.config.proj_hidden,
                ..DistillConfig::micro()
            };
            let subset = sslbd::defense::select_clean_subset(&m, clean_fraction, cfg.seed)?;
            cfg.anchor_count = cfg.anchor_count.min(subset.entries.len()).max(16);
            let ckpt = sslbd::defense::distill(
                &teacher,
                &subset,
                &tree_root,
                &cfg,
                &teacher_enc.meta.policy,
                &out,
            )?;
            println!("student checkpoint {}", ckpt.path.display());
        }
        Command::Attack { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (outcome, record) = run_attack_pipeline(&cfg, &out)?;
            let row = outcome_row(
                &outcome,
                cfg.poison.target_class.as_deref().unwrap_or("-"),
                cfg.method.method.name(),
            );
            let rows = vec![row];
            print!("{}", render_rows(&rows, average_rows(&rows).as_ref()));
            println!(
                "run {} complete; artifacts under {}",
                record.config_hash,
                out.display()
            );
        }
        Command::AnalyzeViews { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let analysis = run_view_mode_analysis(&cfg, &out)?;
            let method = cfg.method.method.name();
            let rows = vec![
                outcome_row(&analysis.standard, "target poison", method),
                outcome_row(&analysis.one_view, "target poison (1 view)", method),
                outcome_row(&analysis.one_view_plus_random, "1 view + random both", method),
            ];
            print!("{}", render_rows(&rows, None));
            let path = out.join("view_mode_analysis.json");
            std::fs::write(&path, serde_json::to_string_pretty(&analysis).unwrap())
                .map_err(|e| sslbd::Error::io(&path, e))?;
            println!("analysis -> {}", path.display());
        }
        Command::AblateRate { config, rates, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut rates = rates;
            if rates.is_empty() {
                rates = vec![0.01, 0.005, 0.002, 0.0005];
            }
            let ablation = run_rate_ablation(&cfg, &rates, &out)?;
            println!("{:>8}  {:>10}  {:>9}", "rate", "target FP", "clean acc");
            for p in &ablation.points {
                println!(
                    "{:>8.4}  {:>10}  {:>8.2}%",
                    p.rate, p.target_fp_patched, p.clean_acc
                );
            }
            println!(
                "clean baseline: FP {} acc {:.2}%",
                ablation.clean_fp_patched, ablation.clean_acc
            );
            let path = out.join("rate_ablation.json");
            std::fs::write(&path, serde_json::to_string_pretty(&ablation).unwrap())
                .map_err(|e| sslbd::Error::io(&path, e))?;
            println!("ablation -> {}", path.display());
        }
        Command::Defend {
            config,
            clean_fraction,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut distill_cfg = cfg.distill.clone().unwrap_or_else(DistillConfig::micro);
            distill_cfg.clean_fraction = clean_fraction;
            let outcome = run_defense(&cfg, &distill_cfg, &out)?;
            println!(
                "teacher: clean acc {:.2}%, target FP patched {}",
                outcome.teacher.clean_acc,
                outcome.teacher.target_fp_patched().unwrap_or(0)
            );
            println!(
                "student ({}% clean): clean acc {:.2}%, target FP patched {}",
                100.0 * outcome.clean_fraction,
                outcome.student.clean_acc,
                outcome.student.target_fp_patched().unwrap_or(0)
            );
            let path = out.join("defense_outcome.json");
            std::fs::write(&path, serde_json::to_string_pretty(&outcome).unwrap())
                .map_err(|e| sslbd::Error::io(&path, e))?;
            println!("outcome -> {}", path.display());
        }
        Command::ExportEmbeddings {
            checkpoint,
            clean_manifest,
            patched_manifest,
            classes,
            per_class_clean,
            patched_total,
            seed,
            out,
        } => {
            let clean_m = DatasetManifest::load(&clean_manifest)?;
            let patched_m = DatasetManifest::load(&patched_manifest)?;
            let mut encoder = load_encoder(&checkpoint)?;
            let clean_imgs = LabeledImages::load(&clean_m, &manifest_root(&clean_manifest))?;
            let patched_imgs = LabeledImages::load(&patched_m, &manifest_root(&patched_manifest))?;
            let emb_clean = extract_embeddings(&mut encoder, &clean_imgs)?;
            let emb_patched = extract_embeddings(&mut encoder, &patched_imgs)?;
            let spec = ExportSpec {
                classes: if classes.is_empty() {
                    clean_m.classes.clone()
                } else {
                    classes
                },
                per_class_clean,
                patched_total,
                seed,
            };
            let rows = export_embeddings(&emb_clean, &emb_patched, &clean_m, &spec, &out)?;
            println!("exported {rows} rows -> {}", out.display());
        }
        Command::Report { outcomes, out } => {
            let mut rows = Vec::new();
            let mut dataset: Option<String> = None;
            for path in &outcomes {
                let bytes = std::fs::read(path).map_err(|e| sslbd::Error::io(path, e))?;
                let outcome: AttackOutcome =
                    serde_json::from_slice(&bytes).map_err(|e| sslbd::Error::json(path, e))?;
                let ds = outcome.backdoored.metadata.clean_manifest_hash.clone();
                match &dataset {
                    None => dataset = Some(ds),
                    Some(existing) if *existing != ds => {
                        return Err(sslbd::Error::Config(
                            "refusing to aggregate outcomes from different datasets".into(),
                        ))
                    }
                    _ => {}
                }
                let label = outcome.target_class.clone().unwrap_or_else(|| "-".into());
                rows.push(outcome_row(&outcome, &label, "-"));
            }
            let doc = ReportDocument::new(dataset.as_deref().unwrap_or("unknown"), rows);
            print!("{}", render_rows(&doc.rows, doc.average.as_ref()));
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())
                    .map_err(|e| sslbd::Error::io(&path, e))?;
                println!("report -> {}", path.display());
            }
        }
        Command::ExampleConfig => {
            println!("{}", serde_json::to_string_pretty(&example_config()).unwrap());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
