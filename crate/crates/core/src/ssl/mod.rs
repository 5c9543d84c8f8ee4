//! Self-supervised trainers: the contrastive (queue), bootstrap (EMA
//! target), mean-shift (neighbor bank), rotation, and tile-ordering methods,
//! all over the same backbone stack and label-free data path.

pub mod bank;
pub mod encoder;
pub mod losses;
pub mod perms;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment_pair, augment_view, to_f32, write_normalized_chw, AugmentationPolicy, ViewMode,
};
use crate::data::TrainImages;
use crate::error::{Error, Result};
use crate::imgproc::ImageF32;
use crate::nn::backbone::{Backbone, BackboneConfig, FeatureTap};
use crate::nn::checkpoint::{file_hash, TensorArchive};
use crate::nn::layers::{BnMode, MlpHead};
use crate::nn::optim::{Optimizer, OptimizerConfig, Schedule, ScheduleConfig};
use crate::nn::{normalize_rows, normalize_rows_backward};
use crate::rng::{derive_rng, derive_rng_for_sample};
use bank::EmbeddingBank;
use encoder::{copy_weights, ema_update, EncoderNet, JigsawNet, RotnetNet};
use losses::{cross_entropy_grad, info_nce_batch_grad};
use perms::{generate_permutation_set, PermutationSet};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MocoV2,
    Byol,
    Msf,
    Rotnet,
    Jigsaw,
    /// Student encoder produced by the distillation defense; not trainable
    /// by `train`.
    Distilled,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::MocoV2 => "moco_v2",
            Method::Byol => "byol",
            Method::Msf => "msf",
            Method::Rotnet => "rotnet",
            Method::Jigsaw => "jigsaw",
            Method::Distilled => "distilled",
        }
    }

    /// Feature tap for frozen evaluation: tile-ordering reads the
    /// penultimate stage, everything else the final stage.
    pub fn feature_tap(&self) -> FeatureTap {
        match self {
            Method::Jigsaw => FeatureTap::PenultimateStage,
            _ => FeatureTap::FinalStage,
        }
    }

    pub fn is_exemplar(&self) -> bool {
        matches!(self, Method::MocoV2 | Method::Byol | Method::Msf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub backbone: BackboneConfig,
    /// Projection output width (exemplar methods).
    pub embedding_dim: usize,
    pub proj_hidden: usize,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Negative queue length (contrastive method).
    pub queue_size: usize,
    /// EMA momentum of the target/key encoder.
    pub ema_momentum: f64,
    /// Neighbors per sample (mean-shift method).
    pub nn_count: usize,
    pub memory_bank_size: usize,
    /// Permutation classes (tile-ordering method).
    pub permutation_set_size: usize,
    pub tile_embed_dim: usize,
    /// Ghost normalization groups for no-gradient key/target forwards.
    pub bn_ghost_splits: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl MethodConfig {
    /// Desk-scale defaults (32px inputs, ResNet-18-class backbone).
    pub fn desk_default(method: Method) -> Self {
        let common = MethodConfig {
            method,
            backbone: BackboneConfig::resnet18_cifar(),
            embedding_dim: 128,
            proj_hidden: 512,
            temperature: 0.2,
            queue_size: 4096,
            ema_momentum: 0.999,
            nn_count: 10,
            memory_bank_size: 16384,
            permutation_set_size: 100,
            tile_embed_dim: 128,
            bn_ghost_splits: 4,
            optimizer: OptimizerConfig::sgd(0.06, 1e-4, 0.9),
            schedule: ScheduleConfig::Cosine,
            epochs: 200,
            batch_size: 256,
            seed: 0,
        };
        match method {
            Method::MocoV2 => common,
            Method::Byol => MethodConfig {
                ema_momentum: 0.99,
                optimizer: OptimizerConfig::adam(2e-3, 1e-6),
                schedule: ScheduleConfig::Step {
                    milestones: vec![150, 175],
                    gamma: 0.2,
                },
                ..common
            },
            Method::Msf => MethodConfig {
                ema_momentum: 0.99,
                proj_hidden: 1024,
                optimizer: OptimizerConfig::sgd(0.05, 1e-4, 0.9),
                ..common
            },
            Method::Rotnet => MethodConfig {
                optimizer: OptimizerConfig::sgd(0.05, 1e-4, 0.9),
                schedule: ScheduleConfig::Step {
                    milestones: vec![30, 60, 90, 100],
                    gamma: 0.1,
                },
                epochs: 105,
                ..common
            },
            Method::Jigsaw => MethodConfig {
                optimizer: OptimizerConfig::sgd(0.01, 1e-4, 0.9),
                schedule: ScheduleConfig::Step {
                    milestones: vec![30, 60, 90, 100],
                    gamma: 0.1,
                },
                epochs: 105,
                ..common
            },
            Method::Distilled => MethodConfig { epochs: 0, ..common },
        }
    }

    /// Smoke-scale defaults (16px inputs, compact backbone) for fast runs.
    pub fn micro(method: Method) -> Self {
        let desk = Self::desk_default(method);
        let common = MethodConfig {
            backbone: BackboneConfig::micro(),
            embedding_dim: 32,
            proj_hidden: 128,
            queue_size: 1024,
            ema_momentum: 0.97,
            nn_count: 4,
            memory_bank_size: 1024,
            permutation_set_size: 48,
            tile_embed_dim: 32,
            epochs: 15,
            batch_size: 128,
            ..desk
        };
        match method {
            Method::MocoV2 => MethodConfig {
                optimizer: OptimizerConfig::sgd(0.03, 1e-4, 0.9),
                epochs: 20,
                ..common
            },
            Method::Byol => MethodConfig {
                epochs: 12,
                schedule: ScheduleConfig::Step {
                    milestones: vec![9, 11],
                    gamma: 0.2,
                },
                ..common
            },
            Method::Msf => MethodConfig {
                optimizer: OptimizerConfig::sgd(0.1, 1e-4, 0.9),
                ..common
            },
            Method::Rotnet => MethodConfig {
                epochs: 10,
                schedule: ScheduleConfig::Step {
                    milestones: vec![6, 8],
                    gamma: 0.1,
                },
                ..common
            },
            Method::Jigsaw => MethodConfig {
                epochs: 10,
                schedule: ScheduleConfig::Step {
                    milestones: vec![6, 8],
                    gamma: 0.1,
                },
                ..common
            },
            Method::Distilled => MethodConfig { epochs: 0, ..common },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum {} must lie in [0, 1)",
                self.ema_momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        match self.method {
            Method::MocoV2 => {
                if self.queue_size % self.batch_size != 0 {
                    return Err(Error::Config(format!(
                        "queue size {} must be a multiple of batch size {}",
                        self.queue_size, self.batch_size
                    )));
                }
            }
            Method::Msf => {
                if self.nn_count > self.memory_bank_size {
                    return Err(Error::Config(format!(
                        "nn_count {} exceeds memory bank size {}",
                        self.nn_count, self.memory_bank_size
                    )));
                }
                if self.memory_bank_size % self.batch_size != 0 {
                    return Err(Error::Config(format!(
                        "memory bank size {} must be a multiple of batch size {}",
                        self.memory_bank_size, self.batch_size
                    )));
                }
            }
            Method::Jigsaw => {
                if self.permutation_set_size == 0 {
                    return Err(Error::Config("permutation set must be non-empty".into()));
                }
            }
            _ => {}
        }
        if self.bn_ghost_splits == 0 || self.batch_size % self.bn_ghost_splits != 0 {
            return Err(Error::Config(format!(
                "bn_ghost_splits {} must divide batch size {}",
                self.bn_ghost_splits, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub view_mode: ViewMode,
    /// Entries given the one-view treatment. `None` means "all poisoned
    /// entries" in one-view mode and "none" in the composed mode.
    pub one_view_ids: Option<BTreeSet<String>>,
    /// Log crop boxes per step into `crops.jsonl` next to the loss log.
    pub log_crops: bool,
}

impl Default for ViewMode {
    fn default() -> Self {
        ViewMode::Standard
    }
}

enum MethodState {
    Moco {
        online: EncoderNet,
        target: EncoderNet,
        queue: EmbeddingBank,
    },
    Byol {
        online: EncoderNet,
        predictor: MlpHead,
        target: EncoderNet,
    },
    Msf {
        online: EncoderNet,
        predictor: MlpHead,
        target: EncoderNet,
        bank: EmbeddingBank,
    },
    Rotnet {
        net: RotnetNet,
    },
    Jigsaw {
        net: JigsawNet,
        perms: PermutationSet,
    },
    /// Bare encoder without trainer state (distilled students).
    Plain { online: EncoderNet },
}

impl MethodState {
    fn init(cfg: &MethodConfig) -> MethodState {
        let mut rng = derive_rng(cfg.seed, "init", &[cfg.method.name().as_bytes()]);
        match cfg.method {
            Method::MocoV2 => {
                // Contrastive projection head carries no norm layer.
                let mut online =
                    EncoderNet::new(&mut rng, &cfg.backbone, cfg.proj_hidden, cfg.embedding_dim, false);
                let mut target = online.clone();
                copy_weights(&mut target, &mut online);
                let queue = EmbeddingBank::new_random(&mut rng, cfg.queue_size, cfg.embedding_dim);
                MethodState::Moco {
                    online,
                    target,
                    queue,
                }
            }
            Method::Byol => {
                let mut online =
                    EncoderNet::new(&mut rng, &cfg.backbone, cfg.proj_hidden, cfg.embedding_dim, true);
                let predictor = MlpHead::new(
                    &mut rng,
                    cfg.embedding_dim,
                    cfg.proj_hidden,
                    cfg.embedding_dim,
                    true,
                );
                let mut target = online.clone();
                copy_weights(&mut target, &mut online);
                MethodState::Byol {
                    online,
                    predictor,
                    target,
                }
            }
            Method::Msf => {
                let mut online =
                    EncoderNet::new(&mut rng, &cfg.backbone, cfg.proj_hidden, cfg.embedding_dim, true);
                let predictor = MlpHead::new(
                    &mut rng,
                    cfg.embedding_dim,
                    cfg.proj_hidden,
                    cfg.embedding_dim,
                    true,
                );
                let mut target = online.clone();
                copy_weights(&mut target, &mut online);
                let bank =
                    EmbeddingBank::new_random(&mut rng, cfg.memory_bank_size, cfg.embedding_dim);
                MethodState::Msf {
                    online,
                    predictor,
                    target,
                    bank,
                }
            }
            Method::Rotnet => MethodState::Rotnet {
                net: RotnetNet::new(&mut rng, &cfg.backbone, 4),
            },
            Method::Jigsaw => {
                let mut perm_rng = derive_rng(cfg.seed, "perm-set", &[]);
                let perms = generate_permutation_set(cfg.permutation_set_size, &mut perm_rng);
                MethodState::Jigsaw {
                    net: JigsawNet::new(
                        &mut rng,
                        &cfg.backbone,
                        cfg.tile_embed_dim,
                        cfg.permutation_set_size,
                    ),
                    perms,
                }
            }
            Method::Distilled => MethodState::Plain {
                online: EncoderNet::new(
                    &mut rng,
                    &cfg.backbone,
                    cfg.proj_hidden,
                    cfg.embedding_dim,
                    false,
                ),
            },
        }
    }

    fn visit_online_state(&mut self, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        match self {
            MethodState::Moco { online, .. } => online.visit_state("online", f),
            MethodState::Byol {
                online, predictor, ..
            }
            | MethodState::Msf {
                online, predictor, ..
            } => {
                online.visit_state("online", f);
                predictor.visit_state("predictor", f);
            }
            MethodState::Rotnet { net } => net.visit_state("net", f),
            MethodState::Jigsaw { net, .. } => net.visit_state("net", f),
            MethodState::Plain { online } => online.visit_state("online", f),
        }
    }

    /// Largest deviation from unit norm across queue/bank rows, if any.
    pub fn bank_norm_error(&self) -> Option<f32> {
        match self {
            MethodState::Moco { queue, .. } => Some(queue.max_norm_error()),
            MethodState::Msf { bank, .. } => Some(bank.max_norm_error()),
            _ => None,
        }
    }
}

/// Training batch views. Exemplar methods use both tensors; pretext methods
/// use only the first plus per-sample auxiliary labels.
struct BatchViews {
    x1: Array4<f32>,
    x2: Option<Array4<f32>>,
    aux_labels: Vec<usize>,
}

fn ghost_mode(cfg: &MethodConfig) -> BnMode {
    BnMode::Train {
        ghost_splits: cfg.bn_ghost_splits,
        update_running: false,
    }
}

const TRAIN_MODE: BnMode = BnMode::Train {
    ghost_splits: 1,
    update_running: true,
};

/// Forward the no-gradient target encoder over a shuffled batch so ghost
/// normalization groups mix samples; rows are restored to input order.
fn target_forward_shuffled(
    target: &mut EncoderNet,
    x: &Array4<f32>,
    cfg: &MethodConfig,
    step: u64,
) -> Array2<f32> {
    let n = x.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(cfg.seed, "key-shuffle", &[&step.to_le_bytes()]);
    perm.shuffle(&mut rng);
    let s = x.shape();
    let mut xs = Array4::<f32>::zeros((s[0], s[1], s[2], s[3]));
    for (dst, &src) in perm.iter().enumerate() {
        xs.index_axis_mut(ndarray::Axis(0), dst)
            .assign(&x.index_axis(ndarray::Axis(0), src));
    }
    let (out_shuffled, _) = target.forward(&xs, ghost_mode(cfg));
    let mut out = Array2::<f32>::zeros((n, out_shuffled.ncols()));
    for (shuffled_row, &orig) in perm.iter().enumerate() {
        out.row_mut(orig).assign(&out_shuffled.row(shuffled_row));
    }
    out
}

/// Batched bootstrap loss/grad: per row `2 - 2 cos(p, t)`; returns the mean
/// loss and dL/dp_raw scaled by `scale / n`.
fn byol_batch_grad(p_raw: &Array2<f32>, t_unit: &Array2<f32>, scale: f32) -> (f64, Array2<f32>) {
    let n = p_raw.nrows();
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros(p_raw.raw_dim());
    for i in 0..n {
        let p = p_raw.row(i);
        let t = t_unit.row(i);
        let pn: f32 = p.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        let cos: f32 = p.iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f32>() / pn;
        loss += (2.0 - 2.0 * cos) as f64;
        let coeff = scale / n as f32;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let phat = p[j] / pn;
            *g = -2.0 * (t[j] - cos * phat) / pn * coeff;
        }
    }
    (loss / n as f64, grad)
}

fn train_step(
    state: &mut MethodState,
    views: &BatchViews,
    cfg: &MethodConfig,
    opt: &mut Optimizer,
    lr: f32,
    step: u64,
) -> Result<f64> {
    let loss = match state {
        MethodState::Moco {
            online,
            target,
            queue,
        } => {
            online.zero_grads();
            let (q_raw, cache) = online.forward(&views.x1, TRAIN_MODE);
            let mut q = q_raw.clone();
            let norms = normalize_rows(&mut q);
            let x2 = views.x2.as_ref().expect("pair views");
            let mut k = target_forward_shuffled(target, x2, cfg, step);
            normalize_rows(&mut k);
            let (loss, g_qhat) = info_nce_batch_grad(&q, &k, queue.rows(), cfg.temperature);
            let g_raw = normalize_rows_backward(&g_qhat.view(), &q.view(), &norms);
            online.backward(&cache, &g_raw);
            {
                let mut params = Vec::new();
                online.collect_params(&mut params);
                opt.step(&mut params, lr);
            }
            ema_update(target, online, cfg.ema_momentum as f32);
            queue.enqueue(&k)?;
            loss
        }
        MethodState::Byol {
            online,
            predictor,
            target,
        } => {
            online.zero_grads();
            {
                let mut params = Vec::new();
                predictor.collect_params(&mut params);
                for p in params {
                    p.zero_grad();
                }
            }
            let x1 = &views.x1;
            let x2 = views.x2.as_ref().expect("pair views");
            let mut total = 0.0f64;
            // Symmetrized: average of the (v1, v2) and (v2, v1) terms.
            for (a, b) in [(x1, x2), (x2, x1)] {
                let (h_raw, ecache) = online.forward(a, TRAIN_MODE);
                let (p_raw, pcache) = predictor.forward(&h_raw, TRAIN_MODE);
                let mut t = target_forward_shuffled(target, b, cfg, step);
                normalize_rows(&mut t);
                let (loss, gp) = byol_batch_grad(&p_raw, &t, 0.5);
                total += 0.5 * loss;
                let gh = predictor.backward(&pcache, &gp);
                online.backward(&ecache, &gh);
            }
            {
                let mut params = Vec::new();
                online.collect_params(&mut params);
                predictor.collect_params(&mut params);
                opt.step(&mut params, lr);
            }
            ema_update(target, online, cfg.ema_momentum as f32);
            total
        }
        MethodState::Msf {
            online,
            predictor,
            target,
            bank,
        } => {
            online.zero_grads();
            {
                let mut params = Vec::new();
                predictor.collect_params(&mut params);
                for p in params {
                    p.zero_grad();
                }
            }
            let x2 = views.x2.as_ref().expect("pair views");
            let (h_raw, ecache) = online.forward(&views.x1, TRAIN_MODE);
            let (q_raw, pcache) = predictor.forward(&h_raw, TRAIN_MODE);
            let mut u = target_forward_shuffled(target, x2, cfg, step);
            normalize_rows(&mut u);
            let n = q_raw.nrows();
            let k = cfg.nn_count;
            let mut loss_sum = 0.0f64;
            let mut g_raw = Array2::<f32>::zeros(q_raw.raw_dim());
            for i in 0..n {
                let q_row: Vec<f64> = q_raw.row(i).iter().map(|&v| v as f64).collect();
                // u itself is always a neighbor; the rest come from the bank.
                let mut neighbors: Vec<Vec<f64>> =
                    vec![u.row(i).iter().map(|&v| v as f64).collect()];
                if k > 1 {
                    let idx = bank.top_k(u.row(i).as_slice().unwrap(), k - 1)?;
                    for j in idx {
                        neighbors.push(bank.row(j).iter().map(|&v| v as f64).collect());
                    }
                }
                loss_sum += losses::msf_loss(&q_row, &neighbors);
                let g = losses::msf_grad(&q_row, &neighbors);
                for (dst, src) in g_raw.row_mut(i).iter_mut().zip(g.iter()) {
                    *dst = (*src as f32) / n as f32;
                }
            }
            let gh = predictor.backward(&pcache, &g_raw);
            online.backward(&ecache, &gh);
            {
                let mut params = Vec::new();
                online.collect_params(&mut params);
                predictor.collect_params(&mut params);
                opt.step(&mut params, lr);
            }
            ema_update(target, online, cfg.ema_momentum as f32);
            bank.enqueue(&u)?;
            loss_sum / n as f64
        }
        MethodState::Rotnet { net } => {
            net.zero_grads();
            let (logits, cache) = net.forward(&views.x1, TRAIN_MODE);
            let (loss, grad) = cross_entropy_grad(&logits, &views.aux_labels);
            net.backward(&cache, &grad);
            let mut params = Vec::new();
            net.collect_params(&mut params);
            opt.step(&mut params, lr);
            loss
        }
        MethodState::Jigsaw { net, .. } => {
            net.zero_grads();
            let (logits, cache) = net.forward(&views.x1, TRAIN_MODE);
            let (loss, grad) = cross_entropy_grad(&logits, &views.aux_labels);
            net.backward(&cache, &grad);
            let mut params = Vec::new();
            net.collect_params(&mut params);
            opt.step(&mut params, lr);
            loss
        }
        MethodState::Plain { .. } => {
            return Err(Error::Config(
                "distilled encoders are produced by the defense, not by train".into(),
            ))
        }
    };
    Ok(loss)
}

/// Rotate an image by `k` quarter turns clockwise.
fn rotate_quarter(img: &ImageF32, k: usize) -> ImageF32 {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let (w, h) = (out.width, out.height);
        let mut next = ImageF32::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                // (x, y) -> (h - 1 - y, x)
                next.set_pixel(h - 1 - y, x, out.pixel(x, y));
            }
        }
        out = next;
    }
    out
}

/// Split into a 3x3 tile grid after resizing to a divisible side, and order
/// tiles by `perm`: output slot `i` holds tile `perm[i]`.
fn tile_views(view: &ImageF32, perm: &[u8; 9]) -> Vec<ImageF32> {
    let side = view.width.min(view.height);
    let t = (side / 3).max(1);
    let resized = if side == 3 * t && view.width == view.height {
        view.clone()
    } else {
        view.crop_resize(0, 0, view.width, view.height, 3 * t)
    };
    let mut tiles = Vec::with_capacity(9);
    for slot in 0..9 {
        let src = perm[slot] as usize;
        let (ty, tx) = (src / 3, src % 3);
        let mut tile = ImageF32::zeros(t, t);
        for y in 0..t {
            for x in 0..t {
                tile.set_pixel(x, y, resized.pixel(tx * t + x, ty * t + y));
            }
        }
        tiles.push(tile);
    }
    tiles
}

struct ViewBuilder<'a> {
    cfg: &'a MethodConfig,
    policy: &'a AugmentationPolicy,
    opts: &'a TrainOptions,
    perms: Option<Vec<[u8; 9]>>,
}

impl<'a> ViewBuilder<'a> {
    fn effective_one_view(&self, data: &TrainImages, idx: usize) -> bool {
        if !data.is_poisoned[idx] {
            return false;
        }
        match self.opts.view_mode {
            ViewMode::Standard => false,
            ViewMode::OneViewPoisoned => self
                .opts
                .one_view_ids
                .as_ref()
                .map_or(true, |s| s.contains(&data.ids[idx])),
            ViewMode::RandomPoisonBothViews => self
                .opts
                .one_view_ids
                .as_ref()
                .is_some_and(|s| s.contains(&data.ids[idx])),
        }
    }

    fn build(
        &self,
        data: &TrainImages,
        batch: &[usize],
        epoch: u32,
    ) -> Result<(BatchViews, Vec<serde_json::Value>)> {
        let n = batch.len();
        let s = self.policy.output_size;
        let mean = self.policy.normalize_mean;
        let std = self.policy.normalize_std;
        let mut crop_log = Vec::new();
        match self.cfg.method {
            Method::MocoV2 | Method::Byol | Method::Msf => {
                let mut x1 = Array4::<f32>::zeros((n, 3, s, s));
                let mut x2 = Array4::<f32>::zeros((n, 3, s, s));
                for (bi, &idx) in batch.iter().enumerate() {
                    let mut rng =
                        derive_rng_for_sample(self.cfg.seed, "augment", epoch, idx as u64);
                    let img = to_f32(&data.images[idx]);
                    let one_view = self.effective_one_view(data, idx);
                    let twin = data.clean_twins[idx].as_ref().map(to_f32);
                    let (v1, v2, rec) =
                        augment_pair(&img, twin.as_ref(), self.policy, one_view, &mut rng)?;
                    write_normalized_chw(
                        &v1,
                        mean,
                        std,
                        x1.index_axis_mut(ndarray::Axis(0), bi)
                            .as_slice_mut()
                            .unwrap(),
                    );
                    write_normalized_chw(
                        &v2,
                        mean,
                        std,
                        x2.index_axis_mut(ndarray::Axis(0), bi)
                            .as_slice_mut()
                            .unwrap(),
                    );
                    if self.opts.log_crops {
                        crop_log.push(serde_json::json!({
                            "image_id": data.ids[idx],
                            "pair": rec,
                        }));
                    }
                }
                Ok((
                    BatchViews {
                        x1,
                        x2: Some(x2),
                        aux_labels: Vec::new(),
                    },
                    crop_log,
                ))
            }
            Method::Rotnet => {
                let mut x1 = Array4::<f32>::zeros((n, 3, s, s));
                let mut labels = Vec::with_capacity(n);
                for (bi, &idx) in batch.iter().enumerate() {
                    let mut rng =
                        derive_rng_for_sample(self.cfg.seed, "augment", epoch, idx as u64);
                    let img = to_f32(&data.images[idx]);
                    let (view, _) = augment_view(&img, self.policy, &mut rng);
                    let angle = rng.random_range(0..4usize);
                    let rotated = rotate_quarter(&view, angle);
                    labels.push(angle);
                    write_normalized_chw(
                        &rotated,
                        mean,
                        std,
                        x1.index_axis_mut(ndarray::Axis(0), bi)
                            .as_slice_mut()
                            .unwrap(),
                    );
                }
                Ok((
                    BatchViews {
                        x1,
                        x2: None,
                        aux_labels: labels,
                    },
                    crop_log,
                ))
            }
            Method::Distilled => Err(Error::Config(
                "distilled encoders are produced by the defense, not by train".into(),
            ))?,
            Method::Jigsaw => {
                let perms = self.perms.as_ref().expect("jigsaw permutation set");
                let t = ((s / 3).max(1)) as usize;
                let mut x1 = Array4::<f32>::zeros((n * 9, 3, t, t));
                let mut labels = Vec::with_capacity(n);
                for (bi, &idx) in batch.iter().enumerate() {
                    let mut rng =
                        derive_rng_for_sample(self.cfg.seed, "augment", epoch, idx as u64);
                    let img = to_f32(&data.images[idx]);
                    let (view, _) = augment_view(&img, self.policy, &mut rng);
                    let pi = rng.random_range(0..perms.len());
                    labels.push(pi);
                    let tiles = tile_views(&view, &perms[pi]);
                    for (ti, tile) in tiles.iter().enumerate() {
                        write_normalized_chw(
                            tile,
                            mean,
                            std,
                            x1.index_axis_mut(ndarray::Axis(0), bi * 9 + ti)
                                .as_slice_mut()
                                .unwrap(),
                        );
                    }
                }
                Ok((
                    BatchViews {
                        x1,
                        x2: None,
                        aux_labels: labels,
                    },
                    crop_log,
                ))
            }
        }
    }
}

/// Metadata stamped into every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub method: Method,
    pub config: MethodConfig,
    /// Augmentation policy used in training; evaluation preprocessing reads
    /// its output size and normalization constants.
    pub policy: AugmentationPolicy,
    pub manifest_hash: String,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCheckpoint {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
    pub hash: String,
}

fn save_state(
    state: &mut MethodState,
    cfg: &MethodConfig,
    policy: &AugmentationPolicy,
    manifest_hash: &str,
    epoch: usize,
    path: &Path,
) -> Result<EncoderCheckpoint> {
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        method: cfg.method,
        config: cfg.clone(),
        policy: policy.clone(),
        manifest_hash: manifest_hash.to_string(),
        epoch,
    };
    let mut archive = TensorArchive::new(serde_json::to_value(&meta).expect("serializable meta"));
    state.visit_online_state(&mut |name, tensor| {
        archive.push(
            name,
            tensor.shape().to_vec(),
            tensor.iter().cloned().collect(),
        );
    });
    archive.save(path)?;
    Ok(EncoderCheckpoint {
        path: path.to_path_buf(),
        meta,
        hash: file_hash(path)?,
    })
}

/// Run the configured method over label-free training data.
///
/// Per-sample augmentation streams derive from (seed, epoch, sample index),
/// the epoch order from (seed, epoch), so runs are bit-reproducible. Batches
/// that do not fill `batch_size` are dropped. A checkpoint is written every
/// epoch (`checkpoint_latest`) and at the end (`checkpoint_final`), and a
/// JSON-lines loss log accompanies them.
pub fn train(
    cfg: &MethodConfig,
    data: &TrainImages,
    policy: &AugmentationPolicy,
    opts: &TrainOptions,
    out_dir: &Path,
) -> Result<EncoderCheckpoint> {
    cfg.validate()?;
    policy.validate()?;
    if cfg.method == Method::Distilled {
        return Err(Error::Config(
            "distilled encoders are produced by the defense, not by train".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = MethodState::init(cfg);
    let mut opt = cfg.optimizer.build();
    let steps_per_epoch = data.len() / cfg.batch_size;
    if cfg.epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            data.len()
        )));
    }
    let schedule = Schedule::new(
        cfg.schedule.clone(),
        cfg.optimizer.learning_rate,
        steps_per_epoch * cfg.epochs,
        steps_per_epoch,
    );
    let builder = ViewBuilder {
        cfg,
        policy,
        opts,
        perms: match &state {
            MethodState::Jigsaw { perms, .. } => Some(perms.perms.clone()),
            _ => None,
        },
    };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let mut crops_log = if opts.log_crops {
        let p = out_dir.join("crops.jsonl");
        Some(std::io::BufWriter::new(
            std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?,
        ))
    } else {
        None
    };

    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_rng = derive_rng(cfg.seed, "epoch-order", &[&(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                continue;
            }
            let lr = schedule.lr_at(step as usize) as f32;
            let (views, crop_entries) = builder.build(data, batch, epoch as u32)?;
            let loss = train_step(&mut state, &views, cfg, &mut opt, lr, step)?;
            if !loss.is_finite() {
                let ids: Vec<&str> = batch.iter().take(8).map(|&i| data.ids[i].as_str()).collect();
                return Err(Error::Divergence {
                    step,
                    msg: format!("loss {loss} at lr {lr}, batch head: {}", ids.join(", ")),
                });
            }
            writeln!(
                log,
                "{}",
                serde_json::json!({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            )
            .map_err(|e| Error::io(&log_path, e))?;
            if let Some(cl) = crops_log.as_mut() {
                for entry in crop_entries {
                    writeln!(cl, "{entry}").map_err(|e| Error::io(out_dir, e))?;
                }
            }
            step += 1;
        }
        save_state(
            &mut state,
            cfg,
            policy,
            &data.manifest_hash,
            epoch + 1,
            &out_dir.join("checkpoint_latest.ssbd"),
        )?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(mut cl) = crops_log {
        cl.flush().map_err(|e| Error::io(out_dir, e))?;
    }
    if let Some(err) = state.bank_norm_error() {
        if err > 1e-5 {
            return Err(Error::Divergence {
                step,
                msg: format!("bank rows drifted from unit norm by {err}"),
            });
        }
    }
    save_state(
        &mut state,
        cfg,
        policy,
        &data.manifest_hash,
        cfg.epochs,
        &out_dir.join("checkpoint_final.ssbd"),
    )
}

/// Persist a bare encoder (distilled student) as a loadable checkpoint.
pub fn save_plain_encoder(
    online: EncoderNet,
    cfg: &MethodConfig,
    policy: &AugmentationPolicy,
    manifest_hash: &str,
    epoch: usize,
    path: &Path,
) -> Result<EncoderCheckpoint> {
    let mut state = MethodState::Plain { online };
    save_state(&mut state, cfg, policy, manifest_hash, epoch, path)
}

/// A checkpoint loaded back for evaluation or distillation.
pub struct LoadedEncoder {
    pub meta: CheckpointMeta,
    pub backbone: Backbone,
    /// Projection head (exemplar methods only).
    pub proj: Option<MlpHead>,
    pub checkpoint_hash: String,
}

pub fn load_encoder(path: &Path) -> Result<LoadedEncoder> {
    let archive = TensorArchive::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::Data(format!("bad checkpoint meta in {}: {e}", path.display())))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint schema {}",
            meta.schema_version
        )));
    }
    let cfg = &meta.config;
    let mut state = MethodState::init(cfg);
    let mut missing = Vec::new();
    state.visit_online_state(&mut |name, tensor| {
        match archive.get(&name) {
            Some((shape, data)) if shape == tensor.shape() => {
                for (dst, src) in tensor.iter_mut().zip(data.iter()) {
                    *dst = *src;
                }
            }
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint {} incomplete: missing {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let (backbone, proj) = match state {
        MethodState::Moco { online, .. } | MethodState::Plain { online } => {
            (online.backbone, Some(online.proj))
        }
        MethodState::Byol { online, .. } | MethodState::Msf { online, .. } => {
            (online.backbone, Some(online.proj))
        }
        MethodState::Rotnet { net } => (net.backbone, None),
        MethodState::Jigsaw { net, .. } => (net.backbone, None),
    };
    Ok(LoadedEncoder {
        meta,
        backbone,
        proj,
        checkpoint_hash: file_hash(path)?,
    })
}

impl LoadedEncoder {
    /// Deterministic embeddings (eval-mode normalization) at the method's
    /// feature tap. `x` rows follow the caller's order.
    pub fn embed(&mut self, x: &Array4<f32>) -> Array2<f32> {
        let tap = self.meta.method.feature_tap();
        let (feat, _) = self.backbone.forward(x, BnMode::Eval, tap);
        feat
    }

    /// Unit-normalized projection-space embeddings (exemplar methods).
    pub fn embed_projected(&mut self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let proj = self.proj.as_mut().ok_or_else(|| {
            Error::Config("checkpoint has no projection head".into())
        })?;
        let (feat, _) = self
            .backbone
            .forward(x, BnMode::Eval, FeatureTap::FinalStage);
        let (mut out, _) = proj.forward(&feat, BnMode::Eval);
        normalize_rows(&mut out);
        Ok(out)
    }
}
