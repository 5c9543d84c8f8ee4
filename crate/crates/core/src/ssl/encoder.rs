//! Encoder compositions: backbone plus projection head, the pretext-task
//! variants, and the EMA update between online and target copies.

use ndarray::{Array2, Array4, ArrayD};
use rand_chacha::ChaCha12Rng;

use crate::nn::backbone::{Backbone, BackboneCache, BackboneConfig, FeatureTap};
use crate::nn::layers::{Linear, LinearCache, MlpHead, MlpHeadCache, BnMode, PTensor};

/// Backbone + projection head; the unit every exemplar method trains.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub backbone: Backbone,
    pub proj: MlpHead,
}

pub struct EncoderCache {
    bb: BackboneCache,
    proj: MlpHeadCache,
}

impl EncoderNet {
    pub fn new(
        rng: &mut ChaCha12Rng,
        backbone_cfg: &BackboneConfig,
        proj_hidden: usize,
        embed_dim: usize,
        proj_bn: bool,
    ) -> Self {
        let backbone = Backbone::new(rng, backbone_cfg);
        let feat = backbone_cfg.feature_dim();
        EncoderNet {
            backbone,
            proj: MlpHead::new(rng, feat, proj_hidden, embed_dim, proj_bn),
        }
    }

    /// Forward to raw (unnormalized) projection outputs.
    pub fn forward(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array2<f32>, EncoderCache) {
        let (feat, bb) = self.backbone.forward(x, mode, FeatureTap::FinalStage);
        let (out, proj) = self.proj.forward(&feat, mode);
        (out, EncoderCache { bb, proj })
    }

    pub fn backward(&mut self, cache: &EncoderCache, grad_out: &Array2<f32>) {
        let gfeat = self.proj.backward(&cache.proj, grad_out);
        let _ = self.backbone.backward(&cache.bb, &gfeat);
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut PTensor>) {
        self.backbone.collect_params(out);
        self.proj.collect_params(out);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        self.backbone.visit_state(&format!("{prefix}.backbone"), f);
        self.proj.visit_state(&format!("{prefix}.proj"), f);
    }

    pub fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        for p in params {
            p.zero_grad();
        }
    }
}

/// Exponential moving average of weights: `target <- m*target + (1-m)*online`.
/// Normalization buffers are not mixed; each copy keeps its own.
pub fn ema_update(target: &mut EncoderNet, online: &mut EncoderNet, m: f32) {
    let mut tp = Vec::new();
    target.collect_params(&mut tp);
    let mut op = Vec::new();
    online.collect_params(&mut op);
    assert_eq!(tp.len(), op.len(), "mismatched encoder shapes");
    for (t, o) in tp.into_iter().zip(op.into_iter()) {
        debug_assert_eq!(t.data.shape(), o.data.shape());
        for (tv, ov) in t.data.iter_mut().zip(o.data.iter()) {
            *tv = m * *tv + (1.0 - m) * *ov;
        }
    }
}

/// Hard copy of weights (EMA with m = 0), used to initialize targets.
pub fn copy_weights(target: &mut EncoderNet, online: &mut EncoderNet) {
    ema_update(target, online, 0.0);
    // Also align normalization buffers at initialization time.
    let mut src = Vec::new();
    online.visit_state("net", &mut |name, t| src.push((name, t.clone())));
    let mut idx = 0usize;
    target.visit_state("net", &mut |_name, t| {
        *t = src[idx].1.clone();
        idx += 1;
    });
}

/// Backbone + linear head for the rotation pretext task.
#[derive(Debug, Clone)]
pub struct RotnetNet {
    pub backbone: Backbone,
    pub head: Linear,
}

pub struct RotnetCache {
    bb: BackboneCache,
    head: LinearCache,
}

impl RotnetNet {
    pub fn new(rng: &mut ChaCha12Rng, backbone_cfg: &BackboneConfig, classes: usize) -> Self {
        let backbone = Backbone::new(rng, backbone_cfg);
        let feat = backbone_cfg.feature_dim();
        RotnetNet {
            backbone,
            head: Linear::new(rng, feat, classes),
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array2<f32>, RotnetCache) {
        let (feat, bb) = self.backbone.forward(x, mode, FeatureTap::FinalStage);
        let (logits, head) = self.head.forward(&feat);
        (logits, RotnetCache { bb, head })
    }

    pub fn backward(&mut self, cache: &RotnetCache, grad_logits: &Array2<f32>) {
        let gfeat = self.head.backward(&cache.head, grad_logits);
        let _ = self.backbone.backward(&cache.bb, &gfeat);
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut PTensor>) {
        self.backbone.collect_params(out);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        self.backbone.visit_state(&format!("{prefix}.backbone"), f);
        f(format!("{prefix}.head.weight"), &mut self.head.weight.data);
        f(format!("{prefix}.head.bias"), &mut self.head.bias.data);
    }

    pub fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        for p in params {
            p.zero_grad();
        }
    }
}

/// Backbone shared over 3x3 tiles, a per-tile embedding layer, and a
/// permutation classifier over the concatenated tile embeddings.
#[derive(Debug, Clone)]
pub struct JigsawNet {
    pub backbone: Backbone,
    pub tile_fc: Linear,
    pub head: Linear,
    pub tile_dim: usize,
}

pub struct JigsawCache {
    bb: BackboneCache,
    tile_fc: LinearCache,
    tile_out: Array2<f32>,
    head: LinearCache,
    n: usize,
}

impl JigsawNet {
    pub fn new(
        rng: &mut ChaCha12Rng,
        backbone_cfg: &BackboneConfig,
        tile_dim: usize,
        perm_classes: usize,
    ) -> Self {
        let backbone = Backbone::new(rng, backbone_cfg);
        let feat = backbone_cfg.feature_dim();
        JigsawNet {
            backbone,
            tile_fc: Linear::new(rng, feat, tile_dim),
            head: Linear::new(rng, 9 * tile_dim, perm_classes),
            tile_dim,
        }
    }

    /// `tiles` is `(n * 9, 3, t, t)` with the 9 tiles of each image
    /// contiguous. Returns `(n, perm_classes)` logits.
    pub fn forward(&mut self, tiles: &Array4<f32>, mode: BnMode) -> (Array2<f32>, JigsawCache) {
        let n9 = tiles.shape()[0];
        debug_assert_eq!(n9 % 9, 0);
        let n = n9 / 9;
        let (feat, bb) = self.backbone.forward(tiles, mode, FeatureTap::FinalStage);
        let (mut tile_emb, tile_fc) = self.tile_fc.forward(&feat);
        crate::nn::layers::relu2(&mut tile_emb);
        // (n*9, tile_dim) -> (n, 9*tile_dim); rows are contiguous so this is
        // a pure reshape.
        let concat = tile_emb
            .clone()
            .into_shape_with_order((n, 9 * self.tile_dim))
            .expect("contiguous");
        let (logits, head) = self.head.forward(&concat);
        (
            logits,
            JigsawCache {
                bb,
                tile_fc,
                tile_out: tile_emb,
                head,
                n,
            },
        )
    }

    pub fn backward(&mut self, cache: &JigsawCache, grad_logits: &Array2<f32>) {
        let gconcat = self.head.backward(&cache.head, grad_logits);
        let mut gtile = gconcat
            .into_shape_with_order((cache.n * 9, self.tile_dim))
            .expect("contiguous");
        crate::nn::layers::relu2_backward(&cache.tile_out, &mut gtile);
        let gfeat = self.tile_fc.backward(&cache.tile_fc, &gtile);
        let _ = self.backbone.backward(&cache.bb, &gfeat);
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut PTensor>) {
        self.backbone.collect_params(out);
        out.push(&mut self.tile_fc.weight);
        out.push(&mut self.tile_fc.bias);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        self.backbone.visit_state(&format!("{prefix}.backbone"), f);
        f(format!("{prefix}.tile_fc.weight"), &mut self.tile_fc.weight.data);
        f(format!("{prefix}.tile_fc.bias"), &mut self.tile_fc.bias.data);
        f(format!("{prefix}.head.weight"), &mut self.head.weight.data);
        f(format!("{prefix}.head.bias"), &mut self.head.bias.data);
    }

    pub fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        for p in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn ema_endpoints() {
        let mut rng = derive_rng(31, "enc", &[]);
        let cfg = BackboneConfig {
            stem_width: 4,
            stage_widths: vec![6],
            blocks_per_stage: vec![1],
        };
        let mut online = EncoderNet::new(&mut rng, &cfg, 8, 4, false);
        let mut t1 = EncoderNet::new(&mut rng, &cfg, 8, 4, false);
        copy_weights(&mut t1, &mut online.clone());
        // m = 1: target unchanged by the update.
        let before: Vec<f32> = {
            let mut v = Vec::new();
            t1.visit_state("t", &mut |_, t| v.extend(t.iter().cloned()));
            v
        };
        ema_update(&mut t1, &mut online, 1.0);
        let after: Vec<f32> = {
            let mut v = Vec::new();
            t1.visit_state("t", &mut |_, t| v.extend(t.iter().cloned()));
            v
        };
        assert_eq!(before, after);
        // m = 0: target equals online weights.
        ema_update(&mut t1, &mut online, 0.0);
        let mut tp = Vec::new();
        t1.collect_params(&mut tp);
        let mut op = Vec::new();
        online.collect_params(&mut op);
        for (t, o) in tp.iter().zip(op.iter()) {
            assert_eq!(t.data, o.data);
        }
    }

    #[test]
    fn ema_scalar_arithmetic() {
        // theta_key = 0, theta_query = 1, m = 0.999 -> 1 - m, i.e. 0.001 up
        // to the representation of 0.999.
        let m = 0.999f64;
        let updated = m * 0.0 + (1.0 - m) * 1.0;
        assert_eq!(updated, 1.0 - m);
        assert!((updated - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ema_is_a_contraction_toward_online() {
        let mut rng = derive_rng(32, "enc", &[]);
        let cfg = BackboneConfig {
            stem_width: 4,
            stage_widths: vec![6],
            blocks_per_stage: vec![1],
        };
        let mut online = EncoderNet::new(&mut rng, &cfg, 8, 4, false);
        let mut target = EncoderNet::new(&mut rng, &cfg, 8, 4, false);
        let dist = |a: &mut EncoderNet, b: &mut EncoderNet| -> f32 {
            let mut pa = Vec::new();
            a.collect_params(&mut pa);
            let mut pb = Vec::new();
            b.collect_params(&mut pb);
            let mut acc = 0.0f32;
            for (x, y) in pa.iter().zip(pb.iter()) {
                for (u, v) in x.data.iter().zip(y.data.iter()) {
                    acc += (u - v) * (u - v);
                }
            }
            acc.sqrt()
        };
        let m = 0.9f32;
        let before = dist(&mut target, &mut online);
        ema_update(&mut target, &mut online, m);
        let after = dist(&mut target, &mut online);
        assert!(after <= m * before + 1e-5, "{after} vs {}", m * before);
    }
}
