//! Residual convolutional backbone with a 3x3 stem and no initial
//! downsampling, sized for small inputs. Stage widths and depths come from
//! the config, so the same code serves a ResNet-18-class network at 32px and
//! a much smaller variant for smoke tests.

use ndarray::{Array2, Array4, ArrayD};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu4, relu4_backward, BatchNorm2d, Bn2dCache,
    BnMode, Conv2d, ConvCache, PTensor,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_width: usize,
    /// Output channels of each residual stage. The first stage keeps the
    /// stem resolution; every later stage halves it.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl BackboneConfig {
    /// ResNet-18-class backbone for 32px inputs.
    pub fn resnet18_cifar() -> Self {
        BackboneConfig {
            stem_width: 64,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
        }
    }

    /// Compact backbone for 16px smoke-scale runs.
    pub fn micro() -> Self {
        BackboneConfig {
            stem_width: 12,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![1, 1, 1],
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().expect("at least one stage")
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(crate::Error::Config(
                "backbone stage widths and depths must be non-empty and equal length".into(),
            ));
        }
        Ok(())
    }
}

/// Which stage output to read features from. Exemplar methods evaluate the
/// final stage after global average pooling; pretext-task methods tap
/// earlier stages (spatially averaged) where their features are strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Second-to-last stage, pooled.
    PenultimateStage,
    /// Last stage, pooled: the default embedding layer.
    FinalStage,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

struct BlockCache {
    c1: ConvCache,
    b1: Option<Bn2dCache>,
    h1: Array4<f32>,
    c2: ConvCache,
    b2: Option<Bn2dCache>,
    down: Option<(ConvCache, Option<Bn2dCache>)>,
    out: Array4<f32>,
}

impl BasicBlock {
    fn new(rng: &mut ChaCha12Rng, c_in: usize, c_out: usize, stride: usize) -> Self {
        let down = (stride != 1 || c_in != c_out)
            .then(|| (Conv2d::new(rng, c_in, c_out, 1, stride, 0), BatchNorm2d::new(c_out)));
        BasicBlock {
            conv1: Conv2d::new(rng, c_in, c_out, 3, stride, 1),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            bn2: BatchNorm2d::new(c_out),
            down,
        }
    }

    fn forward(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array4<f32>, BlockCache) {
        let (y1, c1) = self.conv1.forward(x);
        let (mut h1, b1) = self.bn1.forward(&y1, mode);
        relu4(&mut h1);
        let (y2, c2) = self.conv2.forward(&h1);
        let (mut h2, b2) = self.bn2.forward(&y2, mode);
        let (identity, down_cache) = match &mut self.down {
            Some((conv, bn)) => {
                let (d, dc) = conv.forward(x);
                let (d, dbn) = bn.forward(&d, mode);
                (d, Some((dc, dbn)))
            }
            None => (x.clone(), None),
        };
        h2 += &identity;
        relu4(&mut h2);
        let cache = BlockCache {
            c1,
            b1,
            h1,
            c2,
            b2,
            down: down_cache,
            out: h2.clone(),
        };
        (h2, cache)
    }

    fn backward(&mut self, cache: &BlockCache, grad_out: &Array4<f32>) -> Array4<f32> {
        let mut g = grad_out.clone();
        relu4_backward(&cache.out, &mut g);
        // g flows both into the residual branch and the identity path.
        let gb2 = self.bn2.backward(cache.b2.as_ref().expect("train cache"), &g);
        let mut gh1 = self.conv2.backward(&cache.c2, &gb2);
        relu4_backward(&cache.h1, &mut gh1);
        let gb1 = self.bn1.backward(cache.b1.as_ref().expect("train cache"), &gh1);
        let mut gx = self.conv1.backward(&cache.c1, &gb1);
        match (&mut self.down, &cache.down) {
            (Some((conv, bn)), Some((dc, dbn))) => {
                let gd = bn.backward(dbn.as_ref().expect("train cache"), &g);
                gx += &conv.backward(dc, &gd);
            }
            _ => {
                gx += &g;
            }
        }
        gx
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut PTensor>) {
        out.push(&mut self.conv1.weight);
        out.push(&mut self.bn1.gamma);
        out.push(&mut self.bn1.beta);
        out.push(&mut self.conv2.weight);
        out.push(&mut self.bn2.gamma);
        out.push(&mut self.bn2.beta);
        if let Some((conv, bn)) = &mut self.down {
            out.push(&mut conv.weight);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        f(format!("{prefix}.conv1.weight"), &mut self.conv1.weight.data);
        bn_state(&mut self.bn1, &format!("{prefix}.bn1"), f);
        f(format!("{prefix}.conv2.weight"), &mut self.conv2.weight.data);
        bn_state(&mut self.bn2, &format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &mut self.down {
            f(format!("{prefix}.down.weight"), &mut conv.weight.data);
            bn_state(bn, &format!("{prefix}.down_bn"), f);
        }
    }
}

fn bn_state(bn: &mut BatchNorm2d, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
    f(format!("{prefix}.gamma"), &mut bn.gamma.data);
    f(format!("{prefix}.beta"), &mut bn.beta.data);
    f(format!("{prefix}.running_mean"), &mut bn.running_mean);
    f(format!("{prefix}.running_var"), &mut bn.running_var);
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

pub struct BackboneCache {
    stem: ConvCache,
    stem_bn: Option<Bn2dCache>,
    stem_out: Array4<f32>,
    blocks: Vec<BlockCache>,
    pooled_hw: (usize, usize),
}

impl Backbone {
    pub fn new(rng: &mut ChaCha12Rng, config: &BackboneConfig) -> Self {
        let stem = Conv2d::new(rng, 3, config.stem_width, 3, 1, 1);
        let stem_bn = BatchNorm2d::new(config.stem_width);
        let mut stages = Vec::new();
        let mut c_in = config.stem_width;
        for (si, (&width, &blocks)) in config
            .stage_widths
            .iter()
            .zip(config.blocks_per_stage.iter())
            .enumerate()
        {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if si > 0 && b == 0 { 2 } else { 1 };
                stage.push(BasicBlock::new(rng, c_in, width, stride));
                c_in = width;
            }
            stages.push(stage);
        }
        Backbone {
            config: config.clone(),
            stem,
            stem_bn,
            stages,
        }
    }

    pub fn feature_dim(&self, tap: FeatureTap) -> usize {
        match tap {
            FeatureTap::FinalStage => *self.config.stage_widths.last().unwrap(),
            FeatureTap::PenultimateStage => {
                let n = self.config.stage_widths.len();
                self.config.stage_widths[n.saturating_sub(2)]
            }
        }
    }

    /// Forward to pooled features from `tap`. Returns `(n, dim)` features.
    pub fn forward(
        &mut self,
        x: &Array4<f32>,
        mode: BnMode,
        tap: FeatureTap,
    ) -> (Array2<f32>, BackboneCache) {
        let (y, stem_c) = self.stem.forward(x);
        let (mut h, stem_bn_c) = self.stem_bn.forward(&y, mode);
        relu4(&mut h);
        let stem_out = h.clone();
        let stop_stage = match tap {
            FeatureTap::FinalStage => self.stages.len(),
            FeatureTap::PenultimateStage => self.stages.len().saturating_sub(1).max(1),
        };
        let mut blocks = Vec::new();
        for stage in self.stages.iter_mut().take(stop_stage) {
            for block in stage.iter_mut() {
                let (next, cache) = block.forward(&h, mode);
                blocks.push(cache);
                h = next;
            }
        }
        let hw = (h.shape()[2], h.shape()[3]);
        let pooled = global_avg_pool(&h);
        (
            pooled,
            BackboneCache {
                stem: stem_c,
                stem_bn: stem_bn_c,
                stem_out,
                blocks,
                pooled_hw: hw,
            },
        )
    }

    /// Backward from pooled-feature gradients; accumulates parameter grads.
    /// Only valid for a full-depth (FinalStage) training forward.
    pub fn backward(&mut self, cache: &BackboneCache, grad_pooled: &Array2<f32>) -> Array4<f32> {
        let total_blocks: usize = self.stages.iter().map(|s| s.len()).sum();
        debug_assert_eq!(cache.blocks.len(), total_blocks, "backward needs a full-depth cache");
        let (h, w) = cache.pooled_hw;
        let mut g = global_avg_pool_backward(grad_pooled, h, w);
        let mut idx = cache.blocks.len();
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                idx -= 1;
                g = block.backward(&cache.blocks[idx], &g);
            }
        }
        relu4_backward(&cache.stem_out, &mut g);
        let g = self
            .stem_bn
            .backward(cache.stem_bn.as_ref().expect("train cache"), &g);
        self.stem.backward(&cache.stem, &g)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut PTensor>) {
        out.push(&mut self.stem.weight);
        out.push(&mut self.stem_bn.gamma);
        out.push(&mut self.stem_bn.beta);
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                block.collect_params(out);
            }
        }
    }

    pub fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f32>)) {
        f(format!("{prefix}.stem.weight"), &mut self.stem.weight.data);
        bn_state(&mut self.stem_bn, &format!("{prefix}.stem_bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_state(&format!("{prefix}.stage{si}.block{bi}"), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array4;

    #[test]
    fn forward_shapes_follow_config() {
        let mut rng = derive_rng(1, "bb", &[]);
        let cfg = BackboneConfig::micro();
        let mut net = Backbone::new(&mut rng, &cfg);
        let x = Array4::<f32>::from_elem((2, 3, 16, 16), 0.3);
        let mode = BnMode::Train {
            ghost_splits: 1,
            update_running: true,
        };
        let (feat, _) = net.forward(&x, mode, FeatureTap::FinalStage);
        assert_eq!(feat.shape(), &[2, 64]);
        let (feat3, _) = net.forward(&x, mode, FeatureTap::PenultimateStage);
        assert_eq!(feat3.shape(), &[2, 32]);
    }

    #[test]
    fn backward_matches_finite_differences_on_a_tiny_net() {
        let mut rng = derive_rng(2, "bb", &[]);
        let cfg = BackboneConfig {
            stem_width: 4,
            stage_widths: vec![5],
            blocks_per_stage: vec![1],
        };
        let mut net = Backbone::new(&mut rng, &cfg);
        let x = Array4::<f32>::from_shape_fn((2, 3, 6, 6), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) % 7) as f32 / 7.0 - 0.4
        });
        let mode = BnMode::Train {
            ghost_splits: 1,
            update_running: false,
        };
        // Scalar loss: sum of pooled features weighted by fixed coefficients.
        let coef = Array2::from_shape_fn((2, 5), |(i, j)| ((i + j) % 3) as f32 - 1.0);
        let loss_of = |net: &mut Backbone, x: &Array4<f32>| -> f64 {
            let (f, _) = net.forward(x, mode, FeatureTap::FinalStage);
            f.iter().zip(coef.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = net.forward(&x, mode, FeatureTap::FinalStage);
        let gx = net.backward(&cache, &coef);

        let h = 5e-3f32;
        let mut checked = 0;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 2, 5, 5), (1, 0, 3, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_of(&mut net, &xp) - loss_of(&mut net, &xm)) / (2.0 * h as f64);
            let an = gx[idx] as f64;
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + an.abs()),
                "{idx:?}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn eval_mode_uses_running_stats_and_is_deterministic() {
        let mut rng = derive_rng(3, "bb", &[]);
        let cfg = BackboneConfig::micro();
        let mut net = Backbone::new(&mut rng, &cfg);
        let x = Array4::<f32>::from_elem((4, 3, 16, 16), 0.5);
        // Train once so running stats move, then eval twice.
        let _ = net.forward(
            &x,
            BnMode::Train {
                ghost_splits: 1,
                update_running: true,
            },
            FeatureTap::FinalStage,
        );
        let (a, _) = net.forward(&x, BnMode::Eval, FeatureTap::FinalStage);
        let (b, _) = net.forward(&x, BnMode::Eval, FeatureTap::FinalStage);
        assert_eq!(a, b);
    }
}
