//! SGD/Adam with PyTorch-style coupled weight decay, and the two learning
//! rate schedules the methods use.

use serde::{Deserialize, Serialize};

use super::layers::PTensor;
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, weight_decay: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay,
            momentum,
            nesterov: false,
        }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay,
            momentum: 0.0,
            nesterov: false,
        }
    }

    pub fn build(&self) -> Optimizer {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(self.clone())),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.clone())),
        }
    }
}

pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [&mut PTensor], lr: f32) {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr),
            Optimizer::Adam(o) => o.step(params, lr),
        }
    }
}

pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut PTensor], lr: f32) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.data.raw_dim())).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter set changed");
        let wd = self.cfg.weight_decay as f32;
        let mom = self.cfg.momentum as f32;
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            for ((g, w), vel) in p.grad.iter().zip(p.data.iter_mut()).zip(v.iter_mut()) {
                let grad = g + wd * *w;
                *vel = mom * *vel + grad;
                let update = if self.cfg.nesterov { grad + mom * *vel } else { *vel };
                *w -= lr * update;
            }
        }
    }
}

pub struct Adam {
    cfg: OptimizerConfig,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut PTensor], lr: f32) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.data.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.data.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        self.t += 1;
        let wd = self.cfg.weight_decay as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for (((g, w), mi), vi) in p
                .grad
                .iter()
                .zip(p.data.iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let grad = g + wd * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleConfig {
    /// Half-cosine from the base rate to zero over the whole run.
    Cosine,
    /// Multiply by `gamma` at each epoch milestone.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Constant learning rate.
    Constant,
}

/// Resolved schedule over a known step horizon.
#[derive(Debug, Clone)]
pub struct Schedule {
    config: ScheduleConfig,
    base_lr: f64,
    total_steps: usize,
    steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(
        config: ScheduleConfig,
        base_lr: f64,
        total_steps: usize,
        steps_per_epoch: usize,
    ) -> Self {
        Schedule {
            config,
            base_lr,
            total_steps: total_steps.max(1),
            steps_per_epoch: steps_per_epoch.max(1),
        }
    }

    /// Learning rate used at 0-based `step`. Cosine reaches exactly zero on
    /// the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        match &self.config {
            ScheduleConfig::Constant => self.base_lr,
            ScheduleConfig::Cosine => {
                if self.total_steps == 1 {
                    return self.base_lr;
                }
                let progress = step as f64 / (self.total_steps - 1) as f64;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
            ScheduleConfig::Step { milestones, gamma } => {
                let epoch = step / self.steps_per_epoch;
                let hits = milestones.iter().filter(|&&m| epoch >= m).count();
                self.base_lr * gamma.powi(hits as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scalar_param(v: f32) -> PTensor {
        let mut p = PTensor::new(ArrayD::from_elem(vec![1], v));
        p.grad.fill(0.0);
        p
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = scalar_param(1.0);
        p.grad.fill(1.0);
        let mut opt = Sgd::new(OptimizerConfig::sgd(0.1, 0.0, 0.9));
        opt.step(&mut [&mut p], 0.1);
        assert!((p.data[[0]] - 0.9).abs() < 1e-6);
        p.grad.fill(1.0);
        opt.step(&mut [&mut p], 0.1);
        // velocity = 0.9 * 1 + 1 = 1.9
        assert!((p.data[[0]] - (0.9 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_param(0.0);
        p.grad.fill(0.5);
        let mut opt = Adam::new(OptimizerConfig::adam(1e-3, 0.0));
        opt.step(&mut [&mut p], 1e-3);
        // Bias-corrected first step is -lr * sign(grad) (up to eps).
        assert!((p.data[[0]] + 1e-3).abs() < 1e-5);
    }

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::new(ScheduleConfig::Cosine, 0.06, 500, 10);
        assert!((s.lr_at(0) - 0.06).abs() < 1e-12);
        assert!(s.lr_at(499) <= 1e-3 * 0.06);
        assert!(s.lr_at(250) < 0.06 && s.lr_at(250) > 0.0);
    }

    #[test]
    fn step_schedule_decays_at_milestones() {
        let s = Schedule::new(
            ScheduleConfig::Step {
                milestones: vec![15, 30],
                gamma: 0.1,
            },
            0.01,
            40 * 10,
            10,
        );
        assert!((s.lr_at(0) - 0.01).abs() < 1e-12);
        assert!((s.lr_at(14 * 10) - 0.01).abs() < 1e-12);
        assert!((s.lr_at(15 * 10) - 0.001).abs() < 1e-12);
        assert!((s.lr_at(30 * 10) - 0.0001).abs() < 1e-12);
    }
}
