use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to a floor, defined over steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    /// Constant learning rate (no warmup, no decay).
    pub fn constant(lr: f64) -> Self {
        LrSchedule { peak: lr, floor: lr, warmup_epochs: 0, total_epochs: 1, steps_per_epoch: 1 }
    }

    /// Tokenizer training defaults: peak 2e-4, 5 warmup epochs, floor 1e-5.
    pub fn tokenizer(total_epochs: usize, steps_per_epoch: usize) -> Self {
        LrSchedule { peak: 2e-4, floor: 1e-5, warmup_epochs: 5, total_epochs, steps_per_epoch }
    }

    /// Slide-level pretraining defaults: peak 5e-4, 2 warmup epochs, floor 1e-5.
    pub fn pretraining(total_epochs: usize, steps_per_epoch: usize) -> Self {
        LrSchedule { peak: 5e-4, floor: 1e-5, warmup_epochs: 2, total_epochs, steps_per_epoch }
    }

    fn total_steps(&self) -> usize {
        (self.total_epochs * self.steps_per_epoch).max(1)
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_epochs * self.steps_per_epoch).min(self.total_steps())
    }

    /// Learning rate for 1-based optimizer step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        let total = self.total_steps();
        if warm > 0 && step <= warm {
            return self.peak * step as f64 / warm as f64;
        }
        if total <= warm {
            return self.floor;
        }
        let t = (step.min(total) - warm) as f64 / (total - warm) as f64;
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (PI * t).cos())
    }

    /// Learning rate in effect at the end of 0-based `epoch`.
    pub fn lr_at_epoch_end(&self, epoch: usize) -> f64 {
        self.lr((epoch + 1) * self.steps_per_epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWConfig {
    /// Tokenizer training: betas (0.9, 0.99), weight decay 1e-4.
    pub fn tokenizer() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }

    /// Slide-level pretraining: betas (0.9, 0.98).
    pub fn pretraining() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 1e-4 }
    }

    /// Downstream fine-tuning: library-default betas, weight decay 1e-4.
    pub fn finetune() -> Self {
        AdamWConfig { weight_decay: 1e-4, ..Default::default() }
    }
}

/// AdamW optimizer state: per-parameter moments and a step counter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: usize,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, schedule: LrSchedule) -> Self {
        AdamW { config, schedule, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step.max(1))
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.schedule.lr(self.step);
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let denom = vv.sqrt() / bc2_sqrt + eps;
                *pv = *pv * decay - step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
