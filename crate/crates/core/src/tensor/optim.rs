use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub grad_norm: f32,
    pub clipped: bool,
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched. A non-finite gradient aborts the whole
    /// step before any parameter or moment is modified.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &mut BTreeMap<String, Tensor>,
        lr: f32,
    ) -> Result<StepStats> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("`{name}` param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let (grad_norm, clipped) = match self.config.clip_norm {
            Some(max) => clip_grad_norm(grads, max),
            None => (global_norm(grads), false),
        };

        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let decay = if p.ndim() >= 2 { c.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *pi);
            }
        }
        Ok(StepStats {
            step: self.step,
            grad_norm,
            clipped,
        })
    }
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f32 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clipping norm and whether clipping happened.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f32) -> (f32, bool) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f32, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        if step > self.total_steps {
            log::warn!(
                "lr requested at step {step} beyond schedule end {}; using 0",
                self.total_steps
            );
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f32 / self.warmup_steps as f32;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        (self.base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}
