//! Pieces shared by every training loop: batch sampling, the optimizer
//! with its schedule, divergence guard and CSV metric logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, LrSchedule, ParamStore, Tensor};

/// Epoch-wise shuffled mini-batches over `0..n`.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::InvalidArgument(
                "empty dataset or zero batch size".into(),
            ));
        }
        Ok(BatchSampler {
            n,
            batch: batch.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: n,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos >= self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Optimizer settings common to all trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    /// Abort when the loss exceeds this multiple of the first loss.
    pub divergence_factor: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            divergence_factor: 10.0,
        }
    }
}

/// AdamW driven by a warmup-cosine schedule, with a divergence guard.
pub struct Optimizer {
    adam: AdamW,
    schedule: LrSchedule,
    factor: f32,
    first_loss: Option<f32>,
}

impl Optimizer {
    pub fn new(cfg: &OptimConfig) -> Result<Self> {
        let adam = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..AdamWConfig::default()
        });
        Ok(Optimizer {
            adam,
            schedule: LrSchedule::new(
                cfg.lr,
                cfg.warmup_steps,
                cfg.steps.max(cfg.warmup_steps + 1),
            )?,
            factor: cfg.divergence_factor,
            first_loss: None,
        })
    }

    /// Check `loss`, then update `params` for 0-based `step`. Returns the
    /// learning rate used.
    pub fn step(
        &mut self,
        step: usize,
        loss: f32,
        params: &mut ParamStore,
        grads: &mut BTreeMap<String, Tensor>,
    ) -> Result<f32> {
        let first = *self.first_loss.get_or_insert(loss);
        let limit = self.factor * first;
        if !loss.is_finite() || loss > limit {
            log::error!("loss {loss} at step {step} exceeds {limit} (first loss {first})");
            return Err(Error::Diverged { step, loss, limit });
        }
        let lr = self.schedule.lr_at(step + 1);
        self.adam.step(params, grads, lr)?;
        Ok(lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub metric: f32,
}

/// Per-step training metrics, written as CSV `step,loss,lr,<metric>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: String,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn new(metric: &str) -> Self {
        TrainLog {
            metric: metric.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, loss: f32, lr: f32, metric: f32) {
        self.rows.push(LogRow {
            step,
            loss,
            lr,
            metric,
        });
    }

    pub fn losses(&self) -> Vec<f32> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,loss,lr,{}\n", self.metric);
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.8},{:.6}", r.step, r.loss, r.lr, r.metric).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
