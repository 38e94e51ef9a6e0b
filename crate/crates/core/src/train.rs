//! Shared optimisation settings and helpers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gasr_tensor::{clip_grad_norm, Adam, AdamConfig, ParamStore};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Learning rate at the last step, as a fraction of `lr` (linear decay after warmup).
    pub final_lr_fraction: f64,
    pub clip: f64,
    /// Stop after this many epochs without dev improvement (0 disables).
    pub patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!("bad optimiser settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let step = step + 1;
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * (1.0 - progress * (1.0 - self.final_lr_fraction))
    }
}

/// Adam plus schedule and clipping for one parameter store.
pub struct Optimizer {
    adam: Adam,
    cfg: TrainConfig,
    total_steps: usize,
    step: usize,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore<f32>, total_steps: usize) -> Self {
        Optimizer {
            adam: Adam::new(
                AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
                store,
            ),
            cfg: cfg.clone(),
            total_steps,
            step: 0,
        }
    }

    /// Clip, update and zero gradients. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<f64> {
        let norm = clip_grad_norm(store, self.cfg.clip);
        self.adam.set_lr(self.cfg.lr_at(self.step, self.total_steps));
        self.adam.step(store)?;
        self.step += 1;
        Ok(norm)
    }
}

pub fn shuffled_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Tab-separated log with a header row.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.join("\t")).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}
