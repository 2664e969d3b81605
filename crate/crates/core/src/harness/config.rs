//! Training configuration and its fingerprint.

use crate::error::{Error, Result};
use crate::matching::{DetLossWeights, LossWeights, MatchWeights};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub reversal_strength: f64,
    pub match_weights: MatchWeights,
    pub det_weights: DetLossWeights,
    /// Per-decoder-block auxiliary detection losses (off by default).
    pub aux_loss: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Fraction of each step's iterations after which the learning rate
    /// decays once.
    pub lr_decay_frac: f64,
    pub batch_per_domain: usize,
    pub step1_iters: usize,
    pub step2_iters: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            reversal_strength: 0.5,
            match_weights: MatchWeights::default(),
            det_weights: DetLossWeights::default(),
            aux_loss: false,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_frac: 2.0 / 3.0,
            batch_per_domain: 4,
            step1_iters: 2000,
            step2_iters: 2000,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

fn fnv1a_str(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_per_domain == 0 {
            return Err(Error::config("batch_per_domain must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.lr)));
        }
        if self.reversal_strength < 0.0 {
            return Err(Error::config("reversal_strength must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_frac) {
            return Err(Error::config("lr_decay_frac must be in [0, 1]"));
        }
        Ok(())
    }

    /// Stable hash of the full configuration, stamped into checkpoints,
    /// logs and evaluation results.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a_str(&json))
    }

    /// Learning rate at `iter` of a step of `total` iterations.
    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        let decay_at = (total as f64 * self.lr_decay_frac).round() as usize;
        if iter >= decay_at && decay_at < total {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}
