//! Losses, the adapter-only Adam trainer, gradient checking and checkpoints.

mod checkpoint;
mod gradcheck;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{log_softmax, Mat, MelSpec, Model, NetError, Real, TrainSeq};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
    CheckpointMeta, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use train::{batch_gradients, train_stage, Adam, LossPoint, TrainReport};

/// Learning rate for adapters on a pretrained multi-billion-parameter backbone; far too small for the toy model.
pub const LARGE_MODEL_LR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} at update {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        loss: f64,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vsa,
    Gfc,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Vsa => "vsa",
            Stage::Gfc => "gfc",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vsa" => Ok(Stage::Vsa),
            "gfc" => Ok(Stage::Gfc),
            other => Err(format!("unknown stage {other:?} (expected vsa or gfc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_frac: f64,
    /// Examples per optimizer update.
    pub batch: usize,
    /// Micro-batches per update; `batch` is split evenly across them.
    pub grad_accum: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            warmup_frac: 0.05,
            batch: 32,
            grad_accum: 16,
            epochs: 5,
            seed: 7,
            stage: Stage::Gfc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)");
        }
        if self.batch == 0 || self.grad_accum == 0 {
            return bad("batch and grad_accum must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_frac * total_steps as f64).floor() as usize
    }
}

/// Linear ramp from 0 to `cfg.lr` over the first `floor(warmup_frac·total)` steps.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps(total_steps);
    if warm == 0 || step >= warm {
        cfg.lr
    } else {
        cfg.lr * step as f64 / warm as f64
    }
}

/// One clip and the supervised sequences that share its audio encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mel: MelSpec,
    pub seqs: Vec<TrainSeq>,
}

/// `−Σ_t ln softmax(logits_t)[y_t]` for one row of logits per target.
pub fn token_nll<T: Real>(logits: &Mat<T>, targets: &[u32]) -> f64 {
    assert_eq!(logits.rows, targets.len(), "one logit row per target");
    targets
        .iter()
        .enumerate()
        .map(|(r, &y)| -log_softmax(logits.row(r))[y as usize].f64())
        .sum()
}

/// Cross-entropy over target tokens, averaged over (clip, sequence) pairs.
pub fn ce_loss<T: Real>(model: &Model<T>, batch: &[Example]) -> Result<f64, OptimError> {
    let pairs: usize = batch.iter().map(|e| e.seqs.len()).sum();
    if pairs == 0 {
        return Err(OptimError::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        total += model.clip_nll(&ex.mel, &ex.seqs)?;
    }
    Ok(total / pairs as f64)
}

/// Direct preference loss on sequence log-probabilities.
pub fn dpo_loss(policy_logp_w: f64, policy_logp_l: f64, ref_logp_w: f64, ref_logp_l: f64, beta_dpo: f64) -> f64 {
    let margin = beta_dpo * ((policy_logp_w - ref_logp_w) - (policy_logp_l - ref_logp_l));
    // −ln σ(m) = ln(1 + e^(−m)), evaluated without overflow
    if margin >= 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}
