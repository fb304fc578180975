use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub micro_batch: usize,
    pub seq_len: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub grad_clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between validation passes; 0 disables them.
    pub val_interval: usize,
    /// Batches averaged per validation pass.
    pub val_batches: usize,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            micro_batch: 64,
            seq_len: 1024,
            total_steps: 20_000,
            warmup_steps: 700,
            lr_max: 6e-4,
            lr_min: 6e-5,
            grad_clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            seed: 1337,
            val_interval: 250,
            val_batches: 20,
            checkpoint_interval: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.micro_batch == 0 || self.seq_len == 0 {
            return bad("micro_batch and seq_len must be positive".into());
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 ≤ lr_min ≤ lr_max (got {} and {})",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min`.
pub fn lr_at(step: usize, h: &TrainHyper) -> Result<f64> {
    if step >= h.total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} outside [0, {})",
            h.total_steps
        )));
    }
    if step < h.warmup_steps {
        return Ok(h.lr_max * (step + 1) as f64 / h.warmup_steps as f64);
    }
    // The decay spans the remaining steps so that the last step lands
    // exactly on `lr_min`.
    let span = h.total_steps - h.warmup_steps - 1;
    let progress = if span == 0 {
        1.0
    } else {
        (step - h.warmup_steps) as f64 / span as f64
    };
    Ok(h.lr_min + 0.5 * (h.lr_max - h.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
