use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::GPT2_VOCAB_SIZE;

/// Depths of the reference model family (hidden size `64·l`).
pub const TABLE_DEPTHS: [usize; 5] = [6, 8, 10, 11, 12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub n_layer: usize,
    /// Hidden size.
    pub n_embd: usize,
    pub vocab_size: usize,
    /// Maximum context length.
    pub max_seq_len: usize,
    pub n_head: usize,
}

impl ModelConfig {
    /// `C = 64·l`, head size 64, GPT-2 vocabulary and a 1,024-token window.
    pub fn family(n_layer: usize) -> Self {
        Self {
            n_layer,
            n_embd: 64 * n_layer,
            vocab_size: GPT2_VOCAB_SIZE,
            max_seq_len: 1024,
            n_head: n_layer,
        }
    }

    /// Arbitrary width with 64-wide heads where possible.
    pub fn custom(n_layer: usize, n_embd: usize, max_seq_len: usize) -> Self {
        let n_head = if n_embd % 64 == 0 { n_embd / 64 } else { 1 };
        Self {
            n_layer,
            n_embd,
            vocab_size: GPT2_VOCAB_SIZE,
            max_seq_len,
            n_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(1..=64).contains(&self.n_layer) {
            return bad(format!("layer count {} outside 1..=64", self.n_layer));
        }
        if self.n_embd == 0 || self.n_head == 0 || self.n_embd % self.n_head != 0 {
            return bad(format!(
                "hidden size {} not divisible into {} heads",
                self.n_embd, self.n_head
            ));
        }
        if self.max_seq_len == 0 {
            return bad("context length must be ≥ 1".into());
        }
        if self.vocab_size == 0 || self.vocab_size > usize::from(u16::MAX) + 1 {
            return bad(format!("vocab size {} unsupported", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }
}

/// Exact trainable parameter count, head tied to the token embedding.
pub fn param_count_exact(cfg: &ModelConfig) -> u64 {
    let c = cfg.n_embd as u64;
    let per_block = 2 * c          // ln1
        + c * 3 * c + 3 * c        // qkv
        + c * c + c                // attention projection
        + 2 * c                    // ln2
        + c * 4 * c + 4 * c        // ffn up
        + 4 * c * c + c; // ffn down
    cfg.vocab_size as u64 * c
        + cfg.max_seq_len as u64 * c
        + cfg.n_layer as u64 * per_block
        + 2 * c
}

/// Count using the per-block approximation `12C² + 12C`.
pub fn param_count_approx(cfg: &ModelConfig) -> u64 {
    let c = cfg.n_embd as u64;
    cfg.n_layer as u64 * (12 * c * c + 12 * c)
        + cfg.vocab_size as u64 * c
        + cfg.max_seq_len as u64 * c
        + 2 * c
}

/// Empirical size of the `C = 64·l` family in millions: `0.05·l³ + 3.2·l`.
pub fn param_count_empirical(n_layer: usize) -> f64 {
    let l = n_layer as f64;
    0.05 * l * l * l + 3.2 * l
}
