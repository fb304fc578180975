use std::path::Path;

use super::shard::{ShardWriter, TokenCursor, TokenShard};
use crate::error::{Error, Result};
use crate::rng::mix64;

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Vec<TokenShard>,
    pub val: Vec<TokenShard>,
    pub train_docs: u64,
    pub val_docs: u64,
    pub train_tokens: u64,
    pub val_tokens: u64,
}

impl SplitOutcome {
    pub fn train_share(&self) -> f64 {
        self.train_tokens as f64 / (self.train_tokens + self.val_tokens).max(1) as f64
    }
}

/// Whether document `ordinal` lands in the training set.
pub fn assign_train(ordinal: u64, train_ratio: f64, seed: u64) -> bool {
    let h = mix64(seed ^ mix64(ordinal));
    // top 53 bits → uniform in [0, 1)
    ((h >> 11) as f64 / (1u64 << 53) as f64) < train_ratio
}

/// Route each document of a shard stream to the train or validation output
/// by a seeded hash of its ordinal.
pub fn split_dataset(
    shards: &[TokenShard],
    train_ratio: f64,
    seed: u64,
    train_dir: &Path,
    val_dir: &Path,
    shard_size_limit: u64,
) -> Result<SplitOutcome> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train ratio {train_ratio} must lie strictly between 0 and 1"
        )));
    }
    let eot = crate::tokenizer::EOT_ID;
    let mut cursor = TokenCursor::new(shards);
    let mut train = ShardWriter::new(train_dir, shard_size_limit)?;
    let mut val = ShardWriter::new(val_dir, shard_size_limit)?;
    let (mut train_docs, mut val_docs, mut train_tokens, mut val_tokens) = (0, 0, 0, 0);
    let mut ordinal = 0u64;
    while let Some(doc) = cursor.next_document(eot)? {
        if assign_train(ordinal, train_ratio, seed) {
            train.write_tokens(&doc)?;
            train_docs += 1;
            train_tokens += doc.len() as u64;
        } else {
            val.write_tokens(&doc)?;
            val_docs += 1;
            val_tokens += doc.len() as u64;
        }
        ordinal += 1;
    }
    if ordinal == 0 {
        return Err(Error::InvalidInput("split input has no documents".into()));
    }
    Ok(SplitOutcome {
        train: train.finish()?,
        val: val.finish()?,
        train_docs,
        val_docs,
        train_tokens,
        val_tokens,
    })
}
