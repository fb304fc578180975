use std::path::{Path, PathBuf};

use rand::Rng;

use super::shard::{list_shards, ShardWriter, TokenCursor, TokenShard};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MixSource {
    pub dir: PathBuf,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub sources: Vec<MixSource>,
    pub seed: u64,
    pub target_tokens: Option<u64>,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidConfig("mix needs at least one source".into()));
        }
        if let Some(s) = self.sources.iter().find(|s| !(0.0..=1.0).contains(&s.ratio)) {
            return Err(Error::InvalidConfig(format!(
                "ratio {} for {} outside [0, 1]",
                s.ratio,
                s.dir.display()
            )));
        }
        let total: f64 = self.sources.iter().map(|s| s.ratio).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("ratios sum to {total}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub shards: Vec<TokenShard>,
    pub tokens_per_source: Vec<u64>,
    pub docs_per_source: Vec<u64>,
}

impl MixOutcome {
    pub fn total_tokens(&self) -> u64 {
        self.tokens_per_source.iter().sum()
    }

    /// Realized token share of each source.
    pub fn shares(&self) -> Vec<f64> {
        let total = self.total_tokens().max(1) as f64;
        self.tokens_per_source
            .iter()
            .map(|&t| t as f64 / total)
            .collect()
    }
}

struct SourceState {
    cursor: TokenCursor,
    ratio: f64,
    pending: Option<Vec<u32>>,
    tokens: u64,
    docs: u64,
}

impl SourceState {
    /// Mean document length seen so far, counting the pending document.
    fn mean_doc_len(&self) -> f64 {
        let pending = self.pending.as_ref().map_or(0, Vec::len) as f64;
        (self.tokens as f64 + pending) / (self.docs + 1) as f64
    }
}

/// Interleave whole documents from several shard streams by ratio.
///
/// Each draw picks a source with probability proportional to
/// `ratio / mean_doc_len`, so realized *token* shares follow the ratios even
/// when sources differ in document length (with equal lengths this is a
/// plain categorical draw over the ratios). Exhausted sources drop out and
/// the remaining weights renormalize.
pub fn mix_shards(spec: &MixSpec, out_dir: &Path, shard_size_limit: u64) -> Result<MixOutcome> {
    spec.validate()?;
    let eot = crate::tokenizer::EOT_ID;
    let mut sources = Vec::with_capacity(spec.sources.len());
    for s in &spec.sources {
        let shards = list_shards(&s.dir)?;
        if shards.iter().all(|sh| sh.token_count == 0) {
            return Err(Error::InvalidInput(format!(
                "empty source: {} has no tokens",
                s.dir.display()
            )));
        }
        let mut cursor = TokenCursor::new(&shards);
        let pending = cursor.next_document(eot)?;
        sources.push(SourceState {
            cursor,
            ratio: s.ratio,
            pending,
            tokens: 0,
            docs: 0,
        });
    }

    let mut rng = rng::stream(spec.seed);
    let mut writer = ShardWriter::new(out_dir, shard_size_limit)?;
    let mut written = 0u64;
    loop {
        if spec.target_tokens.is_some_and(|t| written >= t) {
            break;
        }
        let weights: Vec<f64> = sources
            .iter()
            .map(|s| match s.pending {
                Some(_) if s.ratio > 0.0 => s.ratio / s.mean_doc_len(),
                _ => 0.0,
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 && u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        // Guard against landing on a zero-weight tail through rounding.
        while weights[pick] == 0.0 {
            pick -= 1;
        }

        let src = &mut sources[pick];
        let doc = src.pending.take().expect("picked source has a document");
        writer.write_tokens(&doc)?;
        written += doc.len() as u64;
        src.tokens += doc.len() as u64;
        src.docs += 1;
        src.pending = src.cursor.next_document(eot)?;
        if src.pending.is_none() {
            log::warn!(
                "mix source {} exhausted after {} tokens; renormalizing remaining ratios",
                spec.sources[pick].dir.display(),
                src.tokens
            );
        }
    }

    Ok(MixOutcome {
        shards: writer.finish()?,
        tokens_per_source: sources.iter().map(|s| s.tokens).collect(),
        docs_per_source: sources.iter().map(|s| s.docs).collect(),
    })
}
