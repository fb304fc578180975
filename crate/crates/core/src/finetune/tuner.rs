use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{render_prompt, FinetuneRecord, LoraAdapter, Projection};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, masked_loss, GradMode, ModelWeights, TokenBatch, IGNORE_INDEX};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;
use crate::train::{adamw_step, clip_gradients, OptimizerState, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub targets: Vec<Projection>,
    pub lr: f64,
    /// Optimizer steps; each accumulates `grad_accum` micro-batches.
    pub steps: usize,
    pub grad_accum: usize,
    /// Records per micro-batch.
    pub batch: usize,
    pub seed: u64,
    /// Optimizer steps between evaluations; the final step is always
    /// evaluated.
    pub eval_interval: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            targets: vec![Projection::Qkv, Projection::AttnProj],
            lr: 5e-4,
            steps: 200,
            grad_accum: 6,
            batch: 4,
            seed: 1337,
            eval_interval: 10,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0
            || !(self.alpha > 0.0)
            || !(0.0..1.0).contains(&self.dropout)
            || self.grad_accum == 0
            || self.batch == 0
            || self.targets.is_empty()
            || !(self.lr > 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "invalid LoRA config: r={}, alpha={}, dropout={}, grad_accum={}, batch={}, targets={:?}, lr={}",
                self.rank, self.alpha, self.dropout, self.grad_accum, self.batch, self.targets, self.lr
            )));
        }
        Ok(())
    }
}

/// Token ids of a rendered record; the first `prompt_len` belong to the
/// prompt and are excluded from the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

pub fn encode_record(tok: &Tokenizer, rec: &FinetuneRecord) -> EncodedRecord {
    let mut tokens = tok.encode(&render_prompt(rec, false));
    let prompt_len = tokens.len();
    tokens.extend(tok.encode(&rec.response));
    tokens.push(tok.eot_id());
    EncodedRecord { tokens, prompt_len }
}

/// Pad a group of records into one batch. Targets are next tokens inside
/// the response region and [`IGNORE_INDEX`] elsewhere.
fn collate(records: &[&EncodedRecord], pad: u32) -> Result<TokenBatch> {
    let seq = records.iter().map(|r| r.tokens.len() - 1).max().unwrap_or(0);
    let mut tokens = Vec::with_capacity(records.len() * seq);
    let mut targets = Vec::with_capacity(records.len() * seq);
    for r in records {
        let n = r.tokens.len() - 1;
        tokens.extend_from_slice(&r.tokens[..n]);
        tokens.extend(std::iter::repeat_n(pad, seq - n));
        for i in 0..n {
            targets.push(if i + 1 >= r.prompt_len { r.tokens[i + 1] } else { IGNORE_INDEX });
        }
        targets.extend(std::iter::repeat_n(IGNORE_INDEX, seq - n));
    }
    TokenBatch::new(records.len(), seq, tokens, Some(targets))
}

fn target_count(b: &TokenBatch) -> usize {
    b.targets
        .as_ref()
        .map_or(0, |t| t.iter().filter(|&&t| t != IGNORE_INDEX).count())
}

/// Keeps the snapshot with the lowest loss seen so far. Ties keep the
/// earlier snapshot.
#[derive(Debug, Clone)]
pub struct BestTracker<T> {
    pub best_loss: f32,
    pub best_step: Option<usize>,
    pub best: T,
}

impl<T> BestTracker<T> {
    pub fn new(initial: T) -> Self {
        Self {
            best_loss: f32::INFINITY,
            best_step: None,
            best: initial,
        }
    }

    pub fn observe(&mut self, step: usize, loss: f32, snapshot: impl FnOnce() -> T) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_step = Some(step);
            self.best = snapshot();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f32,
    pub eval_loss: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Adapter from the step with the lowest evaluation loss.
    pub adapter: LoraAdapter,
    pub best_step: Option<usize>,
    pub best_eval_loss: Option<f32>,
    pub metrics: Vec<MetricsRow>,
    pub skipped_records: usize,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss", "eval_loss"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.eval_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode_fitting(
    tok: &Tokenizer,
    records: &[FinetuneRecord],
    ctx: usize,
) -> (Vec<EncodedRecord>, usize) {
    let mut kept = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        let e = encode_record(tok, r);
        if e.tokens.len() - 1 > ctx {
            skipped += 1;
        } else {
            kept.push(e);
        }
    }
    (kept, skipped)
}

fn eval_loss(
    base: &ModelWeights,
    adapter: &LoraAdapter,
    records: &[EncodedRecord],
    batch: usize,
    pad: u32,
) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for group in records.chunks(batch) {
        let refs: Vec<&EncodedRecord> = group.iter().collect();
        let b = collate(&refs, pad)?;
        let n = target_count(&b);
        total += f64::from(masked_loss(base, Some(adapter), &b)?) * n as f64;
        count += n;
    }
    Ok((total / count.max(1) as f64) as f32)
}

/// Train a LoRA adapter on `train` with the base model frozen. The loss
/// covers response tokens only. Evaluation loss on `val` (or on `train`
/// when `val` is empty) selects the returned adapter.
pub fn finetune(
    base: &ModelWeights,
    cfg: &LoraConfig,
    tok: &Tokenizer,
    train: &[FinetuneRecord],
    val: &[FinetuneRecord],
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let ctx = base.config.max_seq_len;
    let (train_enc, skipped) = encode_fitting(tok, train, ctx);
    if train_enc.is_empty() {
        return Err(Error::ContextOverflow {
            len: train.iter().map(|r| encode_record(tok, r).tokens.len()).min().unwrap_or(0),
            ctx,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} training records longer than the {ctx}-token context");
    }
    let (mut val_enc, _) = encode_fitting(tok, val, ctx);
    if val_enc.is_empty() {
        log::warn!("no usable evaluation records; selecting by training-set loss");
        val_enc = train_enc.clone();
    }

    let mut adapter = LoraAdapter::new(
        &base.config,
        cfg.rank,
        cfg.alpha,
        &cfg.targets,
        derive_seed(cfg.seed, "lora-init"),
    )?;
    adapter.dropout = cfg.dropout;
    let pad = tok.eot_id();
    let mut order_rng = rng::stream(derive_seed(cfg.seed, "lora-order"));
    let mut dropout_rng = rng::stream(derive_seed(cfg.seed, "lora-dropout"));
    let mut order: Vec<usize> = Vec::new();
    let mut next_record = move |n: usize| -> usize {
        if order.is_empty() {
            order = (0..n).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        order.pop().expect("refilled")
    };

    let hyper = TrainHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
        ..TrainHyper::default()
    };
    let mut state = OptimizerState::new(adapter.tensors());
    let mut tracker = BestTracker::new(adapter.clone());
    let mut metrics = Vec::new();

    for step in 1..=cfg.steps {
        let mut acc = adapter.zeros_like();
        let mut loss_sum = 0.0f64;
        for _ in 0..cfg.grad_accum {
            let picks: Vec<&EncodedRecord> = (0..cfg.batch)
                .map(|_| &train_enc[next_record(train_enc.len())])
                .collect();
            let b = collate(&picks, pad)?;
            let (loss, g) = loss_and_grads(
                base,
                Some(&adapter),
                &b,
                GradMode::ADAPTER_ONLY,
                Some(&mut dropout_rng),
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            loss_sum += f64::from(loss);
            let g = g.adapter.expect("adapter gradients requested");
            let inv = 1.0 / cfg.grad_accum as f32;
            for (a, gi) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                    *x += y * inv;
                }
            }
        }
        let train_loss = (loss_sum / cfg.grad_accum as f64) as f32;
        let clipped = {
            let mut gt: Vec<&mut Tensor> = acc.tensors_mut();
            clip_gradients(&mut gt, cfg.grad_clip_norm)
        };
        match clipped {
            Ok(_) => {
                let gt = acc.tensors();
                let mut pt = adapter.tensors_mut();
                adamw_step(&mut pt, &gt, &mut state, cfg.lr, &hyper)?;
            }
            Err(Error::NonFiniteGradient) => {
                log::warn!("non-finite adapter gradient at step {step}; skipping update");
            }
            Err(e) => return Err(e),
        }

        let eval = if step % cfg.eval_interval.max(1) == 0 || step == cfg.steps {
            let l = eval_loss(base, &adapter, &val_enc, cfg.batch, pad)?;
            tracker.observe(step, l, || adapter.clone());
            Some(l)
        } else {
            None
        };
        let level = if eval.is_some() { log::Level::Info } else { log::Level::Debug };
        log::log!(
            level,
            "finetune step {step}/{} train {train_loss:.4}{}",
            cfg.steps,
            eval.map(|v| format!(" eval {v:.4}")).unwrap_or_default()
        );
        metrics.push(MetricsRow {
            step,
            train_loss,
            eval_loss: eval,
        });
    }

    let mut best = tracker.best;
    best.dropout = 0.0;
    Ok(FinetuneOutcome {
        adapter: best,
        best_step: tracker.best_step,
        best_eval_loss: tracker.best_step.map(|_| tracker.best_loss),
        metrics,
        skipped_records: skipped,
    })
}
