use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{adamw_step, clip_gradients, lr_at, OptimizerState, TrainHyper};
use crate::data::{TokenCursor, TokenShard};
use crate::error::{Error, Result};
use crate::model::{
    init_model, loss_and_grads, masked_loss, GradMode, ModelConfig, ModelWeights, TokenBatch,
};

/// Sequential reader yielding `batch × seq` windows with next-token
/// targets. Consecutive batches share one boundary token, so the stream is
/// consumed without gaps.
pub struct BatchReader {
    cursor: TokenCursor,
    batch: usize,
    seq: usize,
    carry: Option<u32>,
}

impl BatchReader {
    pub fn new(shards: &[TokenShard], batch: usize, seq: usize) -> Self {
        Self {
            cursor: TokenCursor::new(shards),
            batch,
            seq,
            carry: None,
        }
    }

    pub fn reset(&mut self) {
        self.cursor.reset();
        self.carry = None;
    }

    /// `None` once fewer than `batch·seq + 1` tokens remain.
    pub fn next_batch(&mut self) -> Result<Option<TokenBatch>> {
        let n = self.batch * self.seq;
        let mut buf = vec![0u32; n + 1];
        let start = match self.carry {
            Some(t) => {
                buf[0] = t;
                1
            }
            None => 0,
        };
        let got = self.cursor.read_into(&mut buf[start..])?;
        if start + got < n + 1 {
            return Ok(None);
        }
        self.carry = Some(buf[n]);
        let targets = buf[1..].to_vec();
        buf.truncate(n);
        TokenBatch::new(self.batch, self.seq, buf, Some(targets)).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f32,
    pub grad_norm: f64,
    pub val_loss: Option<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<LossRow>,
    pub checkpoint: PathBuf,
    pub steps_completed: usize,
}

/// Write `step,lr,train_loss,grad_norm[,val_loss]`; the last column is
/// present when any row carries a validation loss.
pub fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let with_val = rows.iter().any(|r| r.val_loss.is_some());
    let mut w = csv::Writer::from_path(path)?;
    if with_val {
        w.write_record(["step", "lr", "train_loss", "grad_norm", "val_loss"])?;
    } else {
        w.write_record(["step", "lr", "train_loss", "grad_norm"])?;
    }
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            format!("{:e}", r.lr),
            r.train_loss.to_string(),
            r.grad_norm.to_string(),
        ];
        if with_val {
            rec.push(r.val_loss.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train a freshly initialized model; see [`train_from`].
pub fn train(
    cfg: &ModelConfig,
    train_shards: &[TokenShard],
    val_shards: &[TokenShard],
    h: &TrainHyper,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let w = init_model(cfg, h.seed)?;
    train_from(w, train_shards, val_shards, h, out_dir)
}

fn validation_loss(w: &ModelWeights, reader: &mut BatchReader, batches: usize) -> Result<Option<f32>> {
    reader.reset();
    let mut total = 0.0f64;
    let mut n = 0usize;
    while n < batches.max(1) {
        let Some(b) = reader.next_batch()? else { break };
        total += f64::from(masked_loss(w, None, &b)?);
        n += 1;
    }
    Ok((n > 0).then(|| (total / n as f64) as f32))
}

/// Run `h.total_steps` optimizer steps over the training shards in order.
/// Writes `model.ckpt` and `loss.csv` into `out_dir`, plus
/// `ckpt_step{N}.ckpt` every `checkpoint_interval` steps.
pub fn train_from(
    mut w: ModelWeights,
    train_shards: &[TokenShard],
    val_shards: &[TokenShard],
    h: &TrainHyper,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    h.validate()?;
    w.config.validate()?;
    if train_shards.is_empty() {
        return Err(Error::InvalidInput("no training shards".into()));
    }
    if h.seq_len > w.config.max_seq_len {
        return Err(Error::ContextOverflow {
            len: h.seq_len,
            ctx: w.config.max_seq_len,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join("model.ckpt");
    let log_path = out_dir.join("loss.csv");

    let mut reader = BatchReader::new(train_shards, h.micro_batch, h.seq_len);
    let mut val_reader = (!val_shards.is_empty() && h.val_interval > 0)
        .then(|| BatchReader::new(val_shards, h.micro_batch, h.seq_len));
    let mut state = OptimizerState::new(w.tensors());
    let mut log = Vec::new();
    let mut completed = 0;

    for step in 0..h.total_steps {
        let Some(batch) = reader.next_batch()? else {
            log::warn!(
                "training shards exhausted after {step} of {} steps; stopping early",
                h.total_steps
            );
            break;
        };
        let lr = lr_at(step, h)?;
        let (loss, grads) = loss_and_grads(&w, None, &batch, GradMode::FULL, None)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let mut g = grads.base.expect("full gradients requested");
        let grad_norm = {
            let mut gt = g.tensors_mut();
            match clip_gradients(&mut gt, h.grad_clip_norm) {
                Ok(n) => n,
                Err(Error::NonFiniteGradient) => {
                    log::warn!("non-finite gradient at step {step}; skipping update");
                    completed = step + 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
        };
        {
            let gt = g.tensors();
            let mut pt = w.tensors_mut();
            adamw_step(&mut pt, &gt, &mut state, lr, h)?;
        }
        completed = step + 1;

        let val_loss = match val_reader.as_mut() {
            Some(vr) if completed % h.val_interval == 0 || completed == h.total_steps => {
                let v = validation_loss(&w, vr, h.val_batches)?;
                if v.is_none() {
                    log::warn!("validation shards hold less than one batch");
                }
                v
            }
            _ => None,
        };
        let level = if val_loss.is_some() || completed % 50 == 0 {
            log::Level::Info
        } else {
            log::Level::Debug
        };
        log::log!(
            level,
            "step {completed}/{} lr {lr:.3e} loss {loss:.4} norm {grad_norm:.3}{}",
            h.total_steps,
            val_loss.map(|v| format!(" val {v:.4}")).unwrap_or_default()
        );
        log.push(LossRow {
            step,
            lr,
            train_loss: loss,
            grad_norm,
            val_loss,
        });
        if h.checkpoint_interval > 0 && completed % h.checkpoint_interval == 0 {
            w.save(&out_dir.join(format!("ckpt_step{completed}.ckpt")))?;
        }
    }

    w.save(&checkpoint)?;
    write_loss_log(&log_path, &log)?;
    Ok(TrainOutcome {
        weights: w,
        log,
        checkpoint,
        steps_completed: completed,
    })
}
