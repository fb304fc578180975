use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_repeat_penalty, sample_token};
use crate::error::{Error, Result};
use crate::model::kernels::{gelu, layernorm_forward, linear};
use crate::model::ModelWeights;
use crate::rng;
use crate::tensor::matmul;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    /// 0 selects greedy decoding.
    pub temperature: f32,
    pub repeat_penalty: f32,
    /// Number of most recent tokens the repeat penalty looks at.
    pub repeat_window: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Worker threads for matrix products; 0 uses the ambient pool.
    pub thread_count: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            repeat_penalty: 1.1,
            repeat_window: 64,
            max_new_tokens: 300,
            seed: 0,
            thread_count: 2,
        }
    }
}

impl GenerationParams {
    /// Greedy decoding without a repeat penalty.
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            repeat_penalty: 1.0,
            max_new_tokens,
            thread_count: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be ≥ 0", self.temperature)));
        }
        if !(self.repeat_penalty >= 1.0 && self.repeat_penalty.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "repeat penalty {} must be ≥ 1",
                self.repeat_penalty
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub generated_ids: Vec<u32>,
    pub generated_text: String,
    /// Seconds spent evaluating the prompt.
    pub prompt_eval_time: f64,
    /// Seconds spent producing new tokens.
    pub eval_time: f64,
    pub prompt_eval_rate: f64,
    pub eval_rate: f64,
    pub wall_time: f64,
}

/// Per-layer keys and values for positions seen so far.
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    c: usize,
    capacity: usize,
}

impl KvCache {
    pub fn new(w: &ModelWeights) -> Self {
        let cfg = &w.config;
        let size = cfg.max_seq_len * cfg.n_embd;
        Self {
            keys: (0..cfg.n_layer).map(|_| vec![0.0; size]).collect(),
            values: (0..cfg.n_layer).map(|_| vec![0.0; size]).collect(),
            len: 0,
            c: cfg.n_embd,
            capacity: cfg.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }

    /// Feed `tokens` at the next positions and return logits for every new
    /// position (`tokens.len() × V`).
    pub fn extend(&mut self, w: &ModelWeights, tokens: &[u32]) -> Result<Vec<f32>> {
        self.extend_rows(w, tokens, false)
    }

    fn extend_rows(&mut self, w: &ModelWeights, tokens: &[u32], last_only: bool) -> Result<Vec<f32>> {
        let cfg = &w.config;
        let (c, n, p0) = (self.c, tokens.len(), self.len);
        if p0 + n > self.capacity {
            return Err(Error::ContextOverflow {
                len: p0 + n,
                ctx: self.capacity,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let (h, hd) = (cfg.n_head, cfg.head_dim());
        let mut x = vec![0.0f32; n * c];
        for (i, &t) in tokens.iter().enumerate() {
            let te = &w.token_embedding.data()[t as usize * c..(t as usize + 1) * c];
            let pe = &w.position_embedding.data()[(p0 + i) * c..(p0 + i + 1) * c];
            for j in 0..c {
                x[i * c + j] = te[j] + pe[j];
            }
        }
        let mut normed = vec![0.0; n * c];
        for (l, blk) in w.blocks.iter().enumerate() {
            layernorm_forward(&x, blk.ln1_g.data(), blk.ln1_b.data(), &mut normed, c);
            let qkv = linear(&normed, blk.qkv_w.data(), blk.qkv_b.data(), n, c, 3 * c);
            for i in 0..n {
                let row = &qkv[i * 3 * c..(i + 1) * 3 * c];
                let p = p0 + i;
                self.keys[l][p * c..(p + 1) * c].copy_from_slice(&row[c..2 * c]);
                self.values[l][p * c..(p + 1) * c].copy_from_slice(&row[2 * c..]);
            }
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let scale = 1.0 / (hd as f32).sqrt();
            let mut att = vec![0.0f32; n * c];
            att.par_chunks_mut(hd).enumerate().for_each(|(idx, out)| {
                let (i, head) = (idx / h, idx % h);
                let span = p0 + i + 1;
                let q = &qkv[i * 3 * c + head * hd..i * 3 * c + (head + 1) * hd];
                let mut scores: Vec<f32> = (0..span)
                    .map(|j| {
                        let k = &keys[j * c + head * hd..j * c + (head + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let v = &values[j * c + head * hd..j * c + (head + 1) * hd];
                    let wgt = s / sum;
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += wgt * vv;
                    }
                }
            });
            let proj = linear(&att, blk.proj_w.data(), blk.proj_b.data(), n, c, c);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            layernorm_forward(&x, blk.ln2_g.data(), blk.ln2_b.data(), &mut normed, c);
            let mut up = linear(&normed, blk.up_w.data(), blk.up_b.data(), n, c, 4 * c);
            up.iter_mut().for_each(|v| *v = gelu(*v));
            let down = linear(&up, blk.down_w.data(), blk.down_b.data(), n, 4 * c, c);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        layernorm_forward(&x, w.lnf_g.data(), w.lnf_b.data(), &mut normed, c);
        self.len += n;
        let v = cfg.vocab_size;
        let rows = if last_only { 1 } else { n };
        let hidden = &normed[(n - rows) * c..];
        let mut logits = vec![0.0; rows * v];
        matmul(rows, c, v, hidden, false, w.token_embedding.data(), true, &mut logits, false);
        Ok(logits)
    }

    /// Like [`KvCache::extend`] but only returns logits of the last position.
    pub fn extend_last(&mut self, w: &ModelWeights, tokens: &[u32]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate an empty token sequence".into()));
        }
        let mut logits = self.extend_rows(w, tokens, true)?;
        let v = w.config.vocab_size;
        Ok(logits.split_off(logits.len() - v))
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn rate(count: usize, seconds: f64) -> f64 {
    if seconds > 0.0 {
        count as f64 / seconds
    } else {
        0.0
    }
}

/// Autoregressive generation from token ids. Stops after `max_new_tokens`
/// or once the end-of-text token is produced (it is counted).
pub fn generate_ids(
    model: &ModelWeights,
    prompt: &[u32],
    eot: u32,
    p: &GenerationParams,
) -> Result<(Vec<u32>, f64, f64)> {
    p.validate()?;
    let ctx = model.config.max_seq_len;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt encodes to zero tokens".into()));
    }
    if prompt.len() >= ctx {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            ctx,
        });
    }
    let run = || -> Result<(Vec<u32>, f64, f64)> {
        let mut rng = rng::stream(p.seed);
        let mut cache = KvCache::new(model);
        let mut history = prompt.to_vec();
        let t0 = Instant::now();
        let mut logits = cache.extend_last(model, prompt)?;
        let prompt_time = secs(t0.elapsed());
        let t1 = Instant::now();
        let mut out = Vec::with_capacity(p.max_new_tokens);
        loop {
            let window = &history[history.len().saturating_sub(p.repeat_window)..];
            apply_repeat_penalty(&mut logits, window, p.repeat_penalty);
            let next = sample_token(&logits, p, &mut rng);
            out.push(next);
            history.push(next);
            if next == eot || out.len() >= p.max_new_tokens {
                break;
            }
            logits = if cache.len() < ctx {
                cache.extend_last(model, &[next])?
            } else {
                // Positions are absolute, so a full cache is rebuilt from the
                // most recent `ctx` tokens.
                cache.clear();
                cache.extend_last(model, &history[history.len() - ctx..])?
            };
        }
        Ok((out, prompt_time, secs(t1.elapsed())))
    };
    if p.thread_count == 0 {
        run()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(p.thread_count)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(run)
    }
}

/// Encode `prompt`, generate, and report counts and timings.
pub fn generate(
    model: &ModelWeights,
    tok: &Tokenizer,
    prompt: &str,
    p: &GenerationParams,
) -> Result<GenerationReport> {
    let start = Instant::now();
    let ids = tok.encode(prompt);
    let (generated, prompt_time, eval_time) = generate_ids(model, &ids, tok.eot_id(), p)?;
    let text_ids: Vec<u32> = generated
        .iter()
        .copied()
        .take_while(|&t| t != tok.eot_id())
        .collect();
    let eval_rate = rate(generated.len(), eval_time);
    Ok(GenerationReport {
        prompt_tokens: ids.len(),
        generated_tokens: generated.len(),
        generated_text: tok.decode(&text_ids)?,
        generated_ids: generated,
        prompt_eval_time: prompt_time,
        eval_time,
        prompt_eval_rate: rate(ids.len(), prompt_time),
        eval_rate,
        wall_time: secs(start.elapsed()),
    })
}
