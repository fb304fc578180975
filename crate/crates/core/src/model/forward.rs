//! Forward pass with activation caching, cross-entropy, and the exact
//! backward pass. An optional LoRA adapter rides along on any of the four
//! block projections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{
    accumulate_bias_grad, add_bias, attention_backward, attention_forward, gelu, gelu_grad,
    layernorm_backward, layernorm_forward,
};
use super::weights::{BlockWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::finetune::{LoraAdapter, LoraLayer, Projection};
use crate::tensor::{matmul, Tensor};

/// Target value for positions excluded from the loss.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Positions per chunk when projecting hidden states onto the vocabulary.
const HEAD_CHUNK: usize = 256;

/// `batch × seq` token ids with optional next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u32>,
    pub targets: Option<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, tokens: Vec<u32>, targets: Option<Vec<u32>>) -> Result<Self> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for a {batch}×{seq} batch",
                tokens.len()
            )));
        }
        if targets.as_ref().is_some_and(|t| t.len() != tokens.len()) {
            return Err(Error::ShapeMismatch("targets differ in length from tokens".into()));
        }
        Ok(Self {
            batch,
            seq,
            tokens,
            targets,
        })
    }

    /// Single-row batch.
    pub fn single(tokens: Vec<u32>) -> Result<Self> {
        let seq = tokens.len();
        Self::new(1, seq, tokens, None)
    }

    fn rows(&self) -> usize {
        self.batch * self.seq
    }

    fn check(&self, w: &ModelWeights) -> Result<()> {
        let cfg = &w.config;
        if self.seq > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                len: self.seq,
                ctx: cfg.max_seq_len,
            });
        }
        let vocab = cfg.vocab_size;
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        if let Some(targets) = &self.targets {
            if let Some(&id) = targets
                .iter()
                .find(|&&t| t != IGNORE_INDEX && t as usize >= vocab)
            {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        Ok(())
    }
}

struct LoraCache {
    /// Input after dropout; absent when no dropout was applied.
    dropped: Option<Vec<f32>>,
    /// Dropout multipliers (0 or 1/(1-p)).
    mask: Option<Vec<f32>>,
    /// `x·Aᵀ`, rows × r.
    u: Vec<f32>,
}

struct LayerCache {
    x_in: Vec<f32>,
    ln1_mean: Vec<f32>,
    ln1_rstd: Vec<f32>,
    ln1_out: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    att_out: Vec<f32>,
    x_mid: Vec<f32>,
    ln2_mean: Vec<f32>,
    ln2_rstd: Vec<f32>,
    ln2_out: Vec<f32>,
    up_pre: Vec<f32>,
    up_act: Vec<f32>,
    lora: [Option<LoraCache>; 4],
}

/// Cached activations up to the final layernorm.
pub struct Hidden {
    batch: usize,
    seq: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    lnf_mean: Vec<f32>,
    lnf_rstd: Vec<f32>,
    /// Final normalized hidden states, `B·S × C`.
    pub lnf_out: Vec<f32>,
}

pub struct ForwardPass {
    /// `B × S × V`, row-major.
    pub logits: Vec<f32>,
    hidden: Hidden,
}

impl ForwardPass {
    pub fn hidden(&self) -> &Hidden {
        &self.hidden
    }
}

fn proj_index(p: Projection) -> usize {
    match p {
        Projection::Qkv => 0,
        Projection::AttnProj => 1,
        Projection::FfnUp => 2,
        Projection::FfnDown => 3,
    }
}

fn proj_weights(b: &BlockWeights, p: Projection) -> (&Tensor, &Tensor) {
    match p {
        Projection::Qkv => (&b.qkv_w, &b.qkv_b),
        Projection::AttnProj => (&b.proj_w, &b.proj_b),
        Projection::FfnUp => (&b.up_w, &b.up_b),
        Projection::FfnDown => (&b.down_w, &b.down_b),
    }
}

/// `y = x·W + b (+ s·(drop(x)·Aᵀ)·Bᵀ)`
fn projection_forward(
    x: &[f32],
    rows: usize,
    block: &BlockWeights,
    proj: Projection,
    lora: Option<(&LoraLayer, f32, f32)>,
    rng: Option<&mut ChaCha8Rng>,
) -> (Vec<f32>, Option<LoraCache>) {
    let (w, b) = proj_weights(block, proj);
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * d_out];
    matmul(rows, d_in, d_out, x, false, w.data(), false, &mut y, false);
    add_bias(&mut y, b.data());

    let Some((layer, scale, dropout)) = lora else {
        return (y, None);
    };
    let r = layer.a.shape()[0];
    let (dropped, mask) = match rng {
        Some(rng) if dropout > 0.0 => {
            let keep = 1.0 / (1.0 - dropout);
            let mask: Vec<f32> = (0..x.len())
                .map(|_| if rng.random::<f32>() < dropout { 0.0 } else { keep })
                .collect();
            let d: Vec<f32> = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Some(d), Some(mask))
        }
        _ => (None, None),
    };
    let xin = dropped.as_deref().unwrap_or(x);
    let mut u = vec![0.0; rows * r];
    matmul(rows, d_in, r, xin, false, layer.a.data(), true, &mut u, false);
    let mut delta = vec![0.0; rows * d_out];
    matmul(rows, r, d_out, &u, false, layer.b.data(), true, &mut delta, false);
    y.iter_mut().zip(&delta).for_each(|(v, d)| *v += scale * d);
    (y, Some(LoraCache { dropped, mask, u }))
}

struct ProjGrads<'a> {
    base: Option<(&'a mut Tensor, &'a mut Tensor)>,
    adapter: Option<&'a mut LoraLayer>,
}

/// Accumulates `dx += dy·Wᵀ (+ adapter path)` and the requested weight grads.
#[allow(clippy::too_many_arguments)]
fn projection_backward(
    dy: &[f32],
    x: &[f32],
    rows: usize,
    block: &BlockWeights,
    proj: Projection,
    lora: Option<(&LoraLayer, f32, &LoraCache)>,
    grads: ProjGrads<'_>,
    dx: &mut [f32],
) {
    let (w, _) = proj_weights(block, proj);
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    matmul(rows, d_out, d_in, dy, false, w.data(), true, dx, true);
    if let Some((gw, gb)) = grads.base {
        matmul(d_in, rows, d_out, x, true, dy, false, gw.data_mut(), true);
        accumulate_bias_grad(dy, gb.data_mut());
    }
    let Some((layer, scale, cache)) = lora else {
        return;
    };
    let r = layer.a.shape()[0];
    let xin = cache.dropped.as_deref().unwrap_or(x);
    // du = s·dy·B
    let mut du = vec![0.0; rows * r];
    matmul(rows, d_out, r, dy, false, layer.b.data(), false, &mut du, false);
    du.iter_mut().for_each(|v| *v *= scale);
    if let Some(g) = grads.adapter {
        // dB += s·dyᵀ·u ; dA += duᵀ·x
        let mut db = vec![0.0; d_out * r];
        matmul(d_out, rows, r, dy, true, &cache.u, false, &mut db, false);
        g.b.data_mut()
            .iter_mut()
            .zip(&db)
            .for_each(|(g, v)| *g += scale * v);
        matmul(r, rows, d_in, &du, true, xin, false, g.a.data_mut(), true);
    }
    let mut dxin = vec![0.0; rows * d_in];
    matmul(rows, r, d_in, &du, false, layer.a.data(), false, &mut dxin, false);
    match &cache.mask {
        Some(mask) => dx
            .iter_mut()
            .zip(dxin.iter().zip(mask))
            .for_each(|(d, (v, m))| *d += v * m),
        None => dx.iter_mut().zip(&dxin).for_each(|(d, v)| *d += v),
    }
}

fn adapter_layer<'a>(
    adapter: Option<&'a LoraAdapter>,
    block: usize,
    proj: Projection,
) -> Option<(&'a LoraLayer, f32, f32)> {
    let a = adapter?;
    a.layer(block, proj).map(|l| (l, a.scale(), a.dropout))
}

/// Run every block and the final layernorm, caching what backward needs.
/// Adapter dropout is applied only when `train_rng` is given.
pub fn forward_hidden(
    w: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    batch: &TokenBatch,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<Hidden> {
    batch.check(w)?;
    if let Some(a) = adapter {
        a.check_against(&w.config)?;
    }
    let cfg = &w.config;
    let (c, rows) = (cfg.n_embd, batch.rows());
    let mut rng = train_rng;

    let mut x = vec![0.0f32; rows * c];
    x.par_chunks_mut(c).enumerate().for_each(|(r, row)| {
        let tok = batch.tokens[r] as usize;
        let pos = r % batch.seq;
        let te = &w.token_embedding.data()[tok * c..(tok + 1) * c];
        let pe = &w.position_embedding.data()[pos * c..(pos + 1) * c];
        for i in 0..c {
            row[i] = te[i] + pe[i];
        }
    });

    let mut layers = Vec::with_capacity(cfg.n_layer);
    for (l, blk) in w.blocks.iter().enumerate() {
        let mut ln1_out = vec![0.0; rows * c];
        let (ln1_mean, ln1_rstd) =
            layernorm_forward(&x, blk.ln1_g.data(), blk.ln1_b.data(), &mut ln1_out, c);
        let (qkv, qkv_cache) = projection_forward(
            &ln1_out,
            rows,
            blk,
            Projection::Qkv,
            adapter_layer(adapter, l, Projection::Qkv),
            rng.as_deref_mut(),
        );
        let (att_out, probs) = attention_forward(&qkv, batch.batch, batch.seq, c, cfg.n_head);
        let (proj, proj_cache) = projection_forward(
            &att_out,
            rows,
            blk,
            Projection::AttnProj,
            adapter_layer(adapter, l, Projection::AttnProj),
            rng.as_deref_mut(),
        );
        let x_mid: Vec<f32> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let mut ln2_out = vec![0.0; rows * c];
        let (ln2_mean, ln2_rstd) =
            layernorm_forward(&x_mid, blk.ln2_g.data(), blk.ln2_b.data(), &mut ln2_out, c);
        let (up_pre, up_cache) = projection_forward(
            &ln2_out,
            rows,
            blk,
            Projection::FfnUp,
            adapter_layer(adapter, l, Projection::FfnUp),
            rng.as_deref_mut(),
        );
        let up_act: Vec<f32> = up_pre.par_iter().map(|&v| gelu(v)).collect();
        let (down, down_cache) = projection_forward(
            &up_act,
            rows,
            blk,
            Projection::FfnDown,
            adapter_layer(adapter, l, Projection::FfnDown),
            rng.as_deref_mut(),
        );
        let x_out: Vec<f32> = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            ln1_mean,
            ln1_rstd,
            ln1_out,
            qkv,
            probs,
            att_out,
            x_mid,
            ln2_mean,
            ln2_rstd,
            ln2_out,
            up_pre,
            up_act,
            lora: [qkv_cache, proj_cache, up_cache, down_cache],
        });
    }

    let mut lnf_out = vec![0.0; rows * c];
    let (lnf_mean, lnf_rstd) = layernorm_forward(&x, w.lnf_g.data(), w.lnf_b.data(), &mut lnf_out, c);
    Ok(Hidden {
        batch: batch.batch,
        seq: batch.seq,
        tokens: batch.tokens.clone(),
        layers,
        x_final: x,
        lnf_mean,
        lnf_rstd,
        lnf_out,
    })
}

/// Project hidden states onto the tied vocabulary head.
pub(crate) fn head_logits(w: &ModelWeights, hidden: &[f32], rows: usize) -> Vec<f32> {
    let (c, v) = (w.config.n_embd, w.config.vocab_size);
    let mut logits = vec![0.0; rows * v];
    matmul(rows, c, v, hidden, false, w.token_embedding.data(), true, &mut logits, false);
    logits
}

/// Full forward pass producing `B × S × V` logits.
pub fn forward(w: &ModelWeights, batch: &TokenBatch) -> Result<ForwardPass> {
    forward_with_adapter(w, None, batch)
}

/// Forward pass with an adapter applied (evaluation mode: no dropout).
pub fn forward_with_adapter(
    w: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    batch: &TokenBatch,
) -> Result<ForwardPass> {
    let hidden = forward_hidden(w, adapter, batch, None)?;
    let logits = head_logits(w, &hidden.lnf_out, batch.rows());
    Ok(ForwardPass { logits, hidden })
}

/// Turn one logit row into `softmax − onehot` scaled by `scale`, returning
/// `−log p(target)`.
fn softmax_xent_row(row: &mut [f32], target: usize, scale: f32) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let shifted_target = f64::from(row[target] - max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += f64::from(*v);
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv * scale;
    }
    row[target] -= scale;
    // NaN anywhere in the row propagates through `sum`.
    sum.ln() - shifted_target
}

/// Mean `−log softmax(logits)[target]` over positions whose target is not
/// [`IGNORE_INDEX`].
pub fn cross_entropy(logits: &[f32], targets: &[u32], vocab: usize) -> Result<f32> {
    if logits.len() != targets.len() * vocab {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} targets over {vocab} classes",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t == IGNORE_INDEX {
            continue;
        }
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row
            .iter()
            .map(|&v| f64::from(v - max).exp())
            .sum::<f64>()
            .ln()
            + f64::from(max);
        total += lse - f64::from(row[t as usize]);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no target positions for the loss".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Which gradients to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMode {
    pub base: bool,
    pub adapter: bool,
}

impl GradMode {
    pub const FULL: GradMode = GradMode {
        base: true,
        adapter: false,
    };
    pub const ADAPTER_ONLY: GradMode = GradMode {
        base: false,
        adapter: true,
    };
}

pub struct Grads {
    pub base: Option<ModelWeights>,
    pub adapter: Option<LoraAdapter>,
}

impl Grads {
    fn new(w: &ModelWeights, adapter: Option<&LoraAdapter>, mode: GradMode) -> Self {
        Self {
            base: mode.base.then(|| ModelWeights::zeros(&w.config)),
            adapter: if mode.adapter {
                adapter.map(LoraAdapter::zeros_like)
            } else {
                None
            },
        }
    }
}

/// Gradient of the mean cross-entropy of an earlier [`forward`] call.
pub fn backward(w: &ModelWeights, batch: &TokenBatch, pass: &ForwardPass) -> Result<ModelWeights> {
    backward_scaled(w, batch, pass, 1.0)
}

/// Like [`backward`] for the loss multiplied by `scale`.
pub fn backward_scaled(
    w: &ModelWeights,
    batch: &TokenBatch,
    pass: &ForwardPass,
    scale: f32,
) -> Result<ModelWeights> {
    let h = &pass.hidden;
    if h.batch != batch.batch || h.seq != batch.seq || h.tokens != batch.tokens {
        return Err(Error::StaleCache);
    }
    if h.layers.iter().any(|l| l.lora.iter().any(Option::is_some)) {
        return Err(Error::InvalidInput(
            "pass was run with an adapter; use loss_and_grads".into(),
        ));
    }
    batch.check(w)?;
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("backward needs targets".into()))?;
    let (c, v) = (w.config.n_embd, w.config.vocab_size);
    let valid = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
    if valid == 0 {
        return Err(Error::InvalidInput("no target positions for the loss".into()));
    }
    let rows = batch.rows();
    let mut dlogits = pass.logits.clone();
    let s = scale / valid as f32;
    dlogits
        .par_chunks_mut(v)
        .zip(targets.par_iter())
        .for_each(|(row, &t)| {
            if t == IGNORE_INDEX {
                row.fill(0.0);
            } else {
                softmax_xent_row(row, t as usize, s);
            }
        });
    let mut grads = Grads::new(w, None, GradMode::FULL);
    let gw = grads.base.as_mut().expect("base grads requested");
    let mut d_hidden = vec![0.0; rows * c];
    matmul(rows, v, c, &dlogits, false, w.token_embedding.data(), false, &mut d_hidden, false);
    matmul(v, rows, c, &dlogits, true, &h.lnf_out, false, gw.token_embedding.data_mut(), true);
    backward_hidden(w, None, h, &d_hidden, &mut grads);
    Ok(grads.base.expect("base grads requested"))
}

/// Training path: forward, masked cross-entropy and backward in one go.
/// The vocabulary projection is only evaluated at positions that carry a
/// target.
pub fn loss_and_grads(
    w: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    batch: &TokenBatch,
    mode: GradMode,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f32, Grads)> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("training batch needs targets".into()))?;
    let hidden = forward_hidden(w, adapter, batch, train_rng)?;
    let (c, v) = (w.config.n_embd, w.config.vocab_size);
    let positions: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i] != IGNORE_INDEX)
        .collect();
    if positions.is_empty() {
        return Err(Error::InvalidInput("no target positions for the loss".into()));
    }
    let scale = 1.0 / positions.len() as f32;
    let mut grads = Grads::new(w, adapter, mode);
    let mut d_hidden = vec![0.0; batch.rows() * c];
    let mut total = 0.0f64;
    for chunk in positions.chunks(HEAD_CHUNK) {
        let m = chunk.len();
        let mut h = vec![0.0; m * c];
        for (i, &p) in chunk.iter().enumerate() {
            h[i * c..(i + 1) * c].copy_from_slice(&hidden.lnf_out[p * c..(p + 1) * c]);
        }
        let mut logits = head_logits(w, &h, m);
        let losses: Vec<f64> = logits
            .par_chunks_mut(v)
            .zip(chunk.par_iter())
            .map(|(row, &p)| softmax_xent_row(row, targets[p] as usize, scale))
            .collect();
        total += losses.iter().sum::<f64>();
        let mut dh = vec![0.0; m * c];
        matmul(m, v, c, &logits, false, w.token_embedding.data(), false, &mut dh, false);
        for (i, &p) in chunk.iter().enumerate() {
            d_hidden[p * c..(p + 1) * c].copy_from_slice(&dh[i * c..(i + 1) * c]);
        }
        if let Some(gw) = grads.base.as_mut() {
            matmul(v, m, c, &logits, true, &h, false, gw.token_embedding.data_mut(), true);
        }
    }
    backward_hidden(w, adapter, &hidden, &d_hidden, &mut grads);
    Ok(((total / positions.len() as f64) as f32, grads))
}

/// Mean loss over positions with a target, without gradients.
pub fn masked_loss(w: &ModelWeights, adapter: Option<&LoraAdapter>, batch: &TokenBatch) -> Result<f32> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("loss needs targets".into()))?;
    let hidden = forward_hidden(w, adapter, batch, None)?;
    let (c, v) = (w.config.n_embd, w.config.vocab_size);
    let positions: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i] != IGNORE_INDEX)
        .collect();
    if positions.is_empty() {
        return Err(Error::InvalidInput("no target positions for the loss".into()));
    }
    let mut total = 0.0f64;
    for chunk in positions.chunks(HEAD_CHUNK) {
        let m = chunk.len();
        let mut h = vec![0.0; m * c];
        for (i, &p) in chunk.iter().enumerate() {
            h[i * c..(i + 1) * c].copy_from_slice(&hidden.lnf_out[p * c..(p + 1) * c]);
        }
        let mut logits = head_logits(w, &h, m);
        total += logits
            .par_chunks_mut(v)
            .zip(chunk.par_iter())
            .map(|(row, &p)| softmax_xent_row(row, targets[p] as usize, 1.0))
            .sum::<f64>();
    }
    Ok((total / positions.len() as f64) as f32)
}

fn backward_hidden(
    w: &ModelWeights,
    adapter: Option<&LoraAdapter>,
    h: &Hidden,
    d_lnf_out: &[f32],
    grads: &mut Grads,
) {
    let cfg = &w.config;
    let c = cfg.n_embd;
    let rows = h.batch * h.seq;

    let mut dx = vec![0.0f32; rows * c];
    {
        let (dg, db) = match grads.base.as_mut() {
            Some(g) => (Some(g.lnf_g.data_mut()), Some(g.lnf_b.data_mut())),
            None => (None, None),
        };
        layernorm_backward(
            d_lnf_out,
            &h.x_final,
            &h.lnf_mean,
            &h.lnf_rstd,
            w.lnf_g.data(),
            &mut dx,
            dg,
            db,
            c,
        );
    }

    for l in (0..cfg.n_layer).rev() {
        let blk = &w.blocks[l];
        let cache = &h.layers[l];
        let lora = |p: Projection| {
            let (layer, scale, _) = adapter_layer(adapter, l, p)?;
            let lc = cache.lora[proj_index(p)].as_ref()?;
            Some((layer, scale, lc))
        };
        macro_rules! pgrads {
            ($w:ident, $b:ident, $p:expr) => {
                ProjGrads {
                    base: grads
                        .base
                        .as_mut()
                        .map(|g| {
                            let b = &mut g.blocks[l];
                            (&mut b.$w, &mut b.$b)
                        }),
                    adapter: grads
                        .adapter
                        .as_mut()
                        .and_then(|g| g.layer_mut(l, $p)),
                }
            };
        }

        // x_out = x_mid + down(gelu(up(ln2(x_mid))))
        let mut d_up_act = vec![0.0; rows * 4 * c];
        projection_backward(
            &dx,
            &cache.up_act,
            rows,
            blk,
            Projection::FfnDown,
            lora(Projection::FfnDown),
            pgrads!(down_w, down_b, Projection::FfnDown),
            &mut d_up_act,
        );
        let d_up_pre: Vec<f32> = d_up_act
            .par_iter()
            .zip(cache.up_pre.par_iter())
            .map(|(d, &x)| d * gelu_grad(x))
            .collect();
        let mut d_ln2_out = vec![0.0; rows * c];
        projection_backward(
            &d_up_pre,
            &cache.ln2_out,
            rows,
            blk,
            Projection::FfnUp,
            lora(Projection::FfnUp),
            pgrads!(up_w, up_b, Projection::FfnUp),
            &mut d_ln2_out,
        );
        let mut d_x_mid = dx;
        {
            let (dg, db) = match grads.base.as_mut() {
                Some(g) => {
                    let b = &mut g.blocks[l];
                    (Some(b.ln2_g.data_mut()), Some(b.ln2_b.data_mut()))
                }
                None => (None, None),
            };
            layernorm_backward(
                &d_ln2_out,
                &cache.x_mid,
                &cache.ln2_mean,
                &cache.ln2_rstd,
                blk.ln2_g.data(),
                &mut d_x_mid,
                dg,
                db,
                c,
            );
        }

        // x_mid = x_in + proj(attn(qkv(ln1(x_in))))
        let mut d_att_out = vec![0.0; rows * c];
        projection_backward(
            &d_x_mid,
            &cache.att_out,
            rows,
            blk,
            Projection::AttnProj,
            lora(Projection::AttnProj),
            pgrads!(proj_w, proj_b, Projection::AttnProj),
            &mut d_att_out,
        );
        let d_qkv = attention_backward(
            &d_att_out,
            &cache.qkv,
            &cache.probs,
            h.batch,
            h.seq,
            c,
            cfg.n_head,
        );
        let mut d_ln1_out = vec![0.0; rows * c];
        projection_backward(
            &d_qkv,
            &cache.ln1_out,
            rows,
            blk,
            Projection::Qkv,
            lora(Projection::Qkv),
            pgrads!(qkv_w, qkv_b, Projection::Qkv),
            &mut d_ln1_out,
        );
        let mut d_x_in = d_x_mid;
        {
            let (dg, db) = match grads.base.as_mut() {
                Some(g) => {
                    let b = &mut g.blocks[l];
                    (Some(b.ln1_g.data_mut()), Some(b.ln1_b.data_mut()))
                }
                None => (None, None),
            };
            layernorm_backward(
                &d_ln1_out,
                &cache.x_in,
                &cache.ln1_mean,
                &cache.ln1_rstd,
                blk.ln1_g.data(),
                &mut d_x_in,
                dg,
                db,
                c,
            );
        }
        dx = d_x_in;
    }

    if let Some(g) = grads.base.as_mut() {
        let te = g.token_embedding.data_mut();
        for (r, &tok) in h.tokens.iter().enumerate() {
            let row = &dx[r * c..(r + 1) * c];
            let t = tok as usize;
            te[t * c..(t + 1) * c].iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let pe = g.position_embedding.data_mut();
        for (r, row) in dx.chunks_exact(c).enumerate() {
            let p = r % h.seq;
            pe[p * c..(p + 1) * c].iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
    }
}
