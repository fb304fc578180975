//! Row-wise building blocks shared by training and inference.

use rayon::prelude::*;

use crate::tensor::matmul;

pub const LN_EPS: f32 = 1e-5;
const PAR_ROWS: usize = 16;

/// Returns per-row `(mean, rstd)`.
pub fn layernorm_forward(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    out: &mut [f32],
    c: usize,
) -> (Vec<f32>, Vec<f32>) {
    let stats: Vec<(f32, f32)> = out
        .par_chunks_mut(c)
        .zip(x.par_chunks(c))
        .with_min_len(PAR_ROWS)
        .map(|(o, row)| {
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..c {
                o[i] = (row[i] - mean) * rstd * gain[i] + bias[i];
            }
            (mean, rstd)
        })
        .collect();
    stats.into_iter().unzip()
}

/// Accumulates into `dx`, `dgain` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dout: &[f32],
    x: &[f32],
    mean: &[f32],
    rstd: &[f32],
    gain: &[f32],
    dx: &mut [f32],
    dgain: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
    c: usize,
) {
    dx.par_chunks_mut(c)
        .enumerate()
        .with_min_len(PAR_ROWS)
        .for_each(|(r, dxr)| {
            let xr = &x[r * c..(r + 1) * c];
            let dor = &dout[r * c..(r + 1) * c];
            let (m, s) = (mean[r], rstd[r]);
            let mut mean_d = 0.0f32;
            let mut mean_dx = 0.0f32;
            for i in 0..c {
                let xhat = (xr[i] - m) * s;
                let d = dor[i] * gain[i];
                mean_d += d;
                mean_dx += d * xhat;
            }
            mean_d /= c as f32;
            mean_dx /= c as f32;
            for i in 0..c {
                let xhat = (xr[i] - m) * s;
                let d = dor[i] * gain[i];
                dxr[i] += s * (d - mean_d - xhat * mean_dx);
            }
        });
    if let (Some(dg), Some(db)) = (dgain, dbias) {
        let rows = x.len() / c;
        for r in 0..rows {
            let (m, s) = (mean[r], rstd[r]);
            for i in 0..c {
                let xhat = (x[r * c + i] - m) * s;
                dg[i] += dout[r * c + i] * xhat;
                db[i] += dout[r * c + i];
            }
        }
    }
}

const GELU_K: f32 = 0.797_884_6; // √(2/π)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn add_bias(y: &mut [f32], bias: &[f32]) {
    let n = bias.len();
    y.par_chunks_mut(n)
        .with_min_len(PAR_ROWS)
        .for_each(|row| row.iter_mut().zip(bias).for_each(|(v, b)| *v += b));
}

/// `dbias += Σ_rows dy`
pub fn accumulate_bias_grad(dy: &[f32], dbias: &mut [f32]) {
    let n = dbias.len();
    for row in dy.chunks_exact(n) {
        dbias.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
}

/// Dense linear layer `y = x·W + b` with `W` stored `in × out`.
pub fn linear(x: &[f32], w: &[f32], b: &[f32], rows: usize, d_in: usize, d_out: usize) -> Vec<f32> {
    let mut y = vec![0.0; rows * d_out];
    matmul(rows, d_in, d_out, x, false, w, false, &mut y, false);
    add_bias(&mut y, b);
    y
}

/// Causal multi-head attention over `qkv` (`B·S × 3C`, q | k | v).
/// Returns the attended output (`B·S × C`) and the attention
/// probabilities (`B × H × S × S`).
pub fn attention_forward(
    qkv: &[f32],
    batch: usize,
    seq: usize,
    c: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>) {
    let hd = c / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let per_head: Vec<(Vec<f32>, Vec<f32>)> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let (q, k, v) = gather_qkv(qkv, b, h, seq, c, hd);
            let mut p = vec![0.0f32; seq * seq];
            matmul(seq, hd, seq, &q, false, &k, true, &mut p, false);
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                let mut max = f32::NEG_INFINITY;
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                row[..=i].iter_mut().for_each(|s| *s *= inv);
                row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
            }
            let mut out = vec![0.0f32; seq * hd];
            matmul(seq, seq, hd, &p, false, &v, false, &mut out, false);
            (out, p)
        })
        .collect();

    let mut out = vec![0.0f32; batch * seq * c];
    let mut probs = Vec::with_capacity(batch * heads * seq * seq);
    for (bh, (o, p)) in per_head.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for t in 0..seq {
            let dst = (b * seq + t) * c + h * hd;
            out[dst..dst + hd].copy_from_slice(&o[t * hd..(t + 1) * hd]);
        }
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

fn gather_qkv(
    qkv: &[f32],
    b: usize,
    h: usize,
    seq: usize,
    c: usize,
    hd: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut q = vec![0.0f32; seq * hd];
    let mut k = vec![0.0f32; seq * hd];
    let mut v = vec![0.0f32; seq * hd];
    for t in 0..seq {
        let base = (b * seq + t) * 3 * c + h * hd;
        q[t * hd..(t + 1) * hd].copy_from_slice(&qkv[base..base + hd]);
        k[t * hd..(t + 1) * hd].copy_from_slice(&qkv[base + c..base + c + hd]);
        v[t * hd..(t + 1) * hd].copy_from_slice(&qkv[base + 2 * c..base + 2 * c + hd]);
    }
    (q, k, v)
}

/// Gradient of [`attention_forward`] with respect to `qkv`.
pub fn attention_backward(
    dout: &[f32],
    qkv: &[f32],
    probs: &[f32],
    batch: usize,
    seq: usize,
    c: usize,
    heads: usize,
) -> Vec<f32> {
    let hd = c / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let per_head: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / heads, bh % heads);
            let (q, k, v) = gather_qkv(qkv, b, h, seq, c, hd);
            let p = &probs[bh * seq * seq..(bh + 1) * seq * seq];
            let mut d_o = vec![0.0f32; seq * hd];
            for t in 0..seq {
                let src = (b * seq + t) * c + h * hd;
                d_o[t * hd..(t + 1) * hd].copy_from_slice(&dout[src..src + hd]);
            }
            // dV = Pᵀ·dO
            let mut dv = vec![0.0f32; seq * hd];
            matmul(seq, seq, hd, p, true, &d_o, false, &mut dv, false);
            // dP = dO·Vᵀ, then softmax backward in place
            let mut ds = vec![0.0f32; seq * seq];
            matmul(seq, hd, seq, &d_o, false, &v, true, &mut ds, false);
            for i in 0..seq {
                let prow = &p[i * seq..(i + 1) * seq];
                let drow = &mut ds[i * seq..(i + 1) * seq];
                let dot: f32 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
                drow[i + 1..].iter_mut().for_each(|d| *d = 0.0);
            }
            let mut dq = vec![0.0f32; seq * hd];
            matmul(seq, seq, hd, &ds, false, &k, false, &mut dq, false);
            let mut dk = vec![0.0f32; seq * hd];
            matmul(seq, seq, hd, &ds, true, &q, false, &mut dk, false);
            (dq, dk, dv)
        })
        .collect();

    let mut dqkv = vec![0.0f32; batch * seq * 3 * c];
    for (bh, (dq, dk, dv)) in per_head.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for t in 0..seq {
            let base = (b * seq + t) * 3 * c + h * hd;
            let s = t * hd..(t + 1) * hd;
            dqkv[base..base + hd].copy_from_slice(&dq[s.clone()]);
            dqkv[base + c..base + c + hd].copy_from_slice(&dk[s.clone()]);
            dqkv[base + 2 * c..base + 2 * c + hd].copy_from_slice(&dv[s]);
        }
    }
    dqkv
}
