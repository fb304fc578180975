//! Straightforward f64 re-implementation of the decoder, written from the
//! architecture description with plain loops. Tests use it as an oracle for
//! logits and, through finite differences, for gradients.
#![allow(dead_code)]

use edgelm::finetune::{LoraAdapter, Projection};
use edgelm::model::{ModelConfig, ModelWeights};

pub struct RefLora {
    pub scale: f64,
    /// `(block, projection, A r×in, B out×r, rank)`
    pub layers: Vec<(usize, Projection, Vec<f64>, Vec<f64>, usize)>,
}

impl RefLora {
    pub fn from(a: &LoraAdapter) -> Self {
        Self {
            scale: f64::from(a.alpha) / a.rank as f64,
            layers: a
                .layers
                .iter()
                .map(|l| {
                    (
                        l.block,
                        l.projection,
                        l.a.data().iter().map(|&v| f64::from(v)).collect(),
                        l.b.data().iter().map(|&v| f64::from(v)).collect(),
                        a.rank,
                    )
                })
                .collect(),
        }
    }
}

pub struct RefModel {
    pub cfg: ModelConfig,
    /// Tensors in checkpoint order.
    pub t: Vec<Vec<f64>>,
}

const WTE: usize = 0;
const WPE: usize = 1;

fn blk(l: usize, k: usize) -> usize {
    2 + 12 * l + k
}

impl RefModel {
    pub fn from(w: &ModelWeights) -> Self {
        Self {
            cfg: w.config,
            t: w
                .tensors()
                .iter()
                .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
                .collect(),
        }
    }

    fn layernorm(&self, x: &[f64], g: usize, b: usize) -> Vec<f64> {
        let c = self.cfg.n_embd;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for i in 0..c {
                o[i] = (row[i] - mean) * rstd * self.t[g][i] + self.t[b][i];
            }
        }
        out
    }

    fn linear(
        &self,
        x: &[f64],
        w: usize,
        b: usize,
        d_in: usize,
        d_out: usize,
        lora: Option<(&RefLora, usize, Projection)>,
    ) -> Vec<f64> {
        let rows = x.len() / d_in;
        let (wt, bt) = (&self.t[w], &self.t[b]);
        let mut y = vec![0.0; rows * d_out];
        for r in 0..rows {
            let xr = &x[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let mut s = bt[o];
                for i in 0..d_in {
                    s += xr[i] * wt[i * d_out + o];
                }
                y[r * d_out + o] = s;
            }
            if let Some((lr, block, proj)) = lora {
                for (lb, lp, a, bm, rank) in &lr.layers {
                    if *lb != block || *lp != proj {
                        continue;
                    }
                    let u: Vec<f64> = (0..*rank)
                        .map(|k| (0..d_in).map(|i| xr[i] * a[k * d_in + i]).sum())
                        .collect();
                    for o in 0..d_out {
                        let d: f64 = (0..*rank).map(|k| u[k] * bm[o * rank + k]).sum();
                        y[r * d_out + o] += lr.scale * d;
                    }
                }
            }
        }
        y
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// Logits, `B·S × V`.
    pub fn logits(&self, tokens: &[u32], batch: usize, seq: usize, lora: Option<&RefLora>) -> Vec<f64> {
        let cfg = self.cfg;
        let (c, h) = (cfg.n_embd, cfg.n_head);
        let hd = c / h;
        let rows = batch * seq;
        let mut x = vec![0.0; rows * c];
        for r in 0..rows {
            let (tok, pos) = (tokens[r] as usize, r % seq);
            for i in 0..c {
                x[r * c + i] = self.t[WTE][tok * c + i] + self.t[WPE][pos * c + i];
            }
        }
        for l in 0..cfg.n_layer {
            let lo = |p| lora.map(|a| (a, l, p));
            let n1 = self.layernorm(&x, blk(l, 0), blk(l, 1));
            let qkv = self.linear(&n1, blk(l, 2), blk(l, 3), c, 3 * c, lo(Projection::Qkv));
            let mut att = vec![0.0; rows * c];
            for b in 0..batch {
                for head in 0..h {
                    for i in 0..seq {
                        let qi = (b * seq + i) * 3 * c + head * hd;
                        let mut w: Vec<f64> = (0..=i)
                            .map(|j| {
                                let kj = (b * seq + j) * 3 * c + c + head * hd;
                                (0..hd).map(|d| qkv[qi + d] * qkv[kj + d]).sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        w.iter_mut().for_each(|v| *v = (*v - m).exp());
                        let z: f64 = w.iter().sum();
                        for (j, wj) in w.iter().enumerate() {
                            let vj = (b * seq + j) * 3 * c + 2 * c + head * hd;
                            for d in 0..hd {
                                att[(b * seq + i) * c + head * hd + d] += wj / z * qkv[vj + d];
                            }
                        }
                    }
                }
            }
            let p = self.linear(&att, blk(l, 4), blk(l, 5), c, c, lo(Projection::AttnProj));
            x.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            let n2 = self.layernorm(&x, blk(l, 6), blk(l, 7));
            let mut u = self.linear(&n2, blk(l, 8), blk(l, 9), c, 4 * c, lo(Projection::FfnUp));
            u.iter_mut().for_each(|v| *v = Self::gelu(*v));
            let d = self.linear(&u, blk(l, 10), blk(l, 11), 4 * c, c, lo(Projection::FfnDown));
            x.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        let nf = self.t.len();
        let xf = self.layernorm(&x, nf - 2, nf - 1);
        let v = cfg.vocab_size;
        let mut out = vec![0.0; rows * v];
        for r in 0..rows {
            for t in 0..v {
                out[r * v + t] = (0..c).map(|i| xf[r * c + i] * self.t[WTE][t * c + i]).sum();
            }
        }
        out
    }

    /// Mean cross-entropy over positions whose target is not `u32::MAX`.
    pub fn loss(
        &self,
        tokens: &[u32],
        targets: &[u32],
        batch: usize,
        seq: usize,
        lora: Option<&RefLora>,
    ) -> f64 {
        let v = self.cfg.vocab_size;
        let logits = self.logits(tokens, batch, seq, lora);
        let mut total = 0.0;
        let mut n = 0;
        for (row, &t) in logits.chunks(v).zip(targets) {
            if t == u32::MAX {
                continue;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            n += 1;
        }
        total / n as f64
    }
}

pub mod grad {
    use super::*;
    use edgelm::model::{init_model, loss_and_grads, GradMode, TokenBatch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct Probe {
        pub tensor: String,
        pub analytic: f64,
        pub numeric: f64,
    }

    impl Probe {
        /// `|a − n| / max(|a|, |n|, floor)`.
        pub fn rel_err(&self, floor: f64) -> f64 {
            (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
        }
    }

    pub const FD_EPS: f64 = 1e-3;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_embd: 32,
            vocab_size: 64,
            max_seq_len: 16,
            n_head: 4,
        }
    }

    /// Model with every tensor jittered away from its structured init so
    /// that no gradient is trivially zero.
    pub fn jittered_model(seed: u64) -> ModelWeights {
        let mut w = init_model(&tiny_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for t in w.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1f32..0.1);
            }
        }
        w
    }

    pub fn random_batch(cfg: &ModelConfig, batch: usize, seq: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * seq;
        let v = cfg.vocab_size as u32;
        let tokens = (0..n).map(|_| rng.random_range(0..v)).collect();
        let targets = (0..n).map(|_| rng.random_range(0..v)).collect();
        TokenBatch::new(batch, seq, tokens, Some(targets)).unwrap()
    }

    fn central_difference(
        w: &ModelWeights,
        batch: &TokenBatch,
        lora: Option<&LoraAdapter>,
        perturb: &dyn Fn(&mut RefModel, &mut Option<RefLora>, f64),
    ) -> f64 {
        let targets = batch.targets.as_ref().unwrap();
        let eval = |delta: f64| {
            let mut m = RefModel::from(w);
            let mut l = lora.map(RefLora::from);
            perturb(&mut m, &mut l, delta);
            m.loss(&batch.tokens, targets, batch.batch, batch.seq, l.as_ref())
        };
        (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS)
    }

    /// Compare analytic base-model gradients against central differences of
    /// the f64 reference, `per_tensor` random coordinates for each tensor.
    pub fn check_base(seed: u64, per_tensor: usize) -> Vec<Probe> {
        let w = jittered_model(seed);
        let cfg = w.config;
        let batch = random_batch(&cfg, 2, 8, seed + 1);
        let (_, grads) = loss_and_grads(&w, None, &batch, GradMode::FULL, None).unwrap();
        let g = grads.base.unwrap();
        let names = ModelWeights::tensor_names(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut probes = Vec::new();
        for (ti, gt) in g.tensors().iter().enumerate() {
            // Token rows never seen in the batch carry only the head gradient,
            // so sample them like any other.
            for _ in 0..per_tensor {
                let idx = rng.random_range(0..gt.len());
                let numeric = central_difference(&w, &batch, None, &|m, _, d| m.t[ti][idx] += d);
                probes.push(Probe {
                    tensor: names[ti].clone(),
                    analytic: f64::from(gt.data()[idx]),
                    numeric,
                });
            }
        }
        probes
    }

    /// Same check for LoRA factors on all four projections, with `B`
    /// randomized so `A` receives gradient.
    pub fn check_lora(seed: u64, per_tensor: usize) -> Vec<Probe> {
        let w = jittered_model(seed);
        let cfg = w.config;
        let mut adapter = LoraAdapter::new(&cfg, 4, 8.0, &Projection::ALL, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        for l in &mut adapter.layers {
            for v in l.b.data_mut() {
                *v = rng.random_range(-0.05f32..0.05);
            }
        }
        let batch = random_batch(&cfg, 2, 8, seed + 4);
        let (_, grads) =
            loss_and_grads(&w, Some(&adapter), &batch, GradMode::ADAPTER_ONLY, None).unwrap();
        let g = grads.adapter.unwrap();
        let mut probes = Vec::new();
        for (li, gl) in g.layers.iter().enumerate() {
            for (which, gt) in [(0, &gl.a), (1, &gl.b)] {
                for _ in 0..per_tensor {
                    let idx = rng.random_range(0..gt.len());
                    let numeric = central_difference(&w, &batch, Some(&adapter), &|_, l, d| {
                        let layer = &mut l.as_mut().unwrap().layers[li];
                        if which == 0 {
                            layer.2[idx] += d;
                        } else {
                            layer.3[idx] += d;
                        }
                    });
                    probes.push(Probe {
                        tensor: format!(
                            "h{}.{}.{}",
                            gl.block,
                            gl.projection,
                            if which == 0 { "A" } else { "B" }
                        ),
                        analytic: f64::from(gt.data()[idx]),
                        numeric,
                    });
                }
            }
        }
        probes
    }
}
