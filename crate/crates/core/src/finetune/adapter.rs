use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ForwardPass, ModelConfig, ModelWeights, TokenBatch};
use crate::rng;
use crate::tensor::{matmul, Tensor};

pub const LORA_MAGIC: &[u8; 8] = b"TLLMLORA";
pub const LORA_VERSION: u32 = 1;

/// Block projection matrices an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Qkv,
    AttnProj,
    FfnUp,
    FfnDown,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Qkv,
        Projection::AttnProj,
        Projection::FfnUp,
        Projection::FfnDown,
    ];

    /// `(in, out)` for hidden size `c`.
    pub fn dims(self, c: usize) -> (usize, usize) {
        match self {
            Projection::Qkv => (c, 3 * c),
            Projection::AttnProj => (c, c),
            Projection::FfnUp => (c, 4 * c),
            Projection::FfnDown => (4 * c, c),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Qkv => "qkv",
            Projection::AttnProj => "attn_proj",
            Projection::FfnUp => "ffn_up",
            Projection::FfnDown => "ffn_down",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown projection {s:?}")))
    }
}

/// Low-rank factors for one matrix `W` (`out × in` in the usual
/// convention): `A` is `r × in`, `B` is `out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub block: usize,
    pub projection: Projection,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraLayer {
    fn name(&self) -> String {
        format!("h{}.{}", self.block, self.projection)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f32,
    /// Training-time dropout on the adapter input; not persisted.
    pub dropout: f32,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// `A ~ Normal(0, 0.02)`, `B = 0`, so the adapter starts as a no-op.
    pub fn new(
        cfg: &ModelConfig,
        rank: usize,
        alpha: f32,
        targets: &[Projection],
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "LoRA needs rank ≥ 1 and alpha > 0 (got r={rank}, alpha={alpha})"
            )));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        let mut rng = rng::stream(seed);
        let dist = Normal::new(0.0f32, 0.02).expect("positive std");
        let mut layers = Vec::new();
        for block in 0..cfg.n_layer {
            for &projection in &targets {
                let (d_in, d_out) = projection.dims(cfg.n_embd);
                let a: Vec<f32> = (0..rank * d_in).map(|_| dist.sample(&mut rng)).collect();
                layers.push(LoraLayer {
                    block,
                    projection,
                    a: Tensor::from_vec(&[rank, d_in], a),
                    b: Tensor::zeros(&[d_out, rank]),
                });
            }
        }
        Ok(Self {
            rank,
            alpha,
            dropout: 0.0,
            layers,
        })
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn layer(&self, block: usize, projection: Projection) -> Option<&LoraLayer> {
        self.layers
            .iter()
            .find(|l| l.block == block && l.projection == projection)
    }

    pub fn layer_mut(&mut self, block: usize, projection: Projection) -> Option<&mut LoraLayer> {
        self.layers
            .iter_mut()
            .find(|l| l.block == block && l.projection == projection)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    block: l.block,
                    projection: l.projection,
                    a: Tensor::zeros(l.a.shape()),
                    b: Tensor::zeros(l.b.shape()),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.a, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.a, &mut l.b]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        for l in &self.layers {
            let (d_in, d_out) = l.projection.dims(cfg.n_embd);
            if l.block >= cfg.n_layer
                || l.a.shape() != [self.rank, d_in]
                || l.b.shape() != [d_out, self.rank]
            {
                return Err(Error::ShapeMismatch(format!(
                    "adapter layer {} (A {:?}, B {:?}) does not fit a model with l={}, C={}",
                    l.name(),
                    l.a.shape(),
                    l.b.shape(),
                    cfg.n_layer,
                    cfg.n_embd
                )));
            }
        }
        Ok(())
    }

    /// Content hash used to refuse merging the same adapter twice.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&(self.rank as u64).to_le_bytes());
        eat(&self.alpha.to_le_bytes());
        for l in &self.layers {
            eat(l.name().as_bytes());
            for t in [&l.a, &l.b] {
                for v in t.data() {
                    eat(&v.to_le_bytes());
                }
            }
        }
        h
    }

    /// `(alpha/r)·B·A`, shaped `out × in`.
    pub fn delta(&self, layer: &LoraLayer) -> Tensor {
        let (d_out, d_in) = (layer.b.shape()[0], layer.a.shape()[1]);
        let mut d = vec![0.0; d_out * d_in];
        matmul(d_out, self.rank, d_in, layer.b.data(), false, layer.a.data(), false, &mut d, false);
        let s = self.scale();
        d.iter_mut().for_each(|v| *v *= s);
        Tensor::from_vec(&[d_out, d_in], d)
    }

    /// Layout (little-endian): `"TLLMLORA"`, u32 version, u32 r, f32 alpha,
    /// u32 target count, then per target a u32-length-prefixed ASCII name
    /// (`h{block}.{projection}`) followed by `A` and `B` as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(LORA_MAGIC).map_err(io)?;
        w.write_all(&LORA_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.rank as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&self.alpha.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes()).map_err(io)?;
        for l in &self.layers {
            let name = l.name();
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            crate::model::weights::write_f32s(&mut w, l.a.data()).map_err(io)?;
            crate::model::weights::write_f32s(&mut w, l.b.data()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Factor shapes come from the base model configuration.
    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let truncated = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::malformed("adapter", "file is truncated"),
            _ => Error::io(path, e),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != LORA_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "TLLMLORA".into(),
            });
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut word).map_err(truncated)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(&mut r)?;
        if version != LORA_VERSION {
            return Err(Error::VersionMismatch {
                expected: LORA_VERSION,
                found: version,
            });
        }
        let rank = next_u32(&mut r)? as usize;
        let alpha = f32::from_bits(next_u32(&mut r)?);
        let count = next_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let len = next_u32(&mut r)? as usize;
            if len > 64 {
                return Err(Error::malformed("adapter", format!("target name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::malformed("adapter", "target name is not ASCII"))?;
            let (block, projection) = name
                .strip_prefix('h')
                .and_then(|s| s.split_once('.'))
                .and_then(|(b, p)| Some((b.parse::<usize>().ok()?, p.parse::<Projection>().ok()?)))
                .ok_or_else(|| Error::malformed("adapter", format!("target name {name:?}")))?;
            let (d_in, d_out) = projection.dims(cfg.n_embd);
            let mut a = Tensor::zeros(&[rank, d_in]);
            let mut b = Tensor::zeros(&[d_out, rank]);
            crate::model::weights::read_f32s(&mut r, a.data_mut()).map_err(truncated)?;
            crate::model::weights::read_f32s(&mut r, b.data_mut()).map_err(truncated)?;
            layers.push(LoraLayer {
                block,
                projection,
                a,
                b,
            });
        }
        let adapter = Self {
            rank,
            alpha,
            dropout: 0.0,
            layers,
        };
        adapter.check_against(cfg)?;
        Ok(adapter)
    }
}

/// Forward pass with every targeted `W` acting as `W + (alpha/r)·B·A`.
pub fn lora_forward(
    w: &ModelWeights,
    adapter: &LoraAdapter,
    batch: &TokenBatch,
) -> Result<ForwardPass> {
    model::forward_with_adapter(w, Some(adapter), batch)
}

/// Fold the adapter into a copy of the base weights.
pub fn merge(base: &ModelWeights, adapter: &LoraAdapter) -> Result<ModelWeights> {
    adapter.check_against(&base.config)?;
    let fp = adapter.fingerprint();
    if base.merged_adapters.contains(&fp) {
        return Err(Error::AlreadyMerged);
    }
    let mut merged = base.clone();
    for layer in &adapter.layers {
        let delta = adapter.delta(layer);
        let blk = &mut merged.blocks[layer.block];
        let w = match layer.projection {
            Projection::Qkv => &mut blk.qkv_w,
            Projection::AttnProj => &mut blk.proj_w,
            Projection::FfnUp => &mut blk.up_w,
            Projection::FfnDown => &mut blk.down_w,
        };
        // W is stored in × out; delta is out × in.
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let wd = w.data_mut();
        let dd = delta.data();
        for i in 0..d_in {
            for o in 0..d_out {
                wd[i * d_out + o] += dd[o * d_in + i];
            }
        }
    }
    merged.merged_adapters.push(fp);
    Ok(merged)
}
