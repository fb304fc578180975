use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::config::{param_count_exact, ModelConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_BYTES: u64 = 8 + 4 * 6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    /// `C × 3C`, columns ordered q | k | v.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub down_w: Tensor,
    pub down_b: Tensor,
}

impl BlockWeights {
    fn zeros(c: usize) -> Self {
        Self {
            ln1_g: Tensor::zeros(&[c]),
            ln1_b: Tensor::zeros(&[c]),
            qkv_w: Tensor::zeros(&[c, 3 * c]),
            qkv_b: Tensor::zeros(&[3 * c]),
            proj_w: Tensor::zeros(&[c, c]),
            proj_b: Tensor::zeros(&[c]),
            ln2_g: Tensor::zeros(&[c]),
            ln2_b: Tensor::zeros(&[c]),
            up_w: Tensor::zeros(&[c, 4 * c]),
            up_b: Tensor::zeros(&[4 * c]),
            down_w: Tensor::zeros(&[4 * c, c]),
            down_b: Tensor::zeros(&[c]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.up_w,
            &self.up_b,
            &self.down_w,
            &self.down_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.up_w,
            &mut self.up_b,
            &mut self.down_w,
            &mut self.down_b,
        ]
    }
}

const BLOCK_TENSOR_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.g", "ln2.b", "up.w", "up.b",
    "down.w", "down.b",
];

/// Full parameter set. The output head reuses `token_embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// Fingerprints of adapters folded in by `finetune::merge`; in-memory only.
    pub merged_adapters: Vec<u64>,
}

impl ModelWeights {
    /// All-zero tensors of the right shapes (also the gradient layout).
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.n_embd;
        Self {
            config: *config,
            token_embedding: Tensor::zeros(&[config.vocab_size, c]),
            position_embedding: Tensor::zeros(&[config.max_seq_len, c]),
            blocks: (0..config.n_layer).map(|_| BlockWeights::zeros(c)).collect(),
            lnf_g: Tensor::zeros(&[c]),
            lnf_b: Tensor::zeros(&[c]),
            merged_adapters: Vec::new(),
        }
    }

    /// Tensor shapes in checkpoint order, without allocating the tensors.
    pub fn zeros_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let c = config.n_embd;
        let block = [
            vec![c],
            vec![c],
            vec![c, 3 * c],
            vec![3 * c],
            vec![c, c],
            vec![c],
            vec![c],
            vec![c],
            vec![c, 4 * c],
            vec![4 * c],
            vec![4 * c, c],
            vec![c],
        ];
        let mut shapes = vec![vec![config.vocab_size, c], vec![config.max_seq_len, c]];
        for _ in 0..config.n_layer {
            shapes.extend(block.iter().cloned());
        }
        shapes.push(vec![c]);
        shapes.push(vec![c]);
        shapes
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    /// Names matching [`ModelWeights::tensors`], e.g. `h3.qkv.w`.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut out = vec!["wte".to_owned(), "wpe".to_owned()];
        for l in 0..config.n_layer {
            out.extend(BLOCK_TENSOR_NAMES.iter().map(|n| format!("h{l}.{n}")));
        }
        out.push("lnf.g".into());
        out.push("lnf.b".into());
        out
    }

    pub fn num_params(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        write_config_header(&mut w, CHECKPOINT_VERSION, &self.config).map_err(io)?;
        for t in self.tensors() {
            write_f32s(&mut w, t.data()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut r = BufReader::with_capacity(1 << 20, file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        read_prefix(&mut r, &mut magic, path, actual)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "TLLMCKPT".into(),
            });
        }
        let (version, config) = read_config_header(&mut r, path, actual)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let expected = CHECKPOINT_HEADER_BYTES + 4 * param_count_exact(&config);
        if actual != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
        let mut weights = ModelWeights::zeros(&config);
        for t in weights.tensors_mut() {
            read_f32s(&mut r, t.data_mut()).map_err(io)?;
        }
        Ok(weights)
    }
}

pub(crate) fn write_config_header(
    w: &mut impl Write,
    version: u32,
    cfg: &ModelConfig,
) -> std::io::Result<()> {
    for v in [
        version,
        cfg.n_layer as u32,
        cfg.n_embd as u32,
        cfg.vocab_size as u32,
        cfg.max_seq_len as u32,
        cfg.n_head as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read `buf.len()` bytes, reporting a short file as truncation.
pub(crate) fn read_prefix(r: &mut impl Read, buf: &mut [u8], path: &Path, actual: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.to_path_buf(),
            expected: CHECKPOINT_HEADER_BYTES,
            actual,
        },
        _ => Error::io(path, e),
    })
}

/// Reads `version, l, C, V, T, n_heads` and validates the config.
pub(crate) fn read_config_header(
    r: &mut impl Read,
    path: &Path,
    actual: u64,
) -> Result<(u32, ModelConfig)> {
    let mut raw = [0u8; 24];
    read_prefix(r, &mut raw, path, actual)?;
    let f = |i: usize| u32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap());
    let config = ModelConfig {
        n_layer: f(1) as usize,
        n_embd: f(2) as usize,
        vocab_size: f(3) as usize,
        max_seq_len: f(4) as usize,
        n_head: f(5) as usize,
    };
    config.validate()?;
    Ok((f(0), config))
}

pub(crate) fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len().min(1 << 18) * 4);
    for chunk in data.chunks(1 << 18) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, out: &mut [f32]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len().min(1 << 18) * 4];
    for chunk in out.chunks_mut(1 << 18) {
        let bytes = &mut buf[..chunk.len() * 4];
        r.read_exact(bytes)?;
        for (v, b) in chunk.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Ok(())
}

/// Normal(0, 0.02) matrices, residual projections scaled by `1/√(2l)`,
/// unit layernorm gains, zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = rng::stream(seed);
    let std = 0.02f32;
    let resid_std = std / (2.0 * config.n_layer as f32).sqrt();
    let mut fill = |t: &mut Tensor, sd: f32| {
        let dist = Normal::new(0.0f32, sd).expect("positive std");
        for v in t.data_mut() {
            *v = dist.sample(&mut rng);
        }
    };
    let mut w = ModelWeights::zeros(config);
    fill(&mut w.token_embedding, std);
    fill(&mut w.position_embedding, std);
    for b in &mut w.blocks {
        b.ln1_g.fill(1.0);
        b.ln2_g.fill(1.0);
        fill(&mut b.qkv_w, std);
        fill(&mut b.proj_w, resid_std);
        fill(&mut b.up_w, std);
        fill(&mut b.down_w, resid_std);
    }
    w.lnf_g.fill(1.0);
    Ok(w)
}
