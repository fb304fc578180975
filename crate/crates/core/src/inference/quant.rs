use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::weights::{read_config_header, read_f32s, write_config_header, write_f32s};
use crate::model::{ModelConfig, ModelWeights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const QUANT_MAGIC: &[u8; 8] = b"TLLMQNT1";
const QUANT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 8 + 4 + 4 + 24;
const TAG_F32: u8 = 0;
const TAG_QUANT: u8 = 1;
/// Index of the position embedding in checkpoint tensor order.
const WPE_INDEX: usize = 1;

/// Affine per-block quantization with `bits` bits per value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u32,
    pub block_size: usize,
}

impl Default for QuantScheme {
    fn default() -> Self {
        Self {
            bits: 4,
            block_size: 32,
        }
    }
}

impl QuantScheme {
    pub fn new(bits: u32, block_size: usize) -> Result<Self> {
        let s = Self { bits, block_size };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 4) {
            return Err(Error::InvalidConfig(format!("quantization bits must be 2 or 4, got {}", self.bits)));
        }
        if self.block_size == 0 || self.block_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "block size must be a positive multiple of 4, got {}",
                self.block_size
            )));
        }
        Ok(())
    }

    fn levels(&self) -> u32 {
        (1 << self.bits) - 1
    }

    /// Bytes per stored block: scale, min, packed codes.
    pub fn block_bytes(&self) -> usize {
        8 + self.block_size * self.bits as usize / 8
    }

    fn tensor_bytes(&self, rows: usize, cols: usize) -> u64 {
        (rows * cols.div_ceil(self.block_size) * self.block_bytes()) as u64
    }
}

/// Quantize up to `block_size` values into `(scale, min, packed codes)`.
/// Codes are packed LSB-first; a short block is padded with zero codes.
pub fn quantize_block(values: &[f32], s: &QuantScheme) -> (f32, f32, Vec<u8>) {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if max > min { (max - min) / s.levels() as f32 } else { 1.0 };
    let mut packed = vec![0u8; s.block_size * s.bits as usize / 8];
    let per_byte = 8 / s.bits as usize;
    for (i, &v) in values.iter().enumerate() {
        let code = ((v - min) / scale).round().clamp(0.0, s.levels() as f32) as u8;
        packed[i / per_byte] |= code << ((i % per_byte) * s.bits as usize);
    }
    (scale, min, packed)
}

/// Inverse of [`quantize_block`], writing `out.len()` values.
pub fn dequantize_block(scale: f32, min: f32, packed: &[u8], s: &QuantScheme, out: &mut [f32]) {
    let per_byte = 8 / s.bits as usize;
    let mask = s.levels() as u8;
    for (i, o) in out.iter_mut().enumerate() {
        let code = (packed[i / per_byte] >> ((i % per_byte) * s.bits as usize)) & mask;
        *o = min + scale * f32::from(code);
    }
}

fn quantized(index: usize, shape: &[usize]) -> bool {
    shape.len() >= 2 && index != WPE_INDEX
}

/// Exact size in bytes of the quantized file for `cfg`.
pub fn quantized_file_size(cfg: &ModelConfig, s: &QuantScheme) -> u64 {
    let shapes = ModelWeights::zeros_shapes(cfg);
    HEADER_BYTES
        + shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                1 + if quantized(i, shape) {
                    s.tensor_bytes(shape[0], shape[1])
                } else {
                    4 * shape.iter().product::<usize>() as u64
                }
            })
            .sum::<u64>()
}

/// Layout (little-endian): `"TLLMQNT1"`, u32 bits, u32 block size, the
/// checkpoint config header (version, l, C, V, T, heads), then per tensor
/// in checkpoint order a u8 tag (0 raw f32, 1 quantized) and its payload.
/// Quantized matrices are blocked along rows; each block holds f32 scale,
/// f32 min and the packed codes.
pub fn quantize_model(w: &ModelWeights, s: &QuantScheme, out: &Path) -> Result<()> {
    s.validate()?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut f = BufWriter::with_capacity(1 << 20, file);
    let io = |e| Error::io(out, e);
    f.write_all(QUANT_MAGIC).map_err(io)?;
    f.write_all(&s.bits.to_le_bytes()).map_err(io)?;
    f.write_all(&(s.block_size as u32).to_le_bytes()).map_err(io)?;
    write_config_header(&mut f, QUANT_VERSION, &w.config).map_err(io)?;
    for (i, t) in w.tensors().into_iter().enumerate() {
        if !quantized(i, t.shape()) {
            f.write_all(&[TAG_F32]).map_err(io)?;
            write_f32s(&mut f, t.data()).map_err(io)?;
            continue;
        }
        f.write_all(&[TAG_QUANT]).map_err(io)?;
        for row in t.data().chunks(t.shape()[1]) {
            for block in row.chunks(s.block_size) {
                let (scale, min, packed) = quantize_block(block, s);
                f.write_all(&scale.to_le_bytes()).map_err(io)?;
                f.write_all(&min.to_le_bytes()).map_err(io)?;
                f.write_all(&packed).map_err(io)?;
            }
        }
    }
    f.flush().map_err(io)
}

fn load_quantized(path: &Path, r: &mut impl Read, actual: u64) -> Result<ModelWeights> {
    let truncated = |expected: u64| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        actual,
    };
    let mut raw = [0u8; 8];
    r.read_exact(&mut raw).map_err(|_| truncated(HEADER_BYTES))?;
    let bits = u32::from_le_bytes(raw[..4].try_into().unwrap());
    let block_size = u32::from_le_bytes(raw[4..].try_into().unwrap()) as usize;
    let s = QuantScheme::new(bits, block_size)?;
    let (version, config) = read_config_header(r, path, actual)?;
    if version != QUANT_VERSION {
        return Err(Error::VersionMismatch {
            expected: QUANT_VERSION,
            found: version,
        });
    }
    let expected = quantized_file_size(&config, &s);
    if actual != expected {
        return Err(truncated(expected));
    }
    let io = |e| Error::io(path, e);
    let mut w = ModelWeights::zeros(&config);
    let mut block = vec![0u8; s.block_bytes()];
    for (i, t) in w.tensors_mut().into_iter().enumerate() {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io)?;
        let want = if quantized(i, t.shape()) { TAG_QUANT } else { TAG_F32 };
        if tag[0] != want {
            return Err(Error::malformed(
                "quantized model",
                format!("tensor {i} has storage tag {} (expected {want})", tag[0]),
            ));
        }
        if want == TAG_F32 {
            read_f32s(r, t.data_mut()).map_err(io)?;
            continue;
        }
        let cols = t.shape()[1];
        for row in t.data_mut().chunks_mut(cols) {
            for out in row.chunks_mut(s.block_size) {
                r.read_exact(&mut block).map_err(io)?;
                let scale = f32::from_le_bytes(block[0..4].try_into().unwrap());
                let min = f32::from_le_bytes(block[4..8].try_into().unwrap());
                dequantize_block(scale, min, &block[8..], &s, out);
            }
        }
    }
    Ok(w)
}

/// Load an f32 checkpoint or a quantized file, chosen by magic.
/// Quantized matrices are dequantized at load.
pub fn load_model(path: &Path) -> Result<ModelWeights> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated {
        path: path.to_path_buf(),
        expected: HEADER_BYTES,
        actual,
    })?;
    if &magic == QUANT_MAGIC {
        load_quantized(path, &mut r, actual)
    } else if &magic == CHECKPOINT_MAGIC {
        drop(r);
        ModelWeights::load(path)
    } else {
        Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: format!(
                "{} (v{CHECKPOINT_VERSION}) or {}",
                String::from_utf8_lossy(CHECKPOINT_MAGIC),
                String::from_utf8_lossy(QUANT_MAGIC)
            ),
        })
    }
}
