//! Deployment runtime: block quantization, model loading, KV-cached
//! generation and sampling.

mod generate;
mod quant;
mod sampling;

pub use generate::{generate, generate_ids, GenerationParams, GenerationReport, KvCache};
pub use quant::{
    dequantize_block, load_model, quantize_block, quantize_model, quantized_file_size, QuantScheme,
    QUANT_MAGIC,
};
pub use sampling::{apply_repeat_penalty, sample_token};
