//! Toolkit for pre-training, LoRA fine-tuning, quantizing and benchmarking
//! small GPT-2 family decoder models on mixed text and sensor corpora.
//!
//! Stages, in pipeline order:
//!
//! - [`data`]: sensor tables to prompt text, token shards, ratio mixing, train/val split
//! - [`tokenizer`]: byte-level BPE with the GPT-2 vocabulary
//! - [`model`]: decoder configuration, parameter counting, forward/backward, checkpoints
//! - [`train`]: AdamW with warmup + cosine schedule and gradient clipping
//! - [`finetune`]: Alpaca-template records, LoRA adapters, merge
//! - [`inference`]: block quantization, model loading, sampling, generation
//! - [`eval`]: label-matching accuracy, macro-F1, throughput benchmarks

pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod inference;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tokenizer::Tokenizer;
