//! Instruction fine-tuning with LoRA adapters over Alpaca-style records.

mod adapter;
mod records;
mod tuner;

pub use adapter::{lora_forward, merge, LoraAdapter, LoraLayer, Projection, LORA_MAGIC, LORA_VERSION};
pub use records::{
    build_ft_dataset, read_records, render_prompt, write_records, FinetuneRecord, SplitRatios,
};
pub use tuner::{
    encode_record, finetune, write_metrics, BestTracker, EncodedRecord, FinetuneOutcome,
    LoraConfig, MetricsRow,
};
