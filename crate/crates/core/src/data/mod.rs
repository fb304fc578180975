//! Corpus preparation: sensor tables and plain text become prompt documents,
//! documents become token shards, shards are mixed by ratio and split into
//! train/validation streams.

mod mix;
mod normalize;
mod shard;
mod split;
mod table;

pub use mix::{mix_shards, MixOutcome, MixSource, MixSpec};
pub use normalize::normalize_series;
pub use shard::{
    list_shards, open_shard, read_shard, tokenize_corpus, ShardWriter, TokenCursor, TokenShard,
    DEFAULT_SHARD_BYTES, SHARD_HEADER_BYTES, SHARD_MAGIC, SHARD_VERSION, TEST_SHARD_BYTES,
};
pub use split::{split_dataset, SplitOutcome};
pub use table::{
    clean_text, read_documents, split_text_documents, transform_table, write_documents,
    NormRange, PromptTemplateConfig, SensorColumn, SensorTable,
};
