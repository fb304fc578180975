//! Pipeline config file: a TOML document with a global `seed` and one table
//! per stage. Relative paths resolve against the config file's directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use edgelm::data::{NormRange, DEFAULT_SHARD_BYTES};
use edgelm::finetune::{LoraConfig, SplitRatios};
use edgelm::train::TrainHyper;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub prepare: Option<PrepareConfig>,
    pub tokenize: Option<TokenizeConfig>,
    pub mix: Option<MixConfig>,
    pub split: Option<SplitConfig>,
    pub pretrain: Option<PretrainConfig>,
    pub finetune: Option<FinetuneConfig>,
    pub merge: Option<MergeConfig>,
    pub quantize: Option<QuantizeConfig>,
    pub generate: Option<GenerateConfig>,
    pub eval: Option<EvalConfig>,
    pub bench: Option<BenchConfig>,
}

fn default_seed() -> u64 {
    1337
}

fn default_shard_bytes() -> u64 {
    DEFAULT_SHARD_BYTES
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sensor: Vec<SensorSource>,
    #[serde(default)]
    pub text: Vec<TextSource>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSource {
    /// Output file stem: `<out_dir>/<name>.jsonl`.
    pub name: String,
    pub csv: PathBuf,
    pub timestamp_column: Option<String>,
    pub columns: Vec<String>,
    #[serde(default)]
    pub units: BTreeMap<String, String>,
    pub ranges: BTreeMap<String, [f64; 2]>,
    pub rows_per_document: Option<usize>,
    /// Replaces the generated unit description.
    pub context_text: Option<String>,
    pub separator: Option<String>,
}

impl SensorSource {
    pub fn norm_ranges(&self) -> HashMap<String, NormRange> {
        self.ranges
            .iter()
            .map(|(k, [lo, hi])| (k.clone(), NormRange { lo: *lo, hi: *hi }))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSource {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeConfig {
    #[serde(default = "default_shard_bytes")]
    pub shard_bytes: u64,
    pub corpus: Vec<CorpusEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub docs: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_shard_bytes")]
    pub shard_bytes: u64,
    pub target_tokens: Option<u64>,
    pub source: Vec<MixSourceConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSourceConfig {
    pub dir: PathBuf,
    pub ratio: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub input_dir: PathBuf,
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_shard_bytes")]
    pub shard_bytes: u64,
}

fn default_train_ratio() -> f64 {
    0.98
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub train_dir: PathBuf,
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Continue from an existing checkpoint instead of a fresh init.
    pub init: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub hyper: TrainHyper,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layer: usize,
    pub n_embd: Option<usize>,
    #[serde(default = "default_ctx")]
    pub max_seq_len: usize,
    pub n_head: Option<usize>,
}

fn default_ctx() -> usize {
    1024
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub base: PathBuf,
    pub records: PathBuf,
    pub out_dir: PathBuf,
    /// Held-out records for best-step selection; defaults to the training set.
    pub eval_records: Option<PathBuf>,
    /// Split `records` into train/val/test files before training.
    pub split: Option<SplitRatios>,
    #[serde(default)]
    pub lora: LoraConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub base: PathBuf,
    pub adapter: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    pub model: PathBuf,
    pub out: PathBuf,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_bits() -> u32 {
    4
}

fn default_block() -> usize {
    32
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub model: PathBuf,
    pub prompt: Option<String>,
    pub prompt_file: Option<PathBuf>,
    pub temperature: Option<f32>,
    pub repeat_penalty: Option<f32>,
    pub repeat_window: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub model: PathBuf,
    /// JSON lines of `{prompt, expected, labels}`.
    pub cases: Option<PathBuf>,
    /// Fine-tune records turned into cases; needs `labels`.
    pub records: Option<PathBuf>,
    pub labels: Option<Vec<String>>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// 0 decodes greedily.
    #[serde(default)]
    pub temperature: f32,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub out: PathBuf,
}

fn default_k() -> usize {
    edgelm::eval::DEFAULT_K
}

fn default_threads() -> usize {
    2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub model: PathBuf,
    pub prompt: String,
    #[serde(default = "default_bench_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_instances")]
    pub instances: Vec<usize>,
    /// Models held in memory, never run, for the loaded-idle condition.
    #[serde(default)]
    pub background: Vec<PathBuf>,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub out: PathBuf,
}

fn default_bench_tokens() -> usize {
    64
}

fn default_instances() -> Vec<usize> {
    vec![1, 2, 4]
}

/// Parse `path`, reporting any TOML or schema error on one line.
pub fn load(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        match line {
            Some(l) => anyhow!("{}:{l}: {}", path.display(), e.message()),
            None => anyhow!("{}: {}", path.display(), e.message()),
        }
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    Ok(cfg)
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Used when no config file is given; only flag-driven stages can run.
    pub fn empty() -> Self {
        toml::from_str("").expect("all sections are optional")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let r = |p: &mut PathBuf| rebase(base, p);
        if let Some(c) = &mut self.prepare {
            r(&mut c.out_dir);
            c.sensor.iter_mut().for_each(|s| r(&mut s.csv));
            c.text.iter_mut().for_each(|t| r(&mut t.path));
        }
        if let Some(c) = &mut self.tokenize {
            for e in &mut c.corpus {
                r(&mut e.docs);
                r(&mut e.out_dir);
            }
        }
        if let Some(c) = &mut self.mix {
            r(&mut c.out_dir);
            c.source.iter_mut().for_each(|s| r(&mut s.dir));
        }
        if let Some(c) = &mut self.split {
            r(&mut c.input_dir);
            r(&mut c.train_dir);
            r(&mut c.val_dir);
        }
        if let Some(c) = &mut self.pretrain {
            r(&mut c.train_dir);
            r(&mut c.out_dir);
            c.val_dir.iter_mut().for_each(r);
            c.init.iter_mut().for_each(r);
        }
        if let Some(c) = &mut self.finetune {
            r(&mut c.base);
            r(&mut c.records);
            r(&mut c.out_dir);
            c.eval_records.iter_mut().for_each(r);
        }
        if let Some(c) = &mut self.merge {
            r(&mut c.base);
            r(&mut c.adapter);
            r(&mut c.out);
        }
        if let Some(c) = &mut self.quantize {
            r(&mut c.model);
            r(&mut c.out);
        }
        if let Some(c) = &mut self.generate {
            r(&mut c.model);
            c.prompt_file.iter_mut().for_each(r);
        }
        if let Some(c) = &mut self.eval {
            r(&mut c.model);
            r(&mut c.out);
            c.cases.iter_mut().for_each(r);
            c.records.iter_mut().for_each(r);
        }
        if let Some(c) = &mut self.bench {
            r(&mut c.model);
            r(&mut c.out);
            c.background.iter_mut().for_each(r);
        }
    }
}

/// The section for `stage`, or an error naming the missing table.
pub fn section<'a, T>(s: &'a Option<T>, stage: &str) -> Result<&'a T> {
    match s {
        Some(v) => Ok(v),
        None => bail!("config has no [{stage}] section"),
    }
}
