//! `edgelm`: runs one pipeline stage per invocation from a TOML config.

mod config;
mod stages;
mod stamp;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{section, PipelineConfig};
use stages::{Ctx, GenerateOverrides};

#[derive(Parser)]
#[command(name = "edgelm", version, about = "Train, fine-tune, quantize and evaluate small sensor-data language models")]
struct Cli {
    /// Pipeline config file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides `seed` in the config. Each stage derives its
    /// own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Rerun a stage even if its outputs are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn sensor CSVs and text files into JSONL documents.
    Prepare,
    /// Encode documents into token shards.
    Tokenize,
    /// Sample shard streams into one mixture by ratio.
    Mix,
    /// Split a shard stream into train and validation documents.
    Split,
    /// Pre-train a model from scratch (or from `init`).
    Pretrain,
    /// Train a LoRA adapter on instruction records.
    Finetune,
    /// Fold an adapter into its base model.
    Merge,
    /// Write a block-quantized copy of a model.
    Quantize,
    /// Generate a continuation for a prompt.
    Generate(GenerateArgs),
    /// Score a model with first-tokens label matching.
    Eval,
    /// Measure generation rates across instance counts and background load.
    Bench,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(short, long)]
    prompt: Option<String>,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long)]
    temp: Option<f32>,
    #[arg(long)]
    repeat_penalty: Option<f32>,
    /// Tokens to generate.
    #[arg(short, long)]
    n: Option<usize>,
    /// Worker threads.
    #[arg(short = 't', long = "threads")]
    t: Option<usize>,
    /// Argmax decoding with no repeat penalty.
    #[arg(long)]
    greedy: bool,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => PipelineConfig::empty(),
    };
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.seed),
        force: cli.force,
    };
    match cli.command {
        Command::Prepare => stages::prepare(&ctx, section(&cfg.prepare, "prepare")?),
        Command::Tokenize => stages::tokenize(&ctx, section(&cfg.tokenize, "tokenize")?),
        Command::Mix => stages::mix(&ctx, section(&cfg.mix, "mix")?),
        Command::Split => stages::split(&ctx, section(&cfg.split, "split")?),
        Command::Pretrain => stages::pretrain(&ctx, section(&cfg.pretrain, "pretrain")?),
        Command::Finetune => stages::finetune_stage(&ctx, section(&cfg.finetune, "finetune")?),
        Command::Merge => stages::merge_stage(&ctx, section(&cfg.merge, "merge")?),
        Command::Quantize => stages::quantize(&ctx, section(&cfg.quantize, "quantize")?),
        Command::Generate(a) => {
            let o = GenerateOverrides {
                model: a.model,
                prompt: a.prompt,
                temperature: a.temp,
                repeat_penalty: a.repeat_penalty,
                max_new_tokens: a.n,
                threads: a.t,
                greedy: a.greedy,
            };
            stages::generate_stage(&ctx, cfg.generate.as_ref(), &o)
        }
        Command::Eval => stages::eval_stage(&ctx, section(&cfg.eval, "eval")?),
        Command::Bench => stages::bench_stage(&ctx, section(&cfg.bench, "bench")?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
