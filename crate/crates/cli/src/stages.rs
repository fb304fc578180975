use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use edgelm::data::{
    list_shards, mix_shards, read_documents, split_dataset, split_text_documents,
    tokenize_corpus, transform_table, write_documents, MixSource, MixSpec, PromptTemplateConfig,
    SensorTable,
};
use edgelm::eval::{
    bench_generate, emit_bench_report, emit_eval_report, evaluate, read_cases, EvalCase,
};
use edgelm::finetune::{
    build_ft_dataset, finetune, merge, read_records, render_prompt, write_metrics, write_records,
    LoraAdapter,
};
use edgelm::inference::{generate, load_model, quantize_model, GenerationParams, QuantScheme};
use edgelm::model::{ModelConfig, ModelWeights};
use edgelm::rng::derive_seed;
use edgelm::train::{train, train_from};
use edgelm::Tokenizer;
use log::info;

use crate::config::*;
use crate::stamp::{beside, Stamp};

/// Settings shared by every stage.
pub struct Ctx {
    pub seed: u64,
    pub force: bool,
}

impl Ctx {
    pub fn seed_for(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Run `body` unless `stamp` shows the outputs are current.
    fn guarded(&self, stage: &str, stamp: Stamp, body: impl FnOnce() -> Result<()>) -> Result<()> {
        if !self.force && stamp.is_current() {
            println!("{stage}: outputs are up to date, nothing to do (use --force to rerun)");
            return Ok(());
        }
        body()?;
        stamp.write()
    }
}

fn load(path: &Path) -> Result<ModelWeights> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn prepare(ctx: &Ctx, c: &PrepareConfig) -> Result<()> {
    ensure!(
        !c.sensor.is_empty() || !c.text.is_empty(),
        "[prepare] lists no sensor or text sources"
    );
    let inputs: Vec<&Path> = c
        .sensor
        .iter()
        .map(|s| s.csv.as_path())
        .chain(c.text.iter().map(|t| t.path.as_path()))
        .collect();
    let outs: Vec<PathBuf> = c
        .sensor
        .iter()
        .map(|s| &s.name)
        .chain(c.text.iter().map(|t| &t.name))
        .map(|n| c.out_dir.join(format!("{n}.jsonl")))
        .collect();
    let out_refs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    let stamp = Stamp::new(
        c.out_dir.join("prepare.stamp"),
        "prepare",
        &format!("{c:?}"),
        &inputs,
        &out_refs,
    );
    ctx.guarded("prepare", stamp, || {
        fs::create_dir_all(&c.out_dir)
            .with_context(|| format!("creating {}", c.out_dir.display()))?;
        for s in &c.sensor {
            let units: HashMap<String, String> = s.units.clone().into_iter().collect();
            let table = SensorTable::from_csv(&s.csv, s.timestamp_column.as_deref(), &units)
                .with_context(|| format!("reading {}", s.csv.display()))?;
            let ranges = s.norm_ranges();
            let tmpl = PromptTemplateConfig {
                context_text: s.context_text.clone().unwrap_or_else(|| {
                    PromptTemplateConfig::describe_units(&table, &s.columns, &ranges)
                }),
                column_order: s.columns.clone(),
                separator: s.separator.clone().unwrap_or_else(|| "\n".into()),
                rows_per_document: s.rows_per_document,
            };
            let docs = transform_table(&table, &tmpl, &ranges)
                .with_context(|| format!("transforming {}", s.csv.display()))?;
            write_documents(&c.out_dir.join(format!("{}.jsonl", s.name)), &docs)?;
            println!("prepare: {} -> {} documents from {} rows", s.name, docs.len(), table.rows());
        }
        for t in &c.text {
            let text = fs::read_to_string(&t.path)
                .with_context(|| format!("reading {}", t.path.display()))?;
            let docs = split_text_documents(&text);
            write_documents(&c.out_dir.join(format!("{}.jsonl", t.name)), &docs)?;
            println!("prepare: {} -> {} documents", t.name, docs.len());
        }
        Ok(())
    })
}

pub fn tokenize(ctx: &Ctx, c: &TokenizeConfig) -> Result<()> {
    let tok = Tokenizer::gpt2();
    for e in &c.corpus {
        let stamp = Stamp::new(
            e.out_dir.join("tokenize.stamp"),
            "tokenize",
            &format!("{e:?} shard_bytes={}", c.shard_bytes),
            &[&e.docs],
            &[&e.out_dir],
        );
        ctx.guarded("tokenize", stamp, || {
            let docs = read_documents(&e.docs)
                .with_context(|| format!("reading {}", e.docs.display()))?;
            let shards = tokenize_corpus(&docs, tok, c.shard_bytes, &e.out_dir)?;
            let tokens: u64 = shards.iter().map(|s| s.token_count).sum();
            println!(
                "tokenize: {} -> {} documents, {tokens} tokens in {} shard(s)",
                e.docs.display(),
                docs.len(),
                shards.len()
            );
            Ok(())
        })?;
    }
    Ok(())
}

pub fn mix(ctx: &Ctx, c: &MixConfig) -> Result<()> {
    let seed = ctx.seed_for("mix");
    let inputs: Vec<&Path> = c.source.iter().map(|s| s.dir.as_path()).collect();
    let stamp = Stamp::new(
        c.out_dir.join("mix.stamp"),
        "mix",
        &format!("{c:?} seed={seed}"),
        &inputs,
        &[&c.out_dir],
    );
    ctx.guarded("mix", stamp, || {
        let spec = MixSpec {
            sources: c
                .source
                .iter()
                .map(|s| MixSource {
                    dir: s.dir.clone(),
                    ratio: s.ratio,
                })
                .collect(),
            seed,
            target_tokens: c.target_tokens,
        };
        let out = mix_shards(&spec, &c.out_dir, c.shard_bytes)?;
        let total: f64 = c.source.iter().map(|s| s.ratio).sum();
        println!("mix: {} tokens in {} shard(s)", out.total_tokens(), out.shards.len());
        for ((s, share), (tokens, docs)) in c
            .source
            .iter()
            .zip(out.shares())
            .zip(out.tokens_per_source.iter().zip(&out.docs_per_source))
        {
            println!(
                "mix: {} target {:.4} realized {share:.4} ({tokens} tokens, {docs} documents)",
                s.dir.display(),
                s.ratio / total
            );
        }
        Ok(())
    })
}

pub fn split(ctx: &Ctx, c: &SplitConfig) -> Result<()> {
    let seed = ctx.seed_for("split");
    let stamp = Stamp::new(
        c.train_dir.join("split.stamp"),
        "split",
        &format!("{c:?} seed={seed}"),
        &[&c.input_dir],
        &[&c.train_dir, &c.val_dir],
    );
    ctx.guarded("split", stamp, || {
        let shards = list_shards(&c.input_dir)?;
        let out = split_dataset(&shards, c.train_ratio, seed, &c.train_dir, &c.val_dir, c.shard_bytes)?;
        println!(
            "split: train {} documents / {} tokens, val {} documents / {} tokens, train share {:.4}",
            out.train_docs,
            out.train_tokens,
            out.val_docs,
            out.val_tokens,
            out.train_share()
        );
        Ok(())
    })
}

pub fn pretrain(ctx: &Ctx, c: &PretrainConfig) -> Result<()> {
    let mut h = c.hyper.clone();
    h.seed = ctx.seed_for("pretrain");
    let ckpt = c.out_dir.join("model.ckpt");
    let mut inputs: Vec<&Path> = vec![&c.train_dir];
    inputs.extend(c.val_dir.as_deref());
    inputs.extend(c.init.as_deref());
    let stamp = Stamp::new(
        c.out_dir.join("pretrain.stamp"),
        "pretrain",
        &format!("{:?} {:?} {h:?}", c.model, c.init),
        &inputs,
        &[&ckpt],
    );
    ctx.guarded("pretrain", stamp, || {
        let m = &c.model;
        let mut cfg = ModelConfig::custom(m.n_layer, m.n_embd.unwrap_or(64 * m.n_layer), m.max_seq_len);
        if let Some(n_head) = m.n_head {
            cfg.n_head = n_head;
        }
        cfg.validate()?;
        ensure!(
            h.seq_len <= cfg.max_seq_len,
            "hyper.seq_len {} exceeds model.max_seq_len {}",
            h.seq_len,
            cfg.max_seq_len
        );
        let train_shards = list_shards(&c.train_dir)?;
        let val_shards = match &c.val_dir {
            Some(d) => list_shards(d)?,
            None => Vec::new(),
        };
        fs::create_dir_all(&c.out_dir)
            .with_context(|| format!("creating {}", c.out_dir.display()))?;
        let out = match &c.init {
            Some(p) => {
                let w = ModelWeights::load(p).with_context(|| format!("loading {}", p.display()))?;
                ensure!(w.config == cfg, "{} does not match [pretrain.model]", p.display());
                train_from(w, &train_shards, &val_shards, &h, &c.out_dir)?
            }
            None => train(&cfg, &train_shards, &val_shards, &h, &c.out_dir)?,
        };
        let first = out.log.first().map_or(f32::NAN, |r| r.train_loss);
        let last = out.log.last().map_or(f32::NAN, |r| r.train_loss);
        println!(
            "pretrain: {} steps, loss {first:.4} -> {last:.4}, checkpoint {}",
            out.steps_completed,
            out.checkpoint.display()
        );
        Ok(())
    })
}

pub fn finetune_stage(ctx: &Ctx, c: &FinetuneConfig) -> Result<()> {
    let mut lora = c.lora.clone();
    lora.seed = ctx.seed_for("finetune");
    let split_seed = ctx.seed_for("finetune-split");
    let adapter_path = c.out_dir.join("adapter.lora");
    let mut inputs: Vec<&Path> = vec![&c.base, &c.records];
    inputs.extend(c.eval_records.as_deref());
    let stamp = Stamp::new(
        c.out_dir.join("finetune.stamp"),
        "finetune",
        &format!("{:?} {lora:?} split_seed={split_seed}", c.split),
        &inputs,
        &[&adapter_path],
    );
    ctx.guarded("finetune", stamp, || {
        let base = load(&c.base)?;
        let records = read_records(&c.records)
            .with_context(|| format!("reading {}", c.records.display()))?;
        fs::create_dir_all(&c.out_dir)
            .with_context(|| format!("creating {}", c.out_dir.display()))?;
        let (train_set, val_set) = match c.split {
            Some(ratios) => {
                let (tr, va, te) = build_ft_dataset(&records, ratios, split_seed)?;
                write_records(&c.out_dir.join("train.jsonl"), &tr)?;
                write_records(&c.out_dir.join("val.jsonl"), &va)?;
                write_records(&c.out_dir.join("test.jsonl"), &te)?;
                (tr, va)
            }
            None => {
                let val = match &c.eval_records {
                    Some(p) => read_records(p).with_context(|| format!("reading {}", p.display()))?,
                    None => records.clone(),
                };
                (records, val)
            }
        };
        let out = finetune(&base, &lora, Tokenizer::gpt2(), &train_set, &val_set)?;
        out.adapter.save(&adapter_path)?;
        write_metrics(&c.out_dir.join("metrics.csv"), &out.metrics)?;
        if out.skipped_records > 0 {
            log::warn!("{} record(s) longer than the context were skipped", out.skipped_records);
        }
        match (out.best_step, out.best_eval_loss) {
            (Some(s), Some(l)) => println!(
                "finetune: {} train records, best eval loss {l:.4} at step {s}, adapter {}",
                train_set.len(),
                adapter_path.display()
            ),
            _ => println!("finetune: no steps run, adapter {}", adapter_path.display()),
        }
        Ok(())
    })
}

pub fn merge_stage(ctx: &Ctx, c: &MergeConfig) -> Result<()> {
    let stamp = Stamp::new(beside(&c.out), "merge", "", &[&c.base, &c.adapter], &[&c.out]);
    ctx.guarded("merge", stamp, || {
        let base = load(&c.base)?;
        let adapter = LoraAdapter::load(&c.adapter, &base.config)
            .with_context(|| format!("loading adapter {}", c.adapter.display()))?;
        let merged = merge(&base, &adapter)?;
        merged.save(&c.out)?;
        println!("merge: {} layer(s) folded in, wrote {}", adapter.layers.len(), c.out.display());
        Ok(())
    })
}

pub fn quantize(ctx: &Ctx, c: &QuantizeConfig) -> Result<()> {
    let stamp = Stamp::new(
        beside(&c.out),
        "quantize",
        &format!("bits={} block_size={}", c.bits, c.block_size),
        &[&c.model],
        &[&c.out],
    );
    ctx.guarded("quantize", stamp, || {
        let scheme = QuantScheme::new(c.bits, c.block_size)?;
        let w = load(&c.model)?;
        quantize_model(&w, &scheme, &c.out)?;
        let before = fs::metadata(&c.model).map(|m| m.len()).unwrap_or(0);
        let after = fs::metadata(&c.out).map(|m| m.len()).unwrap_or(0);
        println!(
            "quantize: {} bytes -> {} bytes ({:.1}%), wrote {}",
            before,
            after,
            100.0 * after as f64 / before.max(1) as f64,
            c.out.display()
        );
        Ok(())
    })
}

/// Command-line overrides for `generate`.
#[derive(Debug, Default)]
pub struct GenerateOverrides {
    pub model: Option<PathBuf>,
    pub prompt: Option<String>,
    pub temperature: Option<f32>,
    pub repeat_penalty: Option<f32>,
    pub max_new_tokens: Option<usize>,
    pub threads: Option<usize>,
    pub greedy: bool,
}

pub fn generate_stage(ctx: &Ctx, c: Option<&GenerateConfig>, o: &GenerateOverrides) -> Result<()> {
    let defaults = GenerationParams::default();
    let model = match (&o.model, c) {
        (Some(m), _) => m.clone(),
        (None, Some(c)) => c.model.clone(),
        (None, None) => bail!("no model: pass --model or add a [generate] section"),
    };
    let prompt = match (&o.prompt, c) {
        (Some(p), _) => p.clone(),
        (None, Some(GenerateConfig { prompt: Some(p), .. })) => p.clone(),
        (None, Some(GenerateConfig { prompt_file: Some(f), .. })) => {
            fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?
        }
        _ => bail!("no prompt: pass --prompt or set prompt / prompt_file in [generate]"),
    };
    let mut p = GenerationParams {
        temperature: o
            .temperature
            .or(c.and_then(|c| c.temperature))
            .unwrap_or(defaults.temperature),
        repeat_penalty: o
            .repeat_penalty
            .or(c.and_then(|c| c.repeat_penalty))
            .unwrap_or(defaults.repeat_penalty),
        repeat_window: c.and_then(|c| c.repeat_window).unwrap_or(defaults.repeat_window),
        max_new_tokens: o
            .max_new_tokens
            .or(c.and_then(|c| c.max_new_tokens))
            .unwrap_or(defaults.max_new_tokens),
        seed: ctx.seed_for("generate"),
        thread_count: o.threads.or(c.and_then(|c| c.threads)).unwrap_or(defaults.thread_count),
    };
    if o.greedy {
        p.temperature = 0.0;
        p.repeat_penalty = 1.0;
    }
    let w = load(&model)?;
    let r = generate(&w, Tokenizer::gpt2(), &prompt, &p)?;
    println!("{}", r.generated_text);
    println!();
    println!("prompt tokens:    {:>8} ({:.2} tok/s)", r.prompt_tokens, r.prompt_eval_rate);
    println!("generated tokens: {:>8} ({:.2} tok/s)", r.generated_tokens, r.eval_rate);
    println!("wall time:        {:>8.3} s", r.wall_time);
    Ok(())
}

pub fn eval_stage(ctx: &Ctx, c: &EvalConfig) -> Result<()> {
    let cases: Vec<EvalCase> = match (&c.cases, &c.records, &c.labels) {
        (Some(p), None, _) => read_cases(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(p), Some(labels)) => read_records(p)
            .with_context(|| format!("reading {}", p.display()))?
            .iter()
            .map(|r| EvalCase {
                prompt: render_prompt(r, false),
                expected: r.response.clone(),
                labels: labels.clone(),
            })
            .collect(),
        (None, Some(_), None) => bail!("[eval] records need a labels list"),
        _ => bail!("[eval] needs exactly one of cases or records"),
    };
    let w = load(&c.model)?;
    let p = GenerationParams {
        temperature: c.temperature,
        repeat_penalty: 1.0,
        seed: ctx.seed_for("eval"),
        thread_count: c.threads,
        ..GenerationParams::default()
    };
    let s = evaluate(&w, Tokenizer::gpt2(), &cases, &p, c.k)?;
    if let Some(dir) = c.out.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    emit_eval_report(&s, &c.out)?;
    println!(
        "eval: accuracy {:.2}% ({}/{} correct, {} invalid), macro F1 {:.4}, report {}",
        s.accuracy,
        s.correct,
        s.total,
        s.invalid,
        s.macro_f1,
        c.out.display()
    );
    Ok(())
}

pub fn bench_stage(ctx: &Ctx, c: &BenchConfig) -> Result<()> {
    ensure!(!c.instances.is_empty(), "[bench] instances is empty");
    let w = load(&c.model)?;
    // Without explicit background models an idle copy of the benchmarked
    // model stands in.
    let idle: Vec<ModelWeights> = if c.background.is_empty() {
        vec![w.clone()]
    } else {
        c.background.iter().map(|p| load(p)).collect::<Result<_>>()?
    };
    let p = GenerationParams {
        max_new_tokens: c.max_new_tokens,
        seed: ctx.seed_for("bench"),
        thread_count: c.threads,
        ..GenerationParams::default()
    };
    let tok = Tokenizer::gpt2();
    let mut results = Vec::new();
    for &n in &c.instances {
        for (bg, label) in [(&[][..], "none"), (&idle[..], "loaded-idle")] {
            info!("bench: {n} instance(s), background {label}");
            results.push(bench_generate(&w, tok, &c.prompt, &p, n, bg, label)?);
        }
    }
    if let Some(dir) = c.out.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    emit_bench_report(&results, &c.out)?;
    let table = c.out.with_extension("txt");
    print!("{}", fs::read_to_string(&table).with_context(|| format!("reading {}", table.display()))?);
    for label in ["none", "loaded-idle"] {
        let rates: Vec<f64> = results
            .iter()
            .filter(|r| r.background == label)
            .map(|r| r.mean_rate())
            .collect();
        let falling = rates.windows(2).all(|w| w[1] <= w[0]);
        println!(
            "bench: per-instance rate {} as instances grow ({label})",
            if falling { "falls" } else { "does not fall monotonically" }
        );
    }
    Ok(())
}
