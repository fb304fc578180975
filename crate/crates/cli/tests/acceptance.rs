//! Acceptance suite: one PASS/FAIL line per criterion, written straight to
//! stdout so it shows up without `--nocapture`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use edgelm::data::{
    list_shards, mix_shards, read_shard, split_dataset, MixSource, MixSpec,
    ShardWriter, TEST_SHARD_BYTES,
};
use edgelm::eval::{
    bench_generate, emit_bench_report, evaluate, match_label, EvalCase, DEFAULT_K,
};
use edgelm::finetune::{
    finetune, lora_forward, merge, read_records, render_prompt, LoraAdapter, LoraConfig,
    Projection,
};
use edgelm::inference::{
    dequantize_block, generate, quantize_block, quantize_model, quantized_file_size,
    sample_token, GenerationParams, QuantScheme,
};
use edgelm::model::{
    forward, init_model, masked_loss, param_count_empirical, param_count_exact, ModelConfig,
    ModelWeights, TokenBatch,
};
use edgelm::tensor::{max_abs_diff, Tensor};
use edgelm::tokenizer::{Tokenizer, EOT_ID};
use edgelm::train::{clip_gradients, lr_at, train, TrainHyper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn gpt2_tiny(seed: u64) -> ModelWeights {
    gpt2_width(64, seed)
}

fn gpt2_width(n_embd: usize, seed: u64) -> ModelWeights {
    let cfg = ModelConfig {
        n_layer: 2,
        n_embd,
        vocab_size: 50_257,
        max_seq_len: 128,
        n_head: 2,
    };
    init_model(&cfg, seed).unwrap()
}

fn gesture_cases(records: &[edgelm::finetune::FinetuneRecord]) -> Vec<EvalCase> {
    records
        .iter()
        .map(|r| EvalCase {
            prompt: render_prompt(r, false),
            expected: r.response.clone(),
            labels: vec!["Tap".into(), "Double".into(), "Hold".into()],
        })
        .collect()
}

fn parameter_table() -> Outcome {
    let table = [(6, 384, 30), (8, 512, 51), (10, 640, 82), (11, 704, 102), (12, 768, 124)];
    let mut worst = 0.0f64;
    for (l, c, millions) in table {
        let cfg = ModelConfig::family(l);
        check!(cfg.n_embd == c, "l={l} has C={}", cfg.n_embd);
        let n = param_count_exact(&cfg) as f64 / 1e6;
        check!(n.round() as u64 == millions, "l={l}: {n:.3}M does not round to {millions}M");
        let sig2 = |x: f64| {
            let mag = 10f64.powi(x.log10().floor() as i32 - 1);
            (x / mag).round() * mag
        };
        check!(sig2(n) == sig2(millions as f64), "l={l}: {n:.3}M disagrees at 2 significant figures");
        let rel = (n - param_count_empirical(l)).abs() / param_count_empirical(l);
        check!(rel < 0.02, "l={l}: {n:.3}M is {:.2}% off the empirical formula", 100.0 * rel);
        worst = worst.max(rel);
    }
    Ok(format!("5 depths match, worst deviation from 0.05l³+3.2l is {:.2}%", 100.0 * worst))
}

fn gradient_check() -> Outcome {
    let probes = common::grad::check_base(21, 13);
    check!(probes.len() >= 200, "only {} probes", probes.len());
    let kinds: std::collections::BTreeSet<String> = probes
        .iter()
        .map(|p| p.tensor.split('.').skip_while(|s| s.starts_with('h')).collect::<Vec<_>>().join("."))
        .collect();
    check!(kinds.len() == 16, "tensor kinds covered: {kinds:?}");
    let (err, name) = probes
        .iter()
        .map(|p| (p.rel_err(1e-6), p.tensor.as_str()))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    check!(err < 1e-3, "relative error {err:.2e} on {name}");
    Ok(format!("{} coordinates over {} tensor kinds, worst relative error {err:.2e}", probes.len(), kinds.len()))
}

fn training_sanity() -> Outcome {
    let tok = Tokenizer::gpt2();
    let cfg = ModelConfig { max_seq_len: 64, ..gpt2_tiny(3).config };
    let model = init_model(&cfg, 3).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4 * 64;
    let random = TokenBatch::new(
        4,
        64,
        (0..n).map(|_| rng.random_range(0..50_257)).collect(),
        Some((0..n).map(|_| rng.random_range(0..50_257)).collect()),
    )
    .unwrap();
    let initial = f64::from(masked_loss(&model, None, &random).unwrap());
    let ln_v = (50_257f64).ln();
    check!((initial - ln_v).abs() <= 0.1 * ln_v, "initial loss {initial:.3} vs ln V {ln_v:.3}");

    let passage = fs::read_to_string(fixtures().join("corpus.txt")).unwrap();
    let ids = tok.encode(&passage);
    let corpus: Vec<u32> = ids.iter().copied().cycle().take(50_000).collect();
    let dir = tempdir().unwrap();
    let mut w = ShardWriter::new(&dir.path().join("train"), TEST_SHARD_BYTES).unwrap();
    w.write_tokens(&corpus).unwrap();
    let shards = w.finish().unwrap();
    let defaults = TrainHyper::default();
    // 200 steps of 4×48 tokens stay within one pass over the corpus.
    let steps = 200;
    let h = TrainHyper {
        micro_batch: 4,
        seq_len: 48,
        total_steps: steps,
        warmup_steps: defaults.warmup_steps * steps / defaults.total_steps,
        val_interval: 0,
        ..defaults
    };
    let out = train(&cfg, &shards, &[], &h, &dir.path().join("run")).map_err(|e| e.to_string())?;
    let first = out.log[0].train_loss;
    check!(
        out.steps_completed == steps,
        "stopped after {} steps (loss {first:.3} -> {:.3})",
        out.steps_completed,
        out.log.last().unwrap().train_loss
    );
    let tail = &out.log[out.log.len() - 10..];
    let last = tail.iter().map(|r| r.train_loss).sum::<f32>() / tail.len() as f32;
    check!(first - last >= 2.0, "loss {first:.3} -> {last:.3} dropped less than 2 nats");
    Ok(format!(
        "initial loss {initial:.3} (ln V {ln_v:.3}); {steps} steps with warmup {} took loss {first:.3} -> {last:.3}",
        h.warmup_steps
    ))
}

fn schedule_and_clipping() -> Outcome {
    let h = TrainHyper {
        total_steps: 1001,
        warmup_steps: 100,
        ..TrainHyper::default()
    };
    let at = |s| lr_at(s, &h).unwrap();
    check!(at(99) == h.lr_max, "end of warmup {}", at(99));
    check!(at(100) == h.lr_max, "start of decay {}", at(100));
    let mid = (h.lr_max + h.lr_min) / 2.0;
    check!((at(550) - mid).abs() < 1e-15, "midpoint {} vs {mid}", at(550));
    check!((at(1000) - h.lr_min).abs() <= 1e-9 * h.lr_max, "last step {}", at(1000));
    check!(lr_at(1001, &h).is_err(), "step past the end accepted");

    let before = [vec![2.0f32, 2.0], vec![2.0, 2.0]];
    let mut a = Tensor::from_vec(&[2], before[0].clone());
    let mut b = Tensor::from_vec(&[2, 1], before[1].clone());
    let norm = clip_gradients(&mut [&mut a, &mut b], 1.0).map_err(|e| e.to_string())?;
    check!(norm == 4.0, "pre-clip norm {norm}");
    for (t, orig) in [a.data(), b.data()].into_iter().zip(&before) {
        check!(t.iter().zip(orig).all(|(x, y)| *x == y * 0.25), "clipped values {t:?}");
    }
    Ok(format!("lr_at(99)=lr_max, lr_at(550)=mid, lr_at(1000)=lr_min; norm 4 scaled by 0.25"))
}

fn synthetic_source(dir: &Path, docs: usize, len: std::ops::Range<usize>, tag: u32, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ShardWriter::new(dir, TEST_SHARD_BYTES).unwrap();
    let mut total = 0;
    for _ in 0..docs {
        let n = rng.random_range(len.clone());
        let mut doc: Vec<u32> = (0..n - 1).map(|_| tag * 1000 + rng.random_range(0..1000)).collect();
        doc.push(EOT_ID);
        total += doc.len() as u64;
        w.write_tokens(&doc).unwrap();
    }
    w.finish().unwrap();
    total
}

fn mixing_fidelity() -> Outcome {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synthetic_source(&a, 30_000, 10..50, 1, 1);
    synthetic_source(&b, 9_000, 100..200, 2, 2);
    let spec = MixSpec {
        sources: vec![MixSource { dir: a, ratio: 0.4 }, MixSource { dir: b, ratio: 0.6 }],
        seed: 42,
        target_tokens: Some(1_100_000),
    };
    let r1 = mix_shards(&spec, &dir.path().join("m1"), TEST_SHARD_BYTES).map_err(|e| e.to_string())?;
    let r2 = mix_shards(&spec, &dir.path().join("m2"), TEST_SHARD_BYTES).map_err(|e| e.to_string())?;
    check!(r1.total_tokens() >= 1_000_000, "only {} tokens mixed", r1.total_tokens());
    let shares = r1.shares();
    check!((shares[0] - 0.4).abs() <= 0.01 && (shares[1] - 0.6).abs() <= 0.01, "shares {shares:?}");
    check!(r1.shards.len() == r2.shards.len(), "rerun wrote a different shard count");
    for (x, y) in r1.shards.iter().zip(&r2.shards) {
        check!(fs::read(&x.path).unwrap() == fs::read(&y.path).unwrap(), "rerun differs in {}", x.path.display());
    }

    let src = dir.path().join("split_src");
    let total = synthetic_source(&src, 25_000, 20..80, 3, 5);
    check!(total >= 1_000_000, "split input has {total} tokens");
    let shards = list_shards(&src).unwrap();
    let s = split_dataset(&shards, 0.98, 17, &dir.path().join("t"), &dir.path().join("v"), TEST_SHARD_BYTES)
        .map_err(|e| e.to_string())?;
    check!((s.train_share() - 0.98).abs() <= 0.005, "train share {}", s.train_share());
    let n_split: usize = s.train.iter().chain(&s.val).map(|x| read_shard(&x.path).unwrap().len()).sum();
    check!(n_split as u64 == total, "split lost tokens");
    Ok(format!(
        "40:60 over {} tokens realized {:.4}:{:.4}, rerun byte-identical; 98:2 over {total} tokens realized train share {:.4}",
        r1.total_tokens(),
        shares[0],
        shares[1],
        s.train_share()
    ))
}

fn tokenizer_checks() -> Outcome {
    let tok = Tokenizer::gpt2();
    let reference: [(&str, &[u32]); 4] = [
        ("hello world", &[31373, 995]),
        (
            "Sensor data values are provided in the following order: proximity, red, green, and blue light intensity values.",
            &[47864, 1366, 3815, 389, 2810, 287, 262, 1708, 1502, 25, 20387, 11, 2266, 11, 4077, 11, 290, 4171, 1657, 12245, 3815, 13],
        ),
        ("### Response:\nHold", &[21017, 18261, 25, 198, 26807]),
        ("Hold<|endoftext|>", &[26807, 50256]),
    ];
    for (text, ids) in reference {
        check!(tok.encode(text) == ids, "encode({text:?}) = {:?}", tok.encode(text));
    }
    let alphabet: Vec<char> = "abcXYZ019 \n\t.,;:'\"!?-_[](){}#<>|éß東京🚀\u{0}\u{7f}"
        .chars()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let len = rng.random_range(0..40);
        let s: String = (0..len)
            .map(|_| {
                if rng.random_bool(0.2) {
                    char::from_u32(rng.random_range(0..0x11_0000)).unwrap_or('?')
                } else {
                    alphabet[rng.random_range(0..alphabet.len())]
                }
            })
            .collect();
        let back = tok.decode(&tok.encode(&s)).map_err(|e| e.to_string())?;
        check!(back == s, "case {i}: {s:?} came back as {back:?}");
    }
    Ok("reference ids match; 1,000 random strings round-trip".into())
}

fn lora_checks() -> Outcome {
    let w = common::grad::jittered_model(71);
    let batch = common::grad::random_batch(&w.config, 2, 8, 9);
    let fresh = LoraAdapter::new(&w.config, 8, 16.0, &Projection::ALL, 3).unwrap();
    let base = forward(&w, &batch).unwrap().logits;
    let noop = max_abs_diff(&base, &lora_forward(&w, &fresh, &batch).unwrap().logits);
    check!(noop <= 1e-6, "fresh adapter moved logits by {noop}");

    let mut trained = LoraAdapter::new(&w.config, 4, 8.0, &Projection::ALL, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for l in &mut trained.layers {
        l.b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1f32..0.1));
    }
    let merged = merge(&w, &trained).map_err(|e| e.to_string())?;
    let gap = max_abs_diff(
        &forward(&merged, &batch).unwrap().logits,
        &lora_forward(&w, &trained, &batch).unwrap().logits,
    );
    check!(gap < 1e-4, "merged vs adapter logits differ by {gap}");

    let tok = Tokenizer::gpt2();
    let records = read_records(&fixtures().join("gesture_records.jsonl")).unwrap();
    check!(records.len() == 20, "{} records", records.len());
    let cfg = LoraConfig {
        rank: 16,
        alpha: 32.0,
        dropout: 0.0,
        targets: Projection::ALL.to_vec(),
        lr: 3e-3,
        steps: 300,
        grad_accum: 1,
        batch: 4,
        eval_interval: 25,
        ..LoraConfig::default()
    };
    let tiny = gpt2_width(128, 7);
    let out = finetune(&tiny, &cfg, tok, &records, &records).map_err(|e| e.to_string())?;
    let tuned = merge(&tiny, &out.adapter).map_err(|e| e.to_string())?;
    let s = evaluate(&tuned, tok, &gesture_cases(&records), &GenerationParams::greedy(DEFAULT_K), DEFAULT_K)
        .map_err(|e| e.to_string())?;
    check!(s.accuracy == 100.0, "memorization accuracy {:.2}% after {} steps", s.accuracy, cfg.steps);
    Ok(format!(
        "no-op {noop:.1e}, merge gap {gap:.1e}, 20 records memorized at 100% within {} steps (best step {:?})",
        cfg.steps, out.best_step
    ))
}

fn quantization_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f32;
    for bits in [2, 4] {
        let s = QuantScheme::new(bits, 32).unwrap();
        for _ in 0..500 {
            let spread = rng.random_range(0.01f32..20.0);
            let v: Vec<f32> = (0..32).map(|_| rng.random_range(-spread..spread)).collect();
            let (scale, min, packed) = quantize_block(&v, &s);
            let mut out = vec![0.0; 32];
            dequantize_block(scale, min, &packed, &s, &mut out);
            for (a, b) in v.iter().zip(&out) {
                let err = (a - b).abs();
                check!(err <= scale / 2.0 + 1e-6, "{bits}-bit error {err} exceeds half step {}", scale / 2.0);
                worst = worst.max(err / scale);
            }
        }
    }
    let s = QuantScheme::default();
    let l6 = ModelConfig::family(6);
    let f32_bytes = 32 + 4 * param_count_exact(&l6);
    let ratio = quantized_file_size(&l6, &s) as f64 / f32_bytes as f64;
    check!(ratio < 0.25, "4-bit l=6 file is {:.1}% of f32", 100.0 * ratio);

    let w = gpt2_tiny(4);
    let dir = tempdir().unwrap();
    let (ck, q) = (dir.path().join("m.ckpt"), dir.path().join("m.q4"));
    w.save(&ck).unwrap();
    quantize_model(&w, &s, &q).unwrap();
    let on_disk = fs::metadata(&q).unwrap().len();
    check!(on_disk == quantized_file_size(&w.config, &s), "file size {on_disk} differs from layout");
    check!(fs::metadata(&ck).unwrap().len() == 32 + 4 * param_count_exact(&w.config), "checkpoint size");
    Ok(format!(
        "2/4-bit error within half a step on 1,000 blocks (worst {worst:.3} steps); l=6 4-bit file is {:.1}% of f32",
        100.0 * ratio
    ))
}

fn evaluation_protocol() -> Outcome {
    let tok = Tokenizer::gpt2();
    let labels = |ls: &[&str]| ls.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let gestures = EvalCase { prompt: String::new(), expected: "Hold".into(), labels: labels(&["Tap", "Double Tap", "Hold"]) };
    let got = |text: &str| match_label(tok, text, &gestures, DEFAULT_K);
    check!(got("Hold\n###").as_deref() == Some("Hold"), "correct first token: {:?}", got("Hold\n###"));
    check!(got("\n\nDouble Tap").as_deref() == Some("Double Tap"), "wrong class: {:?}", got("\n\nDouble Tap"));
    check!(got("qzx%").is_none(), "gibberish: {:?}", got("qzx%"));

    let tap = tok.encode("Tap");
    let mut constant = gpt2_tiny(3);
    constant.lnf_g.fill(0.0);
    constant.lnf_b.fill(1.0);
    let c = constant.config.n_embd;
    constant.token_embedding.data_mut()[tap[0] as usize * c..(tap[0] as usize + 1) * c].fill(1.0);
    let cases: Vec<EvalCase> = (0..30)
        .map(|i| EvalCase {
            prompt: format!("Proximity: [{i}, {}, 7]\nGesture:", 30 - i),
            expected: ["Tap", "Double", "Hold"][i % 3].into(),
            labels: labels(&["Tap", "Double", "Hold"]),
        })
        .collect();
    let s = evaluate(&constant, tok, &cases, &GenerationParams::greedy(DEFAULT_K), DEFAULT_K)
        .map_err(|e| e.to_string())?;
    check!((s.accuracy - 100.0 / 3.0).abs() < 1e-9, "constant classifier scored {}", s.accuracy);
    Ok(format!("match_label fixtures pass; constant classifier scores {:.2}%", s.accuracy))
}

fn generation_checks() -> Outcome {
    let tok = Tokenizer::gpt2();
    let mut w = gpt2_tiny(12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in w.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05f32..0.05));
    }
    let prompt = "Proximity: [5, 80, 3, 2]";
    let run = |p: &GenerationParams| generate(&w, tok, prompt, p).unwrap().generated_ids;
    let greedy = GenerationParams::greedy(16);
    check!(run(&greedy) == run(&greedy), "greedy decoding differs between runs");
    let sampled = |seed| GenerationParams { seed, max_new_tokens: 16, ..GenerationParams::default() };
    check!(run(&sampled(7)) == run(&sampled(7)), "seed 7 does not reproduce");
    check!(run(&sampled(7)) != run(&sampled(8)), "seeds 7 and 8 give identical samples");

    let logits = [1.0f32, 0.5, -0.3, 2.0, 0.0];
    let p = GenerationParams { temperature: 0.7, ..GenerationParams::default() };
    let z: f64 = logits.iter().map(|&l| (f64::from(l) / 0.7).exp()).sum();
    let mut counts = [0u32; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    for _ in 0..n {
        counts[sample_token(&logits, &p, &mut rng) as usize] += 1;
    }
    let mut worst = 0.0f64;
    for (c, l) in counts.iter().zip(logits) {
        let diff = (f64::from(*c) / f64::from(n) - (f64::from(l) / 0.7).exp() / z).abs();
        worst = worst.max(diff);
    }
    check!(worst <= 0.01, "sample frequency off softmax by {worst}");
    Ok(format!("greedy and seeded T=0.7 runs reproduce; 100k draws within {worst:.4} of softmax"))
}

fn run_stage(bin: &str, config: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin)
        .arg("-c")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    check!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(stdout)
}

fn end_to_end() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_edgelm");
    let dir = tempdir().unwrap();
    for e in fs::read_dir(fixtures()).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
    }
    let config = dir.path().join("pipeline.toml");
    let start = Instant::now();
    for stage in ["prepare", "tokenize", "mix", "split", "pretrain", "finetune", "merge", "quantize"] {
        run_stage(bin, &config, &[stage])?;
    }
    let generated = run_stage(bin, &config, &["generate", "--greedy", "--n", "4"])?;
    check!(generated.starts_with("Tap"), "generated {generated:?}");
    run_stage(bin, &config, &["eval"])?;
    let elapsed = start.elapsed().as_secs_f64();
    let report = fs::read_to_string(dir.path().join("work/reports/eval.csv")).unwrap();
    let accuracy: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("accuracy,,,"))
        .ok_or("no accuracy row")?
        .parse()
        .map_err(|e| format!("{e}"))?;
    check!(accuracy == 100.0, "quantized fine-tuned model scored {accuracy}%");
    check!(elapsed < 600.0, "pipeline took {elapsed:.0}s");
    Ok(format!("prepare..eval on bundled fixtures: 4-bit model scores {accuracy}% in {elapsed:.1}s"))
}

fn bench_harness() -> Outcome {
    let tok = Tokenizer::gpt2();
    let w = gpt2_tiny(13);
    let idle = vec![gpt2_tiny(14)];
    let p = GenerationParams { max_new_tokens: 8, ..GenerationParams::default() };
    let mut results = Vec::new();
    for n in [1, 2, 4] {
        for (bg, label) in [(&[][..], "none"), (&idle[..], "loaded-idle")] {
            let r = bench_generate(&w, tok, "Proximity: [1, 2, 3]", &p, n, bg, label).map_err(|e| e.to_string())?;
            check!(r.eval_rates.len() == n && r.wall_times.len() == n, "{n}/{label}: incomplete table");
            check!(r.eval_rates.iter().all(|x| x.is_finite() && *x > 0.0), "{n}/{label}: bad rate");
            let sum: f64 = r.eval_rates.iter().sum();
            check!((r.aggregate_rate - sum).abs() <= 1e-9 * sum, "{n}/{label}: aggregate {} vs {sum}", r.aggregate_rate);
            results.push(r);
        }
    }
    let dir = tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    emit_bench_report(&results, &path).map_err(|e| e.to_string())?;
    let rows = fs::read_to_string(&path).unwrap().lines().count();
    check!(rows == 7, "bench CSV has {rows} lines");
    let trend: Vec<String> = results
        .iter()
        .filter(|r| r.background == "none")
        .map(|r| format!("{}:{:.0}", r.instance_count, r.mean_rate()))
        .collect();
    Ok(format!("6 cells complete, aggregate = sum; mean tok/s by instances (none) {}", trend.join(" ")))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("parameter-count table", parameter_table),
        ("gradient correctness", gradient_check),
        ("training sanity", training_sanity),
        ("schedule and clipping", schedule_and_clipping),
        ("mixing fidelity", mixing_fidelity),
        ("tokenizer", tokenizer_checks),
        ("LoRA", lora_checks),
        ("quantization", quantization_checks),
        ("evaluation protocol", evaluation_protocol),
        ("generation", generation_checks),
        ("end-to-end smoke", end_to_end),
        ("bench harness", bench_harness),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("criterion {:>2} PASS [{name}] {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed.push(i + 1);
                format!("criterion {:>2} FAIL [{name}] {detail} ({secs:.1}s)", i + 1)
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
