use edgelm::eval::{evaluate, EvalCase, DEFAULT_K};
use edgelm::finetune::{
    build_ft_dataset, finetune, merge, read_records, render_prompt, write_records,
    FinetuneRecord, LoraAdapter, LoraConfig, Projection, SplitRatios,
};
use edgelm::inference::GenerationParams;
use edgelm::model::{init_model, ModelConfig};
use edgelm::tokenizer::Tokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

const INSTRUCTION: &str =
    "Classify the gesture from the proximity readings. Give your answer only as Tap, Double, or Hold.";

/// Hold keeps the sensor covered, Tap shows one spike, Double two.
fn gesture_records(n: usize, seed: u64) -> Vec<FinetuneRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = ["Tap", "Double", "Hold"][i % 3];
            let mut v: Vec<u32> = (0..8).map(|_| rng.random_range(0..6)).collect();
            match label {
                "Hold" => v.iter_mut().for_each(|x| *x = rng.random_range(85..100)),
                "Tap" => v[rng.random_range(2..6)] = rng.random_range(60..100),
                _ => {
                    let a = rng.random_range(1..3);
                    v[a] = rng.random_range(60..100);
                    v[a + 3] = rng.random_range(60..100);
                }
            }
            let body = v.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
            FinetuneRecord::new(INSTRUCTION, format!("Proximity: [{body}]"), label)
        })
        .collect()
}

fn tiny_base() -> edgelm::model::ModelWeights {
    let cfg = ModelConfig {
        n_layer: 2,
        n_embd: 64,
        vocab_size: 50_257,
        max_seq_len: 128,
        n_head: 2,
    };
    init_model(&cfg, 7).unwrap()
}

fn cases_for(records: &[FinetuneRecord]) -> Vec<EvalCase> {
    records
        .iter()
        .map(|r| EvalCase {
            prompt: render_prompt(r, false),
            expected: r.response.clone(),
            labels: vec!["Tap".into(), "Double".into(), "Hold".into()],
        })
        .collect()
}

#[test]
fn memorizes_twenty_records() {
    let tok = Tokenizer::gpt2();
    // With random tied embeddings the reachable label-logit margin grows
    // with width; at C = 64 some record sets stall short of 100%.
    let cfg = ModelConfig {
        n_embd: 128,
        ..tiny_base().config
    };
    let base = init_model(&cfg, 7).unwrap();
    let records = gesture_records(20, 1);
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
    let out = finetune(&base, &cfg, tok, &records, &records).unwrap();
    let merged = merge(&base, &out.adapter).unwrap();
    let summary = evaluate(&merged, tok, &cases_for(&records), &GenerationParams::greedy(DEFAULT_K), DEFAULT_K).unwrap();
    assert_eq!(summary.accuracy, 100.0, "best step {:?}: {:?}", out.best_step, summary.outcomes);
}

#[test]
fn zero_steps_returns_identity_adapter() {
    let tok = Tokenizer::gpt2();
    let base = tiny_base();
    let records = gesture_records(6, 2);
    let cfg = LoraConfig {
        steps: 0,
        ..LoraConfig::default()
    };
    let out = finetune(&base, &cfg, tok, &records, &[]).unwrap();
    assert!(out.adapter.layers.iter().all(|l| l.b.data().iter().all(|&v| v == 0.0)));
    assert!(out.metrics.is_empty());
    assert_eq!(out.best_step, None);
}

#[test]
fn metrics_and_selection_are_consistent() {
    let tok = Tokenizer::gpt2();
    let base = tiny_base();
    let records = gesture_records(9, 3);
    let cfg = LoraConfig {
        steps: 20,
        grad_accum: 2,
        batch: 2,
        eval_interval: 5,
        ..LoraConfig::default()
    };
    let out = finetune(&base, &cfg, tok, &records[..6], &records[6..]).unwrap();
    assert_eq!(out.metrics.len(), 20);
    let evals: Vec<(usize, f32)> = out
        .metrics
        .iter()
        .filter_map(|m| m.eval_loss.map(|l| (m.step, l)))
        .collect();
    assert_eq!(evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    let best = evals.iter().fold(evals[0], |a, b| if b.1 < a.1 { *b } else { a });
    assert_eq!(out.best_step, Some(best.0));
    assert_eq!(out.best_eval_loss, Some(best.1));

    let dir = tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    edgelm::finetune::write_metrics(&path, &out.metrics).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("step,train_loss,eval_loss\n"));

    let again = finetune(&base, &cfg, tok, &records[..6], &records[6..]).unwrap();
    assert_eq!(again.adapter, out.adapter);
}

#[test]
fn all_records_overflowing_context_is_an_error() {
    let tok = Tokenizer::gpt2();
    let base = tiny_base();
    let long = FinetuneRecord::new("word ".repeat(200), "", "Hold");
    let err = finetune(&base, &LoraConfig::default(), tok, &[long], &[]).unwrap_err();
    assert!(matches!(err, edgelm::Error::ContextOverflow { .. }));
}

#[test]
fn adapter_file_round_trip() {
    let base = tiny_base();
    let mut a = LoraAdapter::new(&base.config, 4, 8.0, &[Projection::Qkv, Projection::FfnDown], 3).unwrap();
    a.layers[1].b.data_mut()[0] = 0.5;
    let dir = tempdir().unwrap();
    let p = dir.path().join("adapter.lora");
    a.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..8], b"TLLMLORA");
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
    assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 8.0);
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 4);
    assert_eq!(&bytes[28..34], b"h0.qkv");
    let b = LoraAdapter::load(&p, &base.config).unwrap();
    assert_eq!(a, b);

    let other = ModelConfig { n_embd: 32, ..base.config };
    assert!(LoraAdapter::load(&p, &other).is_err());
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(LoraAdapter::load(&p, &base.config).is_err());
}

#[test]
fn split_is_a_seeded_partition() {
    let recs = gesture_records(50, 4);
    let (a, b, c) = build_ft_dataset(&recs, SplitRatios::default(), 9).unwrap();
    let (a2, _, _) = build_ft_dataset(&recs, SplitRatios::default(), 9).unwrap();
    assert_eq!(a, a2);
    let mut all: Vec<String> = a.iter().chain(&b).chain(&c).map(|r| format!("{r:?}")).collect();
    let mut orig: Vec<String> = recs.iter().map(|r| format!("{r:?}")).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
    let bad = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
    assert!(build_ft_dataset(&recs, bad, 9).is_err());
}

#[test]
fn records_jsonl_round_trip() {
    let recs = gesture_records(5, 5);
    let dir = tempdir().unwrap();
    let p = dir.path().join("r.jsonl");
    write_records(&p, &recs).unwrap();
    assert_eq!(read_records(&p).unwrap(), recs);
    std::fs::write(&p, "{\"instruction\":\"x\",\"input\":\"\",\"output\":\"\"}\n").unwrap();
    assert!(read_records(&p).is_err());
}
