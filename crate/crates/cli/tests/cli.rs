use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edgelm::model::{init_model, ModelConfig};
use tempfile::tempdir;

fn edgelm(config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_edgelm"));
    if let Some(c) = config {
        cmd.arg("-c").arg(c);
    }
    cmd.args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const DATA_STAGES: &str = r#"
seed = 7

[prepare]
out_dir = "prepared"

[[prepare.text]]
name = "a"
path = "a.txt"

[[prepare.text]]
name = "b"
path = "b.txt"

[tokenize]
shard_bytes = 1048576

[[tokenize.corpus]]
docs = "prepared/a.jsonl"
out_dir = "tok/a"

[[tokenize.corpus]]
docs = "prepared/b.jsonl"
out_dir = "tok/b"

[mix]
out_dir = "mixed"
shard_bytes = 1048576
target_tokens = 4000

[[mix.source]]
dir = "tok/a"
ratio = 0.4

[[mix.source]]
dir = "tok/b"
ratio = 0.6
"#;

fn data_workspace(dir: &Path) -> std::path::PathBuf {
    let para = |word: &str, n: usize| {
        (0..n)
            .map(|i| format!("{word} number {i} is here."))
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    fs::write(dir.join("a.txt"), para("apple", 400)).unwrap();
    fs::write(dir.join("b.txt"), para("banana", 400)).unwrap();
    let config = dir.join("pipeline.toml");
    fs::write(&config, DATA_STAGES).unwrap();
    config
}

#[test]
fn mix_reports_realized_shares_and_reruns_are_noops() {
    let dir = tempdir().unwrap();
    let config = data_workspace(dir.path());
    for stage in ["prepare", "tokenize", "mix"] {
        let o = edgelm(Some(&config), &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let mixed = fs::read(dir.path().join("mixed/shard_00000.bin")).unwrap();

    let again = edgelm(Some(&config), &["mix"]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("up to date"), "{}", stdout(&again));

    let forced = edgelm(Some(&config), &["mix", "--force"]);
    let out = stdout(&forced);
    let shares: Vec<f64> = out
        .lines()
        .filter_map(|l| l.split(" realized ").nth(1))
        .map(|r| r.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(shares.len(), 2, "{out}");
    assert!((shares[0] - 0.4).abs() < 0.02 && (shares[1] - 0.6).abs() < 0.02, "{shares:?}");
    assert_eq!(fs::read(dir.path().join("mixed/shard_00000.bin")).unwrap(), mixed);

    // A different seed is a different mixture and invalidates the stamp.
    let reseeded = edgelm(Some(&config), &["mix", "--seed", "8"]);
    assert!(!stdout(&reseeded).contains("up to date"));
    assert_ne!(fs::read(dir.path().join("mixed/shard_00000.bin")).unwrap(), mixed);
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[quantize]\nmodel = \"m\"\nout = \"q\"\nbitz = 4\n").unwrap();
    let o = edgelm(Some(&config), &["quantize"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bitz"), "{err}");
    assert!(err.contains("bad.toml:4"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");

    fs::write(&config, "seed = 1\ntypo_section = 3\n").unwrap();
    let o = edgelm(Some(&config), &["mix"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("typo_section"));
}

#[test]
fn missing_section_and_unknown_subcommand_fail() {
    let dir = tempdir().unwrap();
    let config = dir.path().join("empty.toml");
    fs::write(&config, "seed = 3\n").unwrap();
    let o = edgelm(Some(&config), &["split"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[split]"), "{}", stderr(&o));
    assert!(!edgelm(None, &["distill"]).status.success());
}

#[test]
fn generate_flags() {
    let dir = tempdir().unwrap();
    let cfg = ModelConfig {
        n_layer: 1,
        n_embd: 32,
        vocab_size: 50_257,
        max_seq_len: 64,
        n_head: 2,
    };
    let model = dir.path().join("m.ckpt");
    init_model(&cfg, 1).unwrap().save(&model).unwrap();
    let m = model.to_str().unwrap();

    let args = ["generate", "--model", m, "--prompt", "Proximity: [1, 2]", "--greedy", "--n", "4", "-t", "1"];
    let a = edgelm(None, &args);
    assert!(a.status.success(), "{}", stderr(&a));
    let report = stdout(&a);
    let generated: usize = report
        .lines()
        .find_map(|l| l.strip_prefix("generated tokens:"))
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((1..=4).contains(&generated), "{report}");
    assert!(report.contains("prompt tokens:"));

    // Greedy output does not depend on the seed; sampled output does.
    let text = |o: &Output| stdout(o).split("\n\nprompt tokens:").next().unwrap().to_string();
    let b = edgelm(None, &[&args[..], &["--seed", "99"]].concat());
    assert_eq!(text(&a), text(&b));
    let sample = |seed: &str| {
        let o = edgelm(None, &["generate", "--model", m, "--prompt", "x", "--temp", "0.7", "--repeat-penalty", "1.1", "--n", "8", "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        text(&o)
    };
    assert_eq!(sample("5"), sample("5"));

    let o = edgelm(None, &["generate", "--model", m]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no prompt"));
}
