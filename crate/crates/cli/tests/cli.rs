use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const MICRO: &str = r#"
seed = 7
dataset = "micro"

[graph]
num_entities = 50
num_relations = 3

[task]
k = 2
base_budget = 40
test_size = 10
stage_steps = [40]

[model]
n_layers = 1
n_heads = 2
d_model = 16

[train]
lr_peak = 1e-3
warmup_steps = 5
batch_size = 8
grad_accum = 2
checkpoint_every = 10
eval_every = 10

[sweep]
ratios = [1]
depths = [1]
seeds = [0]

[interp]
max_instances = 4

[oracle]
n = 7
max_k = 6
"#;

fn khop(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_khop"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn khop")
}

fn ok(o: Output) -> serde_json::Value {
    assert!(o.status.success(), "khop failed: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn run_dir(v: &serde_json::Value) -> PathBuf {
    PathBuf::from(v["run_dir"].as_str().unwrap())
}

fn manifest(dir: &Path, sub: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(sub).join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic_and_manifested() {
    let (tmp, cfg) = setup(MICRO);
    let a = run_dir(&ok(khop(&["gen"], &cfg, &tmp.path().join("a"))));
    let b = run_dir(&ok(khop(&["gen"], &cfg, &tmp.path().join("b"))));
    assert_eq!(a.file_name(), b.file_name());
    let (ma, mb) = (manifest(&a, "gen"), manifest(&b, "gen"));
    assert_eq!(ma, mb);
    let files = ma["artifacts"].as_array().unwrap();
    assert_eq!(files.len(), 3);
    for f in files {
        let bytes = fs::read(a.join("gen").join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(khop::sha256_hex(&bytes), f["sha256"].as_str().unwrap());
    }
    assert_eq!(ma["config"]["seed"], 7);
    assert_eq!(ma["metadata"]["weight_tying"], true);
}

#[test]
fn seed_flag_changes_run_directory() {
    let (tmp, cfg) = setup(MICRO);
    let a = run_dir(&ok(khop(&["gen"], &cfg, tmp.path())));
    let b = run_dir(&ok(khop(&["gen", "--seed", "8"], &cfg, tmp.path())));
    assert_ne!(a, b);
    assert_eq!(manifest(&b, "gen")["seeds"]["root"], 8);
}

#[test]
fn oracle_matches_fibonacci_quickly() {
    let (tmp, cfg) = setup(MICRO);
    let t = Instant::now();
    let v = ok(khop(&["oracle"], &cfg, tmp.path()));
    assert!(t.elapsed().as_secs_f64() < 5.0);
    assert_eq!(v["results"]["consistent"], true);
    let csv = fs::read_to_string(run_dir(&v).join("oracle/oracle.csv")).unwrap();
    let counts: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(counts, vec![2, 3, 5, 8, 13, 21]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (tmp, cfg) = setup(MICRO);
    let full = run_dir(&ok(khop(&["train"], &cfg, &tmp.path().join("full"))));
    let part = tmp.path().join("part");
    let stopped = ok(khop(&["train", "--stop-after", "15"], &cfg, &part));
    assert_eq!(stopped["results"]["step"], 15);
    assert_eq!(stopped["results"]["finished"], false);
    let resumed = run_dir(&ok(khop(&["train", "--resume"], &cfg, &part)));
    for name in ["ckpt-00000040.bin", "ckpt-00000020.bin", "metrics.jsonl"] {
        let a = fs::read(full.join("train").join(name)).unwrap();
        let b = fs::read(resumed.join("train").join(name)).unwrap();
        assert!(a == b, "{name} differs after resume");
    }
    assert_eq!(fs::read_to_string(full.join("train/metrics.jsonl")).unwrap().lines().count(), 40);
}

#[test]
fn downstream_subcommands_write_reports() {
    let (tmp, cfg) = setup(MICRO);
    let dir = run_dir(&ok(khop(&["train"], &cfg, tmp.path())));
    let e = ok(khop(&["eval"], &cfg, tmp.path()));
    let acc = e["results"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(fs::read_to_string(dir.join("eval/predictions.jsonl")).unwrap().lines().count(), 10);
    ok(khop(&["probe"], &cfg, tmp.path()));
    assert!(dir.join("probe/probe.csv").exists());
    ok(khop(&["patch"], &cfg, tmp.path()));
    assert!(dir.join("patch/patch.csv").exists());
    let s = ok(khop(&["sweep", "--workers", "2"], &cfg, tmp.path()));
    assert!(s["results"].is_object());
    for f in ["budget.csv", "depth.csv", "cells.jsonl", "summary.json"] {
        assert!(dir.join("sweep").join(f).exists(), "{f}");
    }
    for sub in ["train", "eval", "probe", "patch", "sweep"] {
        let m = manifest(&dir, sub);
        for f in m["artifacts"].as_array().unwrap() {
            assert!(dir.join(sub).join(f["path"].as_str().unwrap()).exists());
        }
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let cases = [
        (MICRO.replace("k = 2", "k = 9"), "task.k"),
        (MICRO.replace("budget_ratio", "x").replace("[task]\n", "[task]\nbudget_ratio = 3\n"), "task.budget_ratio"),
        (MICRO.replace("d_model = 16", "d_model = 16\nwidth = 3"), "width"),
        (MICRO.replace("stage_steps = [40]", "stage_steps = [40, 40]"), "task.stage_steps"),
        (MICRO.replace("num_entities = 50", "num_entities = 26"), "graph.num_entities"),
        (MICRO.replace("n_heads = 2", "n_heads = 3"), "model"),
    ];
    for (text, field) in cases {
        let (tmp, cfg) = setup(&text);
        let o = khop(&["gen"], &cfg, tmp.path());
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(field), "expected {field} in: {err}");
    }
}

#[test]
fn eval_without_checkpoint_fails() {
    let (tmp, cfg) = setup(MICRO);
    let o = khop(&["eval"], &cfg, tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}
