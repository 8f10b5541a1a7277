// SPDX-License-Identifier: MIT OR Apache-2.0

//! `khop`: generate datasets, train, evaluate, sweep, probe, patch, and run
//! the composition oracle from a single TOML run configuration.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use khop::checkpoint::Checkpoint;
use khop::corpus::split_to_jsonl;
use khop::eval::{budget_sweep, depth_sweep, predict_all, CellSetup, SweepResult};
use khop::graph::enumerate_queries;
use khop::interp::{collect_states, patch_sweep, probe_grid, PatchOptions};
use khop::theory::{fib_count, oracle_csv, oracle_table};
use khop::train::{Control, Observer, StepRecord, TrainState};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "khop", version, about = "k-hop implicit reasoning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps, probes and patching.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Continue `train` from the latest checkpoint in the run directory.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write the graph, vocabulary and rendered dataset.
    Gen,
    /// Train one model; checkpoints and metrics go to `train/`.
    Train {
        /// Stop once this many total steps are done (the run stays resumable).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score the latest checkpoint on the test split.
    Eval,
    /// Budget sweep over `sweep.ratios`, and depth sweep over `sweep.depths`.
    Sweep,
    /// Linear probes on the residual stream of the latest checkpoint.
    Probe,
    /// Activation patching on the latest (or every) checkpoint.
    Patch,
    /// Enumerate f/g compositions and evaluate the depth bound.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Probe => "probe",
            Command::Patch => "patch",
            Command::Oracle => "oracle",
        }
    }
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    workers: usize,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<serde_json::Value>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.files.push(json!({ "path": name, "sha256": khop::sha256_hex(bytes), "bytes": bytes.len() }));
    }

    fn manifest(self, run: &Run, sub: &str, results: serde_json::Value) -> Result<()> {
        let m = json!({
            "subcommand": sub,
            "config_hash": run.cfg.hash(),
            "config": run.cfg,
            "seeds": run.cfg.seeds(),
            "version": env!("CARGO_PKG_VERSION"),
            "metadata": {
                "weight_tying": true,
                "dropout": run.cfg.model.dropout,
                "optimizer_moments_across_stages": "kept",
                "lr_schedule_per_stage": "restarted",
                "word_application_order": "first letter applied first",
                "overlap_rule": khop::graph::OVERLAP_RULE,
                "corruption_rule": "all hop positions except the corrupted one match, answer included",
            },
            "artifacts": self.files,
            "results": results,
        });
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let path = cli.config.as_ref().context("--config is required")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.display().to_string();
    }
    cfg.validate()?;
    let dir = Path::new(&cfg.out).join(format!("{}-k{}-{}", cfg.dataset, cfg.task.k, cfg.hash()));
    let run = Run { cfg, dir, workers: cli.workers.max(1) };
    let sub = cli.command.name();
    let artifacts = Artifacts::new(run.dir.join(sub))?;
    let results = match cli.command {
        Command::Gen => gen(&run, artifacts)?,
        Command::Train { stop_after } => train(&run, artifacts, cli.resume, stop_after)?,
        Command::Eval => eval(&run, artifacts)?,
        Command::Sweep => sweep(&run, artifacts)?,
        Command::Probe => probe(&run, artifacts)?,
        Command::Patch => patch(&run, artifacts)?,
        Command::Oracle => oracle(&run, artifacts)?,
    };
    println!("{}", serde_json::to_string(&json!({ "run_dir": run.dir, "subcommand": sub, "results": results }))?);
    Ok(())
}

fn setup(run: &Run) -> Result<CellSetup> {
    Ok(CellSetup::new(&run.cfg.task_spec(), run.cfg.task.budget_ratio, None, run.cfg.seeds().cell)?)
}

fn gen(run: &Run, mut art: Artifacts) -> Result<serde_json::Value> {
    let s = setup(run)?;
    art.write("graph.txt", s.graph.to_text().as_bytes())?;
    art.write("vocab.json", serde_json::to_string(&s.vocab)?.as_bytes())?;
    let jsonl = split_to_jsonl(&s.graph, &s.vocab, &s.split)?;
    art.write("dataset.jsonl", jsonl.as_bytes())?;
    let results = json!({
        "train_questions": s.split.train_queries.len(),
        "aux_questions": s.split.aux_queries.len(),
        "test_questions": s.split.test_queries.len(),
        "train_records": s.split.num_train_records(),
        "vocab_size": s.vocab.len(),
    });
    art.manifest(run, "gen", results.clone())?;
    Ok(results)
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.bin")
}

fn checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|n| n.strip_suffix(".bin")) {
            if let Ok(step) = step.parse() {
                out.push((step, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn latest_checkpoint(run: &Run) -> Result<Checkpoint> {
    let all = checkpoints(&run.dir.join("train"))?;
    let (_, path) = all.last().context("no checkpoint in train/; run `khop train` first")?;
    Ok(Checkpoint::load(path)?)
}

struct Writer<'a> {
    dir: &'a Path,
    meta: serde_json::Value,
    metrics: fs::File,
    stop_after: Option<u64>,
}

impl Observer for Writer<'_> {
    fn after_step(&mut self, state: &TrainState, record: &mut StepRecord) -> khop::Result<Control> {
        writeln!(self.metrics, "{}", serde_json::to_string(record)?)?;
        match self.stop_after {
            Some(s) if state.model.step >= s => Ok(Control::Stop),
            _ => Ok(Control::Continue),
        }
    }

    fn checkpoint(&mut self, state: &TrainState) -> khop::Result<()> {
        let mut c = Checkpoint::of_state(state);
        c.meta = self.meta.clone();
        c.save(&self.dir.join(checkpoint_name(state.model.step)))
    }
}

fn train(run: &Run, mut art: Artifacts, resume: bool, stop_after: Option<u64>) -> Result<serde_json::Value> {
    let s = setup(run)?;
    let dir = art.dir.clone();
    let meta = json!({ "config_hash": run.cfg.hash() });
    let metrics_path = dir.join("metrics.jsonl");
    let existing = checkpoints(&dir)?;
    let mut state = match (resume, existing.last()) {
        (true, Some((step, path))) => {
            let state = Checkpoint::load(path)?.into_state()?;
            // Drop metric records past the checkpoint being resumed.
            let kept: String = fs::read_to_string(&metrics_path)
                .unwrap_or_default()
                .lines()
                .filter(|l| serde_json::from_str::<StepRecord>(l).is_ok_and(|r| r.step <= *step))
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&metrics_path, kept)?;
            for (st, p) in &existing {
                if st > step {
                    fs::remove_file(p)?;
                }
            }
            state
        }
        _ => {
            for (_, p) in &existing {
                fs::remove_file(p)?;
            }
            fs::write(&metrics_path, "")?;
            s.initial_state()?
        }
    };
    let metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let mut writer = Writer { dir: &dir, meta: meta.clone(), metrics, stop_after };
    if !state.finished(&s.plan) && stop_after.is_none_or(|n| state.model.step < n) {
        s.run(&mut state, run.cfg.task.early_stop, Some(&mut writer))?;
    }
    drop(writer);
    // Always leave a resumable checkpoint at the current step.
    let last = dir.join(checkpoint_name(state.model.step));
    if !last.exists() {
        let mut c = Checkpoint::of_state(&state);
        c.meta = meta;
        c.save(&last)?;
    }
    let acc = khop::eval::accuracy(&state.model, &s.test)?;
    for (_, p) in checkpoints(&dir)? {
        let bytes = fs::read(&p)?;
        art.record(p.file_name().and_then(|n| n.to_str()).expect("utf-8 name"), &bytes);
    }
    art.record("metrics.jsonl", &fs::read(&metrics_path)?);
    let results = json!({
        "step": state.model.step,
        "finished": state.finished(&s.plan),
        "test_accuracy": acc,
        "param_checksum": state.model.param_checksum(),
    });
    art.manifest(run, "train", results.clone())?;
    Ok(results)
}

fn eval(run: &Run, mut art: Artifacts) -> Result<serde_json::Value> {
    let s = setup(run)?;
    let ck = latest_checkpoint(run)?;
    let preds = predict_all(&ck.model, &s.test)?;
    let mut lines = String::new();
    for (i, inst) in s.test.iter().enumerate() {
        let rec = json!({
            "index": i,
            "text": inst.text,
            "gold": s.vocab.token(preds.gold[i])?,
            "predicted": s.vocab.token(preds.predicted[i])?,
            "correct": preds.gold[i] == preds.predicted[i],
        });
        lines.push_str(&(serde_json::to_string(&rec)? + "\n"));
    }
    art.write("predictions.jsonl", lines.as_bytes())?;
    let results = json!({ "checkpoint_step": ck.model.step, "accuracy": preds.accuracy()?, "instances": s.test.len() });
    art.write("eval.json", (serde_json::to_string_pretty(&results)? + "\n").as_bytes())?;
    art.manifest(run, "eval", results.clone())?;
    Ok(results)
}

fn sweep(run: &Run, mut art: Artifacts) -> Result<serde_json::Value> {
    let task = run.cfg.task_spec();
    let tree = khop::rng::SeedTree::new(run.cfg.seed);
    let seeds: Vec<u64> = run.cfg.sweep.seeds.iter().map(|&s| tree.seed("cell", &[s])).collect();
    let mut all = SweepResult::default();
    if !run.cfg.sweep.ratios.is_empty() {
        let r = budget_sweep(&task, &run.cfg.sweep.ratios, &seeds, run.workers)?;
        art.write("budget.csv", r.ratio_csv().as_bytes())?;
        all.cells.extend(r.cells);
    }
    if !run.cfg.sweep.depths.is_empty() {
        let r = depth_sweep(&task, &run.cfg.sweep.depths, run.cfg.task.budget_ratio, &seeds, run.workers)?;
        art.write("depth.csv", r.depth_csv().as_bytes())?;
        all.cells.extend(r.cells);
    }
    let cells: String = all.cells.iter().map(|c| serde_json::to_string(c).expect("plain") + "\n").collect();
    art.write("cells.jsonl", cells.as_bytes())?;
    let summary = all.summary();
    art.write("summary.json", (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    art.manifest(run, "sweep", summary.clone())?;
    Ok(summary)
}

fn probe(run: &Run, mut art: Artifacts) -> Result<serde_json::Value> {
    let s = setup(run)?;
    let ck = latest_checkpoint(run)?;
    let store = collect_states(&ck.model, &s.test)?;
    let grid = probe_grid(&store, &s.split.test_queries, &s.vocab, run.cfg.seeds().interp, &run.cfg.interp.probe, run.workers)?;
    art.write("probe.csv", grid.to_csv().as_bytes())?;
    let results = json!({
        "checkpoint_step": ck.model.step,
        "instances": grid.n_instances,
        "chance": 1.0 / s.graph.layer_size() as f64,
        "positions": grid.positions,
        "answer_slot_accuracy": grid.last_position(),
    });
    art.write("probe.json", (serde_json::to_string_pretty(&json!({ "grid": grid, "summary": results }))? + "\n").as_bytes())?;
    art.manifest(run, "probe", results.clone())?;
    Ok(results)
}

fn patch(run: &Run, mut art: Artifacts) -> Result<serde_json::Value> {
    let s = setup(run)?;
    let ic = &run.cfg.interp;
    let families = if ic.families.is_empty() { (1..=run.cfg.task.k).collect() } else { ic.families.clone() };
    let opts = PatchOptions {
        site: ic.site,
        mode: ic.positions,
        families,
        max_instances: ic.max_instances,
        cap: ic.corruption_cap,
        seed: run.cfg.seeds().interp,
    };
    let pool = enumerate_queries(&s.graph, run.cfg.task.k, run.cfg.task_spec().constraint.as_ref())?;
    let paths: Vec<PathBuf> = if ic.across_checkpoints {
        checkpoints(&run.dir.join("train"))?.into_iter().map(|(_, p)| p).collect()
    } else {
        checkpoints(&run.dir.join("train"))?.into_iter().last().map(|(_, p)| p).into_iter().collect()
    };
    if paths.is_empty() {
        bail!("no checkpoint in train/; run `khop train` first");
    }
    let mut reports = Vec::new();
    let mut csv = String::new();
    for p in &paths {
        let ck = Checkpoint::load(p)?;
        let r = patch_sweep(&ck.model, &s.graph, &s.vocab, &s.split.test_queries, &pool, &opts, run.workers)?;
        let body = r.to_csv();
        csv.push_str(if csv.is_empty() { &body } else { body.split_once('\n').map_or("", |x| x.1) });
        reports.push(r);
    }
    art.write("patch.csv", csv.as_bytes())?;
    art.write("patch.json", (serde_json::to_string_pretty(&reports)? + "\n").as_bytes())?;
    let peaks: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            json!({
                "checkpoint": r.checkpoint,
                "peak_layers": (0..r.families.len()).map(|f| r.peak_layer(f)).collect::<Vec<_>>(),
                "counts": r.counts,
                "skipped": r.skipped,
            })
        })
        .collect();
    let results = json!({ "families": opts.families, "site": opts.site, "reports": peaks });
    art.manifest(run, "patch", results.clone())?;
    Ok(results)
}

fn oracle(run: &Run, mut art: Artifacts) -> Result<serde_json::Value> {
    let o = &run.cfg.oracle;
    let ks: Vec<usize> = (1..=o.max_k).collect();
    let rows = oracle_table(o.n, &ks, o.precision_bits, o.d, o.heads)?;
    let consistent = rows.iter().all(|r| {
        r.word_count as u128 == fib_count(r.k).fib
            && r.distinct_count == r.word_count
            && r.sink_rule_holds
            && r.fib as f64 >= r.fib_lower_bound
    });
    art.write("oracle.csv", oracle_csv(&rows).as_bytes())?;
    let results = json!({ "n": o.n, "max_k": o.max_k, "consistent": consistent });
    art.manifest(run, "oracle", results.clone())?;
    if !consistent {
        bail!("composition counts disagree with the Fibonacci prediction");
    }
    Ok(results)
}
