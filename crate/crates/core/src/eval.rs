// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy answer evaluation and training sweeps over budget and depth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{RenderedInstance, Vocab};
use crate::graph::{
    build_staged_split, default_aux_sizes, enumerate_queries, sample_aux_queries, DatasetSplit, EntityGraph,
    GraphSpec, RelationConstraint,
};
use crate::model::{Batch, ModelConfig, ModelState};
use crate::rng::SeedTree;
use crate::tensor::Scalar;
use crate::train::{
    train, Control, Metrics, Observer, StagePlan, StepRecord, TrainConfig, TrainMode, TrainState, TrainingData,
};
use crate::{Error, Result};

/// Accuracy at or above which a cell counts as learned.
pub const LEARNED_THRESHOLD: f64 = 0.8;

/// Argmax with ties going to the lowest id.
pub fn argmax<T: Scalar>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy next token after `prompt` (which ends at the answer slot).
pub fn predict_answer(model: &ModelState, prompt: &[u32]) -> Result<u32> {
    let batch = Batch::from_sequences(&[prompt]);
    let logits = model.logits_at(&batch, &[prompt.len() - 1], &[])?;
    Ok(argmax(&logits[0]))
}

/// Per-instance greedy predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictions {
    pub predicted: Vec<u32>,
    pub gold: Vec<u32>,
}

impl Predictions {
    pub fn accuracy(&self) -> Result<f64> {
        if self.gold.is_empty() {
            return Err(Error::EmptySplit);
        }
        let hits = self.predicted.iter().zip(&self.gold).filter(|(p, g)| p == g).count();
        Ok(hits as f64 / self.gold.len() as f64)
    }
}

const EVAL_BATCH: usize = 256;

pub fn predict_all(model: &ModelState, instances: &[RenderedInstance]) -> Result<Predictions> {
    let mut predicted = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|i| i.tokens.as_slice()).collect();
        let positions: Vec<usize> = chunk.iter().map(|i| i.answer_position).collect();
        let logits = model.logits_at(&Batch::from_sequences(&seqs), &positions, &[])?;
        predicted.extend(logits.iter().map(|l| argmax(l)));
    }
    Ok(Predictions { predicted, gold: instances.iter().map(|i| i.answer_token).collect() })
}

pub fn accuracy(model: &ModelState, instances: &[RenderedInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptySplit);
    }
    predict_all(model, instances)?.accuracy()
}

pub fn render_test_set(graph: &EntityGraph, vocab: &Vocab, split: &DatasetSplit) -> Result<Vec<RenderedInstance>> {
    split.test_queries.iter().map(|q| RenderedInstance::question(graph, vocab, q)).collect()
}

/// Evaluates every `every` steps; optionally stops once the final stage
/// reaches `stop_at`.
pub struct EvalObserver<'a> {
    pub instances: &'a [RenderedInstance],
    pub every: u64,
    pub stop_at: Option<f64>,
    pub final_stage: usize,
}

impl Observer for EvalObserver<'_> {
    fn after_step(&mut self, state: &TrainState, record: &mut StepRecord) -> Result<Control> {
        if record.step % self.every != 0 {
            return Ok(Control::Continue);
        }
        let acc = accuracy(&state.model, self.instances)?;
        record.test_accuracy = Some(acc);
        match self.stop_at {
            Some(t) if acc >= t && record.stage == self.final_stage => Ok(Control::Stop),
            _ => Ok(Control::Continue),
        }
    }
}

/// Everything needed to train and score one sweep cell except the swept
/// quantities (budget ratio, depth, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dataset: String,
    pub graph: GraphSpec,
    pub k: usize,
    pub mode: TrainMode,
    /// One entry for baseline/mixed, k − 1 for curriculum.
    pub stage_steps: Vec<u64>,
    /// Base count of training questions (ratio ×1).
    pub base_budget: usize,
    pub test_size: usize,
    /// Lower-hop auxiliary question counts. `None` uses the defaults for
    /// mixed and curriculum modes and none for baseline.
    #[serde(default)]
    pub aux_sizes: Option<BTreeMap<usize, usize>>,
    #[serde(default)]
    pub constraint: Option<RelationConstraint>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Stop training once test accuracy reaches this value.
    #[serde(default)]
    pub early_stop: Option<f64>,
}

impl TaskSpec {
    pub fn plan(&self) -> Result<StagePlan> {
        match self.mode {
            TrainMode::Baseline => Ok(StagePlan::baseline(self.k, self.single_stage_steps()?)),
            TrainMode::Mixed => Ok(StagePlan::mixed(self.k, self.single_stage_steps()?)),
            TrainMode::Curriculum => StagePlan::curriculum(self.k, &self.stage_steps),
        }
    }

    fn single_stage_steps(&self) -> Result<u64> {
        match self.stage_steps.as_slice() {
            [s] => Ok(*s),
            _ => Err(Error::TrainConfig("baseline and mixed modes take one stage length".into())),
        }
    }

    pub fn aux_sizes(&self, graph: &EntityGraph) -> BTreeMap<usize, usize> {
        match (&self.aux_sizes, self.mode) {
            (Some(s), _) => s.clone(),
            (None, TrainMode::Baseline) => BTreeMap::new(),
            (None, _) => default_aux_sizes(graph, self.k),
        }
    }

    /// Graph, vocab and split for a cell.
    pub fn build_data(&self, budget_ratio: usize, seed: u64) -> Result<(EntityGraph, Vocab, DatasetSplit)> {
        let graph = self.graph.build()?;
        let vocab = Vocab::build(&graph);
        let tree = SeedTree::new(seed);
        let queries = enumerate_queries(&graph, self.k, self.constraint.as_ref())?;
        let aux = sample_aux_queries(&graph, &self.aux_sizes(&graph), tree.seed("aux", &[]))?;
        let split = build_staged_split(
            &graph,
            &queries,
            aux,
            self.base_budget,
            budget_ratio,
            self.test_size,
            tree.seed("split", &[budget_ratio as u64]),
        )?;
        Ok((graph, vocab, split))
    }

    pub fn model_config(&self, vocab: &Vocab, data: &TrainingData, depth: Option<usize>) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.vocab_size = vocab.len();
        cfg.context_length = cfg.context_length.max(data.max_len());
        if let Some(d) = depth {
            cfg.n_layers = d;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dataset: String,
    pub k: usize,
    pub mode: TrainMode,
    pub budget_ratio: usize,
    pub depth: usize,
    pub seed: u64,
    pub final_accuracy: f64,
    pub curve: Vec<(u64, f64)>,
    pub steps: u64,
    pub learned: bool,
}

/// A trained cell: result plus the artifacts needed for further analysis.
pub struct TrainedCell {
    pub result: CellResult,
    pub setup: CellSetup,
    pub state: TrainState,
    pub metrics: Metrics,
}

/// Data, plan and configuration of one cell, before training.
pub struct CellSetup {
    pub graph: EntityGraph,
    pub vocab: Vocab,
    pub split: DatasetSplit,
    pub data: TrainingData,
    pub test: Vec<RenderedInstance>,
    pub plan: StagePlan,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub init_seed: u64,
}

impl CellSetup {
    pub fn new(task: &TaskSpec, budget_ratio: usize, depth: Option<usize>, seed: u64) -> Result<Self> {
        let (graph, vocab, split) = task.build_data(budget_ratio, seed)?;
        let data = TrainingData::from_split(&graph, &vocab, &split)?;
        let test = render_test_set(&graph, &vocab, &split)?;
        let model_config = task.model_config(&vocab, &data, depth);
        let tree = SeedTree::new(seed);
        Ok(Self {
            graph,
            vocab,
            split,
            data,
            test,
            plan: task.plan()?,
            model_config,
            train_config: TrainConfig { seed: tree.seed("train", &[]), ..task.train.clone() },
            init_seed: tree.seed("init", &[]),
        })
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        Ok(TrainState::new(ModelState::init(self.model_config.clone(), self.init_seed)?))
    }

    /// Trains from `state` to the end of the plan (or an early stop).
    pub fn run(
        &self,
        state: &mut TrainState,
        early_stop: Option<f64>,
        extra: Option<&mut dyn Observer>,
    ) -> Result<Metrics> {
        let mut evaluator = EvalObserver {
            instances: &self.test,
            every: self.train_config.eval_every,
            stop_at: early_stop,
            final_stage: self.plan.stages.len() - 1,
        };
        match extra {
            Some(obs) => train(state, &self.plan, &self.train_config, &self.data, &mut Chain(&mut evaluator, obs)),
            None => train(state, &self.plan, &self.train_config, &self.data, &mut evaluator),
        }
    }
}

/// Trains and scores one cell. `extra` sees every step after the
/// evaluation hook has filled in accuracy.
pub fn train_cell(
    task: &TaskSpec,
    budget_ratio: usize,
    depth: Option<usize>,
    seed: u64,
    extra: Option<&mut dyn Observer>,
) -> Result<TrainedCell> {
    let setup = CellSetup::new(task, budget_ratio, depth, seed)?;
    let mut state = setup.initial_state()?;
    let metrics = setup.run(&mut state, task.early_stop, extra)?;
    let final_accuracy = accuracy(&state.model, &setup.test)?;
    let mut curve = metrics.accuracy_curve();
    if curve.last().map(|c| c.0) != Some(state.model.step) {
        curve.push((state.model.step, final_accuracy));
    }
    let result = CellResult {
        dataset: task.dataset.clone(),
        k: task.k,
        mode: task.mode,
        budget_ratio,
        depth: setup.model_config.n_layers,
        seed,
        final_accuracy,
        curve,
        steps: state.model.step,
        learned: final_accuracy >= LEARNED_THRESHOLD,
    };
    Ok(TrainedCell { result, setup, state, metrics })
}

/// Runs two observers in order; stops if either asks to.
pub struct Chain<'a, 'b>(pub &'a mut dyn Observer, pub &'b mut dyn Observer);

impl Observer for Chain<'_, '_> {
    fn after_step(&mut self, state: &TrainState, record: &mut StepRecord) -> Result<Control> {
        let a = self.0.after_step(state, record)?;
        let b = self.1.after_step(state, record)?;
        Ok(if a == Control::Stop || b == Control::Stop { Control::Stop } else { Control::Continue })
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.0.checkpoint(state)?;
        self.1.checkpoint(state)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    Ratio,
    Depth,
}

impl SweepResult {
    fn key(c: &CellResult, axis: Axis) -> usize {
        match axis {
            Axis::Ratio => c.budget_ratio,
            Axis::Depth => c.depth,
        }
    }

    /// Mean final accuracy over seeds per (dataset, k, axis value).
    fn grid(&self, axis: Axis) -> BTreeMap<(String, usize), BTreeMap<usize, f64>> {
        let mut sums: BTreeMap<(String, usize), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
        for c in &self.cells {
            let e = sums.entry((c.dataset.clone(), c.k)).or_default().entry(Self::key(c, axis)).or_default();
            e.0 += c.final_accuracy;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(row, cols)| (row, cols.into_iter().map(|(x, (s, n))| (x, s / n as f64)).collect()))
            .collect()
    }

    fn min_learned(&self, dataset: &str, k: usize, axis: Axis) -> Option<usize> {
        let grid = self.grid(axis);
        let row = grid.get(&(dataset.to_string(), k))?;
        row.iter().find(|(_, &acc)| acc >= LEARNED_THRESHOLD).map(|(&x, _)| x)
    }

    /// Smallest budget ratio whose mean accuracy reaches the threshold.
    pub fn min_learned_ratio(&self, dataset: &str, k: usize) -> Option<usize> {
        self.min_learned(dataset, k, Axis::Ratio)
    }

    /// Smallest depth whose mean accuracy reaches the threshold.
    pub fn min_learned_depth(&self, dataset: &str, k: usize) -> Option<usize> {
        self.min_learned(dataset, k, Axis::Depth)
    }

    fn csv(&self, axis: Axis, label: &str) -> String {
        let grid = self.grid(axis);
        let mut cols: Vec<usize> = grid.values().flat_map(|r| r.keys().copied()).collect();
        cols.sort_unstable();
        cols.dedup();
        let mut s = String::from("dataset,k");
        for c in &cols {
            let _ = write!(s, ",{label}{c}");
        }
        s.push('\n');
        for ((dataset, k), row) in &grid {
            let _ = write!(s, "{dataset},{k}");
            for c in &cols {
                match row.get(c) {
                    Some(a) => {
                        let _ = write!(s, ",{:.1}", a * 100.0);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Accuracy (%) table: rows dataset×k, columns budget ratios.
    pub fn ratio_csv(&self) -> String {
        self.csv(Axis::Ratio, "x")
    }

    /// Accuracy (%) table: rows dataset×k, columns depths.
    pub fn depth_csv(&self) -> String {
        self.csv(Axis::Depth, "L")
    }

    /// Minimal learned ratio and depth per (dataset, k).
    pub fn summary(&self) -> serde_json::Value {
        let rows: Vec<(String, usize)> = self.grid(Axis::Ratio).into_keys().collect();
        let entry = |f: &dyn Fn(&str, usize) -> Option<usize>| -> serde_json::Map<String, serde_json::Value> {
            rows.iter().map(|(d, k)| (format!("{d}/{k}-hop"), serde_json::json!(f(d, *k)))).collect()
        };
        serde_json::json!({
            "threshold": LEARNED_THRESHOLD,
            "min_ratio": entry(&|d, k| self.min_learned_ratio(d, k)),
            "min_depth": entry(&|d, k| self.min_learned_depth(d, k)),
            "cells": self.cells.len(),
        })
    }
}

/// Runs `jobs` with at most `workers` threads. Job i goes to worker
/// i mod workers; results come back in job order.
pub fn run_parallel<J: Sync, R: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..jobs.len()).step_by(workers).map(|i| (i, f(&jobs[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

pub fn budget_sweep(task: &TaskSpec, ratios: &[usize], seeds: &[u64], workers: usize) -> Result<SweepResult> {
    let jobs: Vec<(usize, u64)> = ratios.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let cells = run_parallel(&jobs, workers, |&(r, s)| Ok(train_cell(task, r, None, s, None)?.result))?;
    Ok(SweepResult { cells })
}

pub fn depth_sweep(
    task: &TaskSpec,
    depths: &[usize],
    budget_ratio: usize,
    seeds: &[u64],
    workers: usize,
) -> Result<SweepResult> {
    let jobs: Vec<(usize, u64)> = depths.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).collect();
    let cells = run_parallel(&jobs, workers, |&(d, s)| Ok(train_cell(task, budget_ratio, Some(d), s, None)?.result))?;
    Ok(SweepResult { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_lowest_id() {
        let mut l = vec![0.0f32; 12];
        l[5] = 3.0;
        l[9] = 3.0;
        assert_eq!(argmax(&l), 5);
        l[7] = 4.0;
        assert_eq!(argmax(&l), 7);
    }

    #[test]
    fn empty_predictions_error() {
        let p = Predictions { predicted: vec![], gold: vec![] };
        assert!(matches!(p.accuracy(), Err(Error::EmptySplit)));
    }

    fn cell(k: usize, ratio: usize, acc: f64) -> CellResult {
        CellResult {
            dataset: "tiny".into(),
            k,
            mode: TrainMode::Baseline,
            budget_ratio: ratio,
            depth: 4,
            seed: 0,
            final_accuracy: acc,
            curve: vec![],
            steps: 0,
            learned: acc >= LEARNED_THRESHOLD,
        }
    }

    #[test]
    fn minimal_ratio_and_table() {
        let s = SweepResult { cells: vec![cell(2, 1, 0.9), cell(3, 1, 0.2), cell(3, 2, 0.85)] };
        assert_eq!(s.min_learned_ratio("tiny", 2), Some(1));
        assert_eq!(s.min_learned_ratio("tiny", 3), Some(2));
        assert_eq!(s.ratio_csv(), "dataset,k,x1,x2\ntiny,2,90.0,\ntiny,3,20.0,85.0\n");
    }
}
