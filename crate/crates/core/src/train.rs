// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal-LM training: loss, learning-rate schedule, AdamW, stage plans and
//! the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{profile_tokens, RenderedInstance, Vocab};
use crate::graph::{DatasetSplit, EntityGraph};
use crate::model::{Batch, Model, ModelState, IGNORE};
use crate::rng::SeedTree;
use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub min_lr_factor: f64,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged into one update.
    pub grad_accum: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 5e-4,
            adam_eps: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            warmup_steps: 1000,
            min_lr_factor: 0.1,
            batch_size: 512,
            grad_accum: 4,
            max_steps: 20_000,
            checkpoint_every: 1000,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TrainConfig(m.to_string()));
        if !(self.lr_peak > 0.0 && self.adam_eps > 0.0) {
            return bad("lr_peak and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.min_lr_factor > 0.0 && self.min_lr_factor <= 1.0) {
            return bad("weight_decay must be >= 0 and min_lr_factor in (0, 1]");
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_steps == 0 {
            return bad("batch_size, grad_accum and max_steps must be positive");
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return bad("checkpoint_every and eval_every must be positive");
        }
        if self.warmup_steps >= self.max_steps {
            return bad("warmup_steps must be below max_steps");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to
/// `min_lr_factor * lr_peak` at `max_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr_peak;
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return peak;
        }
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.max_steps - cfg.warmup_steps) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    peak * (cfg.min_lr_factor + (1.0 - cfg.min_lr_factor) * cosine)
}

/// Mean cross-entropy of `targets` under `logits` (`rows × vocab`),
/// skipping [`IGNORE`] targets.
pub fn lm_loss<T: Scalar>(logits: &[T], targets: &[u32], vocab: usize) -> Result<f64> {
    assert_eq!(logits.len(), targets.len() * vocab, "logits and targets misaligned");
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t == IGNORE {
            continue;
        }
        let max = row.iter().map(|v| Scalar::to_f64(*v)).fold(f64::NEG_INFINITY, |a, b| a.max(b));
        let lse = max + row.iter().map(|v| (Scalar::to_f64(*v) - max).exp()).sum::<f64>().ln();
        total += lse - Scalar::to_f64(row[t as usize]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / n as f64)
}

/// Overwrites `logits` with d(mean loss)/d(logits) and returns the loss.
pub(crate) fn cross_entropy_backward<T: Scalar>(logits: &mut [T], targets: &[u32], vocab: usize) -> T {
    let n = targets.iter().filter(|&&t| t != IGNORE).count();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact_mut(vocab).zip(targets) {
        if t == IGNORE {
            row.fill(T::zero());
            continue;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let target_logit = row[t as usize];
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += Scalar::to_f64(max + sum.ln() - target_logit);
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
        row[t as usize] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    T::from_f64(total / n as f64)
}

/// Parameter ranges with their weight-decay flag.
pub type DecayGroups = Vec<(Range<usize>, bool)>;

pub fn decay_groups<T: Scalar>(model: &Model<T>) -> DecayGroups {
    model.layout().tensors().iter().map(|t| (t.range(), t.kind.decays())).collect()
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One update with learning rate `lr`. Decay (`lr * weight_decay`) is
    /// applied to parameters in decaying groups before the Adam step.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], groups: &DecayGroups, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (range, decays) in groups {
            let shrink = if *decays { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            for i in range.clone() {
                let g = grads[i] as f64;
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                let p = params[i] as f64 * shrink - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
                params[i] = p as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Mixed,
    Curriculum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    /// Question hop counts in this stage's mixture (profiles are always in).
    pub hops: Vec<usize>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub mode: TrainMode,
    pub stages: Vec<Stage>,
}

/// Per-stage steps of the reference curriculum runs, by target hop count.
pub fn reference_curriculum_steps(k: usize, large: bool) -> Option<Vec<u64>> {
    match (k, large) {
        (3, _) => Some(vec![10_000, 10_000]),
        (4, false) => Some(vec![5_000, 5_000, 10_000]),
        (4, true) => Some(vec![10_000, 10_000, 20_000]),
        _ => None,
    }
}

impl StagePlan {
    /// One stage of k-hop questions.
    pub fn baseline(k: usize, steps: u64) -> Self {
        Self { mode: TrainMode::Baseline, stages: vec![Stage { hops: vec![k], steps }] }
    }

    /// One stage containing every hop count from 2 to k.
    pub fn mixed(k: usize, steps: u64) -> Self {
        Self { mode: TrainMode::Mixed, stages: vec![Stage { hops: (2..=k.max(2)).collect(), steps }] }
    }

    /// k − 1 stages; stage i (1-based) allows hops 2..=i+1.
    pub fn curriculum(k: usize, stage_steps: &[u64]) -> Result<Self> {
        if k < 2 || stage_steps.len() != k - 1 {
            return Err(Error::TrainConfig(format!(
                "a {k}-hop curriculum needs {} stage lengths, got {}",
                k.saturating_sub(1),
                stage_steps.len()
            )));
        }
        let stages = stage_steps
            .iter()
            .enumerate()
            .map(|(i, &steps)| Stage { hops: (2..=i + 2).collect(), steps })
            .collect();
        Ok(Self { mode: TrainMode::Curriculum, stages })
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Global step at which stage `i` begins.
    pub fn stage_start(&self, i: usize) -> u64 {
        self.stages[..i].iter().map(|s| s.steps).sum()
    }
}

/// Tokenized training sequences: profiles plus questions by hop count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingData {
    pub profiles: Vec<Vec<u32>>,
    pub questions: BTreeMap<usize, Vec<Vec<u32>>>,
}

impl TrainingData {
    pub fn from_split(graph: &EntityGraph, vocab: &Vocab, split: &DatasetSplit) -> Result<Self> {
        let profiles = split.profiles.iter().map(|&e| profile_tokens(graph, vocab, e)).collect::<Result<_>>()?;
        let mut questions: BTreeMap<usize, Vec<Vec<u32>>> = BTreeMap::new();
        for q in split.aux_queries.iter().chain(&split.train_queries) {
            let inst = RenderedInstance::question(graph, vocab, q)?;
            questions.entry(q.k()).or_default().push(inst.training_tokens());
        }
        Ok(Self { profiles, questions })
    }

    pub fn max_len(&self) -> usize {
        self.profiles.iter().chain(self.questions.values().flatten()).map(Vec::len).max().unwrap_or(0)
    }

    /// Sampling pool for a stage: all profiles, then each allowed hop's questions.
    fn pool(&self, stage_idx: usize, stage: &Stage) -> Result<Vec<&[u32]>> {
        let mut pool: Vec<&[u32]> = self.profiles.iter().map(Vec::as_slice).collect();
        for h in &stage.hops {
            match self.questions.get(h) {
                Some(qs) if !qs.is_empty() => pool.extend(qs.iter().map(Vec::as_slice)),
                _ => return Err(Error::EmptyStage(stage_idx)),
            }
        }
        Ok(pool)
    }
}

/// Draws micro-batches from one stage's pool by reshuffling each epoch.
/// The batch for any step is a pure function of (seed, stage, step).
struct Sampler<'a> {
    pool: Vec<&'a [u32]>,
    tree: SeedTree,
    stage: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl<'a> Sampler<'a> {
    fn item(&mut self, i: u64) -> &'a [u32] {
        let n = self.pool.len() as u64;
        let epoch = i / n;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.pool.len()).collect();
            perm.shuffle(&mut self.tree.rng("batches", &[self.stage as u64, epoch]));
            self.epoch = Some((epoch, perm));
        }
        let perm = &self.epoch.as_ref().expect("set above").1;
        self.pool[perm[(i % n) as usize]]
    }

    fn micro_batch(&mut self, stage_step: u64, micro: usize, cfg: &TrainConfig) -> Batch {
        let bs = cfg.batch_size as u64;
        let first = (stage_step * cfg.grad_accum as u64 + micro as u64) * bs;
        let seqs: Vec<&[u32]> = (first..first + bs).map(|i| self.item(i)).collect();
        Batch::from_sequences(&seqs)
    }
}

/// Everything needed to continue training: model, optimizer moments and
/// the position within the stage plan.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub optimizer: AdamW,
    pub stage: usize,
    /// Updates already completed within `stage`.
    pub stage_step: u64,
}

impl TrainState {
    pub fn new(model: ModelState) -> Self {
        let n = model.num_params();
        Self { model, optimizer: AdamW::new(n), stage: 0, stage_step: 0 }
    }

    pub fn finished(&self, plan: &StagePlan) -> bool {
        self.stage >= plan.stages.len()
    }
}

/// One record per update; `test_accuracy` is filled in by an observer on
/// evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<StepRecord>,
}

impl Metrics {
    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// (step, accuracy) for every evaluated step.
    pub fn accuracy_curve(&self) -> Vec<(u64, f64)> {
        self.records.iter().filter_map(|r| r.test_accuracy.map(|a| (r.step, a))).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Hooks called by [`train`].
pub trait Observer {
    /// After every update. May set `record.test_accuracy`.
    fn after_step(&mut self, _state: &TrainState, _record: &mut StepRecord) -> Result<Control> {
        Ok(Control::Continue)
    }

    /// When the global step is a multiple of `checkpoint_every`, and at the
    /// end of every stage.
    fn checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// An observer that does nothing.
pub struct NoObserver;

impl Observer for NoObserver {}

fn first_non_finite<T: Scalar>(model: &Model<T>, grads: &[T]) -> Option<String> {
    let i = grads.iter().position(|g| !g.is_finite())?;
    model.layout().tensors().iter().find(|t| t.range().contains(&i)).map(|t| t.name.clone())
}

/// Runs `plan` from the position recorded in `state` until it completes or
/// the observer stops it. The learning-rate schedule restarts every stage;
/// optimizer moments carry over.
pub fn train(
    state: &mut TrainState,
    plan: &StagePlan,
    cfg: &TrainConfig,
    data: &TrainingData,
    observer: &mut dyn Observer,
) -> Result<Metrics> {
    cfg.validate()?;
    for (i, s) in plan.stages.iter().enumerate() {
        stage_config(cfg, s.steps).validate().map_err(|e| Error::TrainConfig(format!("stage {i}: {e}")))?;
        data.pool(i, s)?;
    }
    let groups = decay_groups(&state.model);
    let tree = SeedTree::new(cfg.seed);
    let mut metrics = Metrics::default();
    while state.stage < plan.stages.len() {
        let stage = &plan.stages[state.stage];
        let scfg = stage_config(cfg, stage.steps);
        let mut sampler = Sampler { pool: data.pool(state.stage, stage)?, tree, stage: state.stage, epoch: None };
        while state.stage_step < stage.steps {
            let t = state.stage_step;
            let mut grads = vec![0.0f32; state.model.num_params()];
            let mut loss = 0.0;
            for micro in 0..cfg.grad_accum {
                let batch = sampler.micro_batch(t, micro, cfg);
                let (l, g) = state.model.loss_and_grad(&batch)?;
                loss += l as f64;
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / cfg.grad_accum as f32;
            grads.iter_mut().for_each(|g| *g *= inv);
            loss /= cfg.grad_accum as f64;
            if let Some(tensor) = first_non_finite(&state.model, &grads) {
                return Err(Error::NonFiniteGradient { tensor, step: state.model.step + 1 });
            }
            let lr = lr_at(t + 1, &scfg);
            state.optimizer.step(&mut state.model.params, &grads, &groups, lr, cfg);
            state.model.step += 1;
            state.stage_step += 1;

            let mut record = StepRecord { step: state.model.step, stage: state.stage, lr, loss, test_accuracy: None };
            let stage_done = state.stage_step == stage.steps;
            if stage_done {
                state.stage += 1;
                state.stage_step = 0;
            }
            if state.model.step % cfg.checkpoint_every == 0 || stage_done {
                observer.checkpoint(state)?;
            }
            let control = observer.after_step(state, &mut record)?;
            metrics.records.push(record);
            if control == Control::Stop {
                return Ok(metrics);
            }
            if stage_done {
                break;
            }
        }
    }
    Ok(metrics)
}

/// The schedule configuration for a stage of `steps` updates.
pub fn stage_config(cfg: &TrainConfig, steps: u64) -> TrainConfig {
    TrainConfig { max_steps: steps, ..cfg.clone() }
}

/// Largest relative error between analytic and central-difference
/// gradients over `coords`. Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(loss_and_grad: F, params: &[f64], coords: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if coords.is_empty() {
        return Err(Error::EmptyGradCheck);
    }
    let (_, analytic) = loss_and_grad(params);
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + eps;
        let (lp, _) = loss_and_grad(&p);
        p[i] = orig - eps;
        let (lm, _) = loss_and_grad(&p);
        p[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check of a transformer on `batch` over `n_coords` parameter
/// coordinates drawn uniformly under `seed`.
pub fn transformer_grad_check(model: &Model<f64>, batch: &Batch, n_coords: usize, eps: f64, seed: u64) -> Result<f64> {
    if n_coords == 0 {
        return Err(Error::EmptyGradCheck);
    }
    let mut rng = SeedTree::new(seed).rng("grad-check", &[]);
    let coords: Vec<usize> = (0..n_coords).map(|_| rng.random_range(0..model.num_params())).collect();
    let mut probe = model.clone();
    let (_, analytic) = model.loss_and_grad(batch)?;
    let mut f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        probe.params.copy_from_slice(p);
        Ok((probe.loss(batch)?, Vec::new()))
    };
    let mut worst = 0.0f64;
    let mut p = model.params.clone();
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + eps;
        let (lp, _) = f(&p)?;
        p[i] = orig - eps;
        let (lm, _) = f(&p)?;
        p[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
    }
    Ok(worst)
}
