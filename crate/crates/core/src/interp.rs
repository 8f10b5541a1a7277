// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes on the residual stream and activation patching.
//!
//! Layer numbering: probe layer 0 is the token embedding and layer l ≥ 1 is
//! the output of block l. Patch layers are 1-based block numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{RenderedInstance, Vocab};
use crate::eval::run_parallel;
use crate::graph::{EntityGraph, Query};
use crate::model::{Batch, Intervention, ModelState, Site};
use crate::rng::SeedTree;
use crate::tensor::{gemm, Op};
use crate::{Error, Result};

const FORWARD_BATCH: usize = 128;

/// Residual vectors per (instance, layer, position) for positions from the
/// source entity to the answer slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StateStore {
    pub n_instances: usize,
    /// Embedding plus one per block.
    pub n_layers: usize,
    /// Captured absolute token positions, shared by every instance.
    pub positions: Vec<usize>,
    pub d_model: usize,
    data: Vec<f32>,
}

impl StateStore {
    fn index(&self, inst: usize, layer: usize, pos_idx: usize) -> usize {
        ((inst * self.n_layers + layer) * self.positions.len() + pos_idx) * self.d_model
    }

    pub fn get(&self, inst: usize, layer: usize, pos_idx: usize) -> &[f32] {
        let i = self.index(inst, layer, pos_idx);
        &self.data[i..i + self.d_model]
    }

    pub fn len(&self) -> usize {
        self.n_instances * self.n_layers * self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature matrix (`n_instances × d_model`) for one (layer, position).
    pub fn features(&self, layer: usize, pos_idx: usize) -> Vec<f64> {
        (0..self.n_instances).flat_map(|i| self.get(i, layer, pos_idx).iter().map(|&v| v as f64)).collect()
    }
}

fn check_template(instances: &[RenderedInstance]) -> Result<()> {
    let first = instances.first().ok_or(Error::EmptySplit)?;
    for inst in instances {
        if inst.tokens.len() != first.tokens.len()
            || inst.entity_position != first.entity_position
            || inst.answer_position != first.answer_position
            || inst.hop_token_positions != first.hop_token_positions
        {
            return Err(Error::TemplateMismatch("instances do not share token positions".into()));
        }
    }
    Ok(())
}

pub fn collect_states(model: &ModelState, instances: &[RenderedInstance]) -> Result<StateStore> {
    check_template(instances)?;
    let first = &instances[0];
    let positions: Vec<usize> = (first.entity_position..=first.answer_position).collect();
    let n_layers = model.config().n_layers + 1;
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(instances.len() * n_layers * positions.len() * d);
    for chunk in instances.chunks(FORWARD_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|i| i.tokens.as_slice()).collect();
        let (_, trace) = model.forward_batch(&Batch::from_sequences(&seqs), true, &[])?;
        let trace = trace.expect("trace requested");
        for s in 0..chunk.len() {
            for layer in 0..n_layers {
                for &p in &positions {
                    let v = if layer == 0 { trace.embed_at(s, p) } else { trace.residual_at(layer - 1, s, p) };
                    data.extend_from_slice(v);
                }
            }
        }
    }
    Ok(StateStore { n_instances: instances.len(), n_layers, positions, d_model: d, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the training loss improves by less than this.
    pub tol: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-3, max_iters: 500, tol: 1e-7, train_fraction: 0.8 }
    }
}

/// A trained multinomial logistic-regression probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub accuracy: f64,
    pub classes: Vec<u32>,
    /// `d × classes`, acting on standardized features.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
    pub iterations: usize,
}

/// Seeded 80/20 (by default) split of `n` indices.
pub fn probe_folds(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedTree::new(seed).rng("probe-split", &[]));
    let cut = ((n as f64) * fraction).round() as usize;
    let (a, b) = idx.split_at(cut.min(n));
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

fn softmax_rows(z: &mut [f64], c: usize) {
    for row in z.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Trains a probe on `features` (`labels.len() × d`) with the train fold,
/// scored on the eval fold. Full-batch accelerated gradient descent on
/// L2-regularized cross-entropy with step 1/Lipschitz.
pub fn train_probe(features: &[f64], labels: &[u32], d: usize, seed: u64, cfg: &ProbeConfig) -> Result<ProbeCell> {
    let n_all = labels.len();
    assert_eq!(features.len(), n_all * d);
    let (train_idx, eval_idx) = probe_folds(n_all, cfg.train_fraction, seed);
    let mut classes: Vec<u32> = train_idx.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 || eval_idx.is_empty() {
        return Err(Error::DegenerateProbe);
    }
    let class_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let c = classes.len();
    let n = train_idx.len();

    let mut mean = vec![0.0; d];
    for &i in &train_idx {
        for (m, x) in mean.iter_mut().zip(&features[i * d..(i + 1) * d]) {
            *m += x / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for &i in &train_idx {
        for ((s, x), m) in scale.iter_mut().zip(&features[i * d..(i + 1) * d]).zip(&mean) {
            *s += (x - m) * (x - m) / n as f64;
        }
    }
    scale.iter_mut().for_each(|s| *s = 1.0 / s.sqrt().max(1e-8));
    let standardize = |idx: &[usize]| -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend((0..d).map(|j| (features[i * d + j] - mean[j]) * scale[j]));
        }
        out
    };
    let x = standardize(&train_idx);
    let y: Vec<usize> = train_idx.iter().map(|&i| class_of[&labels[i]]).collect();

    // Largest eigenvalue of XᵀX/n by power iteration bounds the curvature.
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut xv = vec![0.0; n];
    let mut lam = 1.0;
    for _ in 0..30 {
        gemm(n, d, 1, 1.0, &x, Op::N, &v, Op::N, 0.0, &mut xv);
        let mut w = vec![0.0; d];
        gemm(d, n, 1, 1.0 / n as f64, &x, Op::T, &xv, Op::N, 0.0, &mut w);
        lam = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if lam == 0.0 {
            break;
        }
        v = w.iter().map(|a| a / lam).collect();
    }
    let step = 1.0 / (0.5 * (lam + 1.0) + cfg.l2);

    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
    let mut z = vec![0.0; n * c];
    let mut gw = vec![0.0; d * c];
    let mut prev_loss = f64::INFINITY;
    let mut iterations = 0;
    let loss_grad = |w: &[f64], b: &[f64], z: &mut Vec<f64>, gw: &mut Vec<f64>, gb: &mut Vec<f64>| -> f64 {
        gemm(n, d, c, 1.0, &x, Op::N, w, Op::N, 0.0, z);
        for row in z.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        softmax_rows(z, c);
        let mut loss = 0.0;
        for (row, &t) in z.chunks_exact_mut(c).zip(&y) {
            loss -= row[t].max(1e-300).ln();
            row[t] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        loss /= n as f64;
        loss += 0.5 * cfg.l2 * w.iter().map(|a| a * a).sum::<f64>();
        gemm(d, n, c, 1.0, &x, Op::T, z, Op::N, 0.0, gw);
        gw.iter_mut().zip(w).for_each(|(g, wv)| *g += cfg.l2 * wv);
        gb.fill(0.0);
        for row in z.chunks_exact(c) {
            gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
        }
        loss
    };
    let mut gb = vec![0.0; c];
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        let mom = it as f64 / (it as f64 + 3.0);
        let yw: Vec<f64> = w.iter().zip(&w_prev).map(|(a, p)| a + mom * (a - p)).collect();
        let yb: Vec<f64> = b.iter().zip(&b_prev).map(|(a, p)| a + mom * (a - p)).collect();
        let loss = loss_grad(&yw, &yb, &mut z, &mut gw, &mut gb);
        w_prev = std::mem::replace(&mut w, yw.iter().zip(&gw).map(|(a, g)| a - step * g).collect());
        b_prev = std::mem::replace(&mut b, yb.iter().zip(&gb).map(|(a, g)| a - step * g).collect());
        if (prev_loss - loss).abs() < cfg.tol {
            break;
        }
        prev_loss = loss;
    }

    let xe = standardize(&eval_idx);
    let mut ze = vec![0.0; eval_idx.len() * c];
    gemm(eval_idx.len(), d, c, 1.0, &xe, Op::N, &w, Op::N, 0.0, &mut ze);
    let mut hits = 0;
    for (row, &i) in ze.chunks_exact(c).zip(&eval_idx) {
        let mut best = 0;
        for j in 1..c {
            if row[j] + b[j] > row[best] + b[best] {
                best = j;
            }
        }
        if classes[best] == labels[i] {
            hits += 1;
        }
    }
    Ok(ProbeCell {
        accuracy: hits as f64 / eval_idx.len() as f64,
        classes,
        weights: w,
        bias: b,
        mean,
        scale,
        train_idx,
        eval_idx,
        iterations,
    })
}

/// Probe accuracy per (layer, position, hop target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    /// `accuracy[layer][pos_idx][hop - 1]`
    pub accuracy: Vec<Vec<Vec<f64>>>,
    pub positions: Vec<usize>,
    pub hops: usize,
    pub seed: u64,
    pub n_instances: usize,
    #[serde(skip)]
    pub cells: Vec<ProbeCell>,
}

impl ProbeGrid {
    /// Accuracy at the last captured position (the answer slot): `[layer][hop - 1]`.
    pub fn last_position(&self) -> Vec<Vec<f64>> {
        self.accuracy.iter().map(|l| l.last().cloned().unwrap_or_default()).collect()
    }

    /// Rows: layer; columns: `p{position}_h{hop}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for p in &self.positions {
            for h in 1..=self.hops {
                let _ = write!(s, ",p{p}_h{h}");
            }
        }
        s.push('\n');
        for (l, row) in self.accuracy.iter().enumerate() {
            let _ = write!(s, "{l}");
            for cell in row {
                for a in cell {
                    let _ = write!(s, ",{a:.4}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Probes every (layer, position, hop) for the entities of `queries`.
pub fn probe_grid(
    store: &StateStore,
    queries: &[Query],
    vocab: &Vocab,
    seed: u64,
    cfg: &ProbeConfig,
    workers: usize,
) -> Result<ProbeGrid> {
    assert_eq!(store.n_instances, queries.len());
    let k = queries.first().ok_or(Error::EmptySplit)?.k();
    let labels: Vec<Vec<u32>> =
        (1..=k).map(|h| queries.iter().map(|q| vocab.entity_token(q.hop_entity(h))).collect()).collect();
    let jobs: Vec<(usize, usize, usize)> = (0..store.n_layers)
        .flat_map(|l| (0..store.positions.len()).flat_map(move |p| (1..=k).map(move |h| (l, p, h))))
        .collect();
    let cells = run_parallel(&jobs, workers, |&(l, p, h)| {
        train_probe(&store.features(l, p), &labels[h - 1], store.d_model, seed, cfg)
    })?;
    let mut accuracy = vec![vec![vec![0.0; k]; store.positions.len()]; store.n_layers];
    for (&(l, p, h), cell) in jobs.iter().zip(&cells) {
        accuracy[l][p][h - 1] = cell.accuracy;
    }
    Ok(ProbeGrid { accuracy, positions: store.positions.clone(), hops: k, seed, n_instances: queries.len(), cells })
}

/// Default rejection cap per corrupted instance.
pub const CORRUPTION_CAP: usize = 10_000;

fn is_valid_corruption(clean: &Query, cand: &Query, hop: usize) -> bool {
    cand.k() == clean.k()
        && (1..=clean.k()).all(|j| (cand.hop_entity(j) == clean.hop_entity(j)) != (j == hop))
}

/// Draws pool queries uniformly (with replacement) until one differs from
/// `clean` exactly at hop `hop` (the answer when `hop = k`), with every
/// other bridge and the answer unchanged.
pub fn select_corrupted(clean: &Query, pool: &[Query], hop: usize, seed: u64, cap: usize) -> Result<Query> {
    if pool.is_empty() {
        return Err(Error::CorruptionExhausted(0));
    }
    let mut rng = SeedTree::new(seed).rng("corrupt", &[hop as u64]);
    for _ in 0..cap {
        let cand = &pool[rng.random_range(0..pool.len())];
        if is_valid_corruption(clean, cand, hop) {
            return Ok(cand.clone());
        }
    }
    Err(Error::CorruptionExhausted(cap))
}

fn same_template(a: &RenderedInstance, b: &RenderedInstance) -> Result<()> {
    if a.tokens.len() != b.tokens.len()
        || a.answer_position != b.answer_position
        || a.entity_position != b.entity_position
        || a.hop_token_positions != b.hop_token_positions
    {
        return Err(Error::TemplateMismatch("instances do not share token positions".into()));
    }
    Ok(())
}

fn prob_of(logits: &[f32], token: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = logits.iter().map(|&v| (v - max).exp()).sum();
    ((logits[token as usize] - max).exp() / sum) as f64
}

/// Probability of the clean gold answer at the answer slot.
pub fn answer_probability(
    model: &ModelState,
    inst: &RenderedInstance,
    interventions: &[Intervention<f32>],
) -> Result<f64> {
    let logits = model.logits_at(&Batch::from_sequences(&[&inst.tokens]), &[inst.answer_position], interventions)?;
    Ok(prob_of(&logits[0], inst.answer_token))
}

/// P_clean − P_patched for one patched site. `layer` is the 1-based block.
pub fn run_patch(
    model: &ModelState,
    clean: &RenderedInstance,
    corrupted: &RenderedInstance,
    site: Site,
    layer: usize,
    position: usize,
) -> Result<f64> {
    same_template(clean, corrupted)?;
    if layer == 0 || layer > model.config().n_layers {
        return Err(Error::Intervention(format!("patch layer {layer} outside 1..={}", model.config().n_layers)));
    }
    let p_clean = answer_probability(model, clean, &[])?;
    let (_, trace) = model.forward(&corrupted.tokens, true, &[])?;
    let trace = trace.expect("trace requested");
    let value = match site {
        Site::Residual => trace.residual_at(layer - 1, 0, position),
        Site::MlpOut => trace.mlp_out_at(layer - 1, 0, position),
    }
    .to_vec();
    let iv = Intervention { site, layer: layer - 1, seq: 0, position, value };
    Ok(p_clean - answer_probability(model, clean, &[iv])?)
}

/// Effects of patching every `(layer, position)` for one clean/corrupted
/// pair: `[layer - 1][pos_idx]`.
pub fn patch_grid(
    model: &ModelState,
    clean: &RenderedInstance,
    corrupted: &RenderedInstance,
    site: Site,
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    same_template(clean, corrupted)?;
    let n_layers = model.config().n_layers;
    let p_clean = answer_probability(model, clean, &[])?;
    let (_, trace) = model.forward(&corrupted.tokens, true, &[])?;
    let trace = trace.expect("trace requested");
    let cells: Vec<(usize, usize)> = (0..n_layers).flat_map(|l| (0..positions.len()).map(move |p| (l, p))).collect();
    let mut effects = vec![vec![0.0; positions.len()]; n_layers];
    for chunk in cells.chunks(FORWARD_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|_| clean.tokens.as_slice()).collect();
        let ivs: Vec<Intervention<f32>> = chunk
            .iter()
            .enumerate()
            .map(|(s, &(l, p))| {
                let pos = positions[p];
                let value = match site {
                    Site::Residual => trace.residual_at(l, 0, pos),
                    Site::MlpOut => trace.mlp_out_at(l, 0, pos),
                }
                .to_vec();
                Intervention { site, layer: l, seq: s, position: pos, value }
            })
            .collect();
        let answer_pos = vec![clean.answer_position; chunk.len()];
        let logits = model.logits_at(&Batch::from_sequences(&seqs), &answer_pos, &ivs)?;
        for (&(l, p), lg) in chunk.iter().zip(&logits) {
            effects[l][p] = p_clean - prob_of(lg, clean.answer_token);
        }
    }
    Ok(effects)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPositions {
    /// Only the answer slot.
    LastToken,
    /// Every prompt position.
    AllTokens,
}

/// Mean causal effects for corrupted-run families C_1 … C_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub site: Site,
    pub mode: PatchPositions,
    pub checkpoint: Option<u64>,
    pub families: Vec<usize>,
    pub positions: Vec<usize>,
    /// `effect[family_idx][layer - 1][pos_idx]`
    pub effect: Vec<Vec<Vec<f64>>>,
    pub std_err: Vec<Vec<Vec<f64>>>,
    pub counts: Vec<usize>,
    pub skipped: Vec<usize>,
    pub seed: u64,
}

impl PatchReport {
    /// Layer (1-based) with the largest mean effect for a family, at the
    /// last reported position.
    pub fn peak_layer(&self, family_idx: usize) -> usize {
        let col = self.positions.len() - 1;
        let rows = &self.effect[family_idx];
        let mut best = 0;
        for (l, r) in rows.iter().enumerate() {
            if r[col] > rows[best][col] {
                best = l;
            }
        }
        best + 1
    }

    /// Rows: `family,layer`; columns: positions.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("checkpoint,family,layer");
        for p in &self.positions {
            let _ = write!(s, ",t{p}");
        }
        s.push('\n');
        let ck = self.checkpoint.map(|c| c.to_string()).unwrap_or_default();
        for (fi, fam) in self.families.iter().enumerate() {
            for (l, row) in self.effect[fi].iter().enumerate() {
                let _ = write!(s, "{ck},C{fam},{}", l + 1);
                for e in row {
                    let _ = write!(s, ",{e:.6}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Options for [`patch_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub site: Site,
    pub mode: PatchPositions,
    pub families: Vec<usize>,
    pub max_instances: usize,
    pub cap: usize,
    pub seed: u64,
}

/// Mean effects over up to `max_instances` clean queries per family.
/// Instances with no valid corruption within the cap are skipped and counted.
pub fn patch_sweep(
    model: &ModelState,
    graph: &EntityGraph,
    vocab: &Vocab,
    clean: &[Query],
    pool: &[Query],
    opts: &PatchOptions,
    workers: usize,
) -> Result<PatchReport> {
    let clean = &clean[..clean.len().min(opts.max_instances)];
    let first = RenderedInstance::question(graph, vocab, clean.first().ok_or(Error::EmptySplit)?)?;
    let positions: Vec<usize> = match opts.mode {
        PatchPositions::LastToken => vec![first.answer_position],
        PatchPositions::AllTokens => (0..=first.answer_position).collect(),
    };
    let tree = SeedTree::new(opts.seed);
    let n_layers = model.config().n_layers;
    let mut report = PatchReport {
        site: opts.site,
        mode: opts.mode,
        checkpoint: Some(model.step),
        families: opts.families.clone(),
        positions: positions.clone(),
        effect: Vec::new(),
        std_err: Vec::new(),
        counts: Vec::new(),
        skipped: Vec::new(),
        seed: opts.seed,
    };
    for &fam in &opts.families {
        let jobs: Vec<usize> = (0..clean.len()).collect();
        let per = run_parallel(&jobs, workers, |&i| {
            let q = &clean[i];
            match select_corrupted(q, pool, fam, tree.seed("instance", &[i as u64]), opts.cap) {
                Ok(c) => {
                    let ci = RenderedInstance::question(graph, vocab, q)?;
                    let cc = RenderedInstance::question(graph, vocab, &c)?;
                    Ok(Some(patch_grid(model, &ci, &cc, opts.site, &positions)?))
                }
                Err(Error::CorruptionExhausted(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })?;
        let done: Vec<&Vec<Vec<f64>>> = per.iter().flatten().collect();
        let n = done.len();
        let mut mean = vec![vec![0.0; positions.len()]; n_layers];
        let mut se = vec![vec![0.0; positions.len()]; n_layers];
        for l in 0..n_layers {
            for p in 0..positions.len() {
                let vals: Vec<f64> = done.iter().map(|g| g[l][p]).collect();
                let m = vals.iter().sum::<f64>() / n.max(1) as f64;
                let var = if n > 1 { vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                mean[l][p] = m;
                se[l][p] = (var / n.max(1) as f64).sqrt();
            }
        }
        report.effect.push(mean);
        report.std_err.push(se);
        report.counts.push(n);
        report.skipped.push(per.len() - n);
    }
    Ok(report)
}
