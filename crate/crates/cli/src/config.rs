// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file describes a whole experiment.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use khop::eval::TaskSpec;
use khop::graph::{GraphSpec, RelationConstraint, BUDGET_RATIOS};
use khop::interp::{PatchPositions, ProbeConfig};
use khop::model::{ModelConfig, Site};
use khop::rng::SeedTree;
use khop::train::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; not part of the run identity.
    #[serde(default = "default_out", skip_serializing)]
    pub out: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub graph: GraphSection,
    pub task: TaskSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub interp: InterpSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

fn default_out() -> String {
    "runs".into()
}

fn default_dataset() -> String {
    "custom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub num_entities: usize,
    pub num_relations: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
}

fn default_layers() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub k: usize,
    #[serde(default = "one")]
    pub budget_ratio: usize,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    pub base_budget: usize,
    pub test_size: usize,
    /// Hop count (as a string key) → number of auxiliary questions.
    #[serde(default)]
    pub aux_sizes: Option<BTreeMap<String, usize>>,
    #[serde(default)]
    pub constraint: Option<Vec<usize>>,
    /// Per-stage steps; one entry for baseline and mixed modes.
    pub stage_steps: Vec<u64>,
    #[serde(default)]
    pub early_stop: Option<f64>,
}

fn one() -> usize {
    1
}

fn default_mode() -> TrainMode {
    TrainMode::Baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    #[serde(default)]
    pub d_mlp: Option<usize>,
    /// Minimum context; raised to the longest training sequence.
    #[serde(default = "default_context")]
    pub context_length: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub dropout: f64,
}

fn default_context() -> usize {
    64
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_peak: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub min_lr_factor: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub checkpoint_every: u64,
    pub eval_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_peak: t.lr_peak,
            adam_eps: t.adam_eps,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            min_lr_factor: t.min_lr_factor,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            checkpoint_every: t.checkpoint_every,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub ratios: Vec<usize>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { ratios: vec![1, 2, 5], depths: vec![], seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpSection {
    /// Corrupted-run families (hop indices); empty means 1..=k.
    pub families: Vec<usize>,
    pub site: Site,
    pub positions: PatchPositions,
    pub max_instances: usize,
    pub corruption_cap: usize,
    pub across_checkpoints: bool,
    pub probe: ProbeConfig,
}

impl Default for InterpSection {
    fn default() -> Self {
        Self {
            families: vec![],
            site: Site::Residual,
            positions: PatchPositions::LastToken,
            max_instances: 3000,
            corruption_cap: khop::interp::CORRUPTION_CAP,
            across_checkpoints: false,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub n: usize,
    pub max_k: usize,
    pub precision_bits: u64,
    pub d: u64,
    pub heads: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { n: 7, max_k: 6, precision_bits: 32, d: 768, heads: 12 }
    }
}

/// Seeds derived from the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub graph: u64,
    pub cell: u64,
    pub interp: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        let t = SeedTree::new(self.seed);
        Seeds { root: self.seed, graph: t.seed("graph", &[]), cell: t.seed("cell", &[]), interp: t.seed("interp", &[]) }
    }

    /// Checks every section, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        if g.num_layers < 2 || g.num_entities == 0 || g.num_entities % g.num_layers != 0 {
            bail!("graph.num_entities: must be a positive multiple of graph.num_layers (>= 2)");
        }
        if g.num_relations == 0 {
            bail!("graph.num_relations: must be positive");
        }
        let t = &self.task;
        if t.k < 1 || t.k >= g.num_layers {
            bail!("task.k: must lie in 1..{}", g.num_layers);
        }
        if !BUDGET_RATIOS.contains(&t.budget_ratio) {
            bail!("task.budget_ratio: must be one of {BUDGET_RATIOS:?}");
        }
        for r in &self.sweep.ratios {
            if !BUDGET_RATIOS.contains(r) {
                bail!("sweep.ratios: {r} is not one of {BUDGET_RATIOS:?}");
            }
        }
        if t.test_size == 0 || t.base_budget == 0 {
            bail!("task.test_size / task.base_budget: must be positive");
        }
        let expected = if t.mode == TrainMode::Curriculum { t.k.saturating_sub(1) } else { 1 };
        if t.stage_steps.len() != expected || t.stage_steps.contains(&0) {
            bail!("task.stage_steps: {:?} mode needs {expected} positive entries", t.mode);
        }
        if let Some(c) = &t.constraint {
            if c.len() != t.k || c.iter().any(|&n| n == 0 || n > g.num_relations) {
                bail!("task.constraint: need {} counts in 1..={}", t.k, g.num_relations);
            }
        }
        if let Some(sizes) = &t.aux_sizes {
            for key in sizes.keys() {
                match key.parse::<usize>() {
                    Ok(h) if h >= 1 && h < t.k => {}
                    _ => bail!("task.aux_sizes.{key}: keys must be hop counts below task.k"),
                }
            }
        }
        if let Some(e) = t.early_stop {
            if !(0.0..=1.0).contains(&e) {
                bail!("task.early_stop: must lie in [0, 1]");
            }
        }
        self.model_config(1).validate().context("model")?;
        for (i, &steps) in t.stage_steps.iter().enumerate() {
            TrainConfig { max_steps: steps, ..self.train_config() }
                .validate()
                .with_context(|| format!("train (stage {i} of {steps} steps)"))?;
        }
        if self.sweep.seeds.is_empty() {
            bail!("sweep.seeds: must not be empty");
        }
        if self.sweep.depths.contains(&0) {
            bail!("sweep.depths: depths must be positive");
        }
        if self.interp.families.iter().any(|&f| f == 0 || f > t.k) {
            bail!("interp.families: hop indices must lie in 1..={}", t.k);
        }
        if self.interp.max_instances == 0 || self.interp.corruption_cap == 0 {
            bail!("interp.max_instances / interp.corruption_cap: must be positive");
        }
        let o = &self.oracle;
        if o.n < 2 || o.max_k == 0 || o.max_k >= o.n {
            bail!("oracle: need n >= 2 and 1 <= max_k <= n - 1");
        }
        if o.precision_bits == 0 || o.d == 0 || o.heads == 0 {
            bail!("oracle.precision_bits / oracle.d / oracle.heads: must be positive");
        }
        Ok(())
    }

    pub fn graph_spec(&self) -> GraphSpec {
        GraphSpec {
            num_entities: self.graph.num_entities,
            num_relations: self.graph.num_relations,
            num_layers: self.graph.num_layers,
            seed: self.seeds().graph,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_mlp: m.d_mlp.unwrap_or(4 * m.d_model),
            vocab_size,
            context_length: m.context_length,
            rope_base: m.rope_base,
            init_std: m.init_std,
            dropout: m.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr_peak: t.lr_peak,
            adam_eps: t.adam_eps,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            min_lr_factor: t.min_lr_factor,
            batch_size: t.batch_size,
            grad_accum: t.grad_accum,
            max_steps: self.task.stage_steps.iter().sum(),
            checkpoint_every: t.checkpoint_every,
            eval_every: t.eval_every,
            seed: 0,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        let t = &self.task;
        TaskSpec {
            dataset: self.dataset.clone(),
            graph: self.graph_spec(),
            k: t.k,
            mode: t.mode,
            stage_steps: t.stage_steps.clone(),
            base_budget: t.base_budget,
            test_size: t.test_size,
            aux_sizes: t
                .aux_sizes
                .as_ref()
                .map(|m| m.iter().map(|(k, v)| (k.parse().expect("validated"), *v)).collect()),
            constraint: t.constraint.clone().map(RelationConstraint::new),
            model: self.model_config(1),
            train: self.train_config(),
            early_stop: t.early_stop,
        }
    }

    /// Content hash of the canonical JSON form; names the run directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        khop::sha256_hex(&json)[..16].to_string()
    }
}
