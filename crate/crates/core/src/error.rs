// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph parameters: {0}")]
    GraphParams(String),
    #[error("namespace exhausted: need {needed} {kind} names, only {available} available")]
    NamespaceExhausted {
        kind: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid query: {0}")]
    Query(String),
    #[error("missing edge from entity {entity} via relation {relation}")]
    MissingEdge { entity: usize, relation: usize },
    #[error("budget exceeds available questions: need {needed}, have {available}")]
    BudgetExceeded { needed: usize, available: usize },
    #[error("held-out pool exhausted: wanted {wanted} overlap-free test queries, found {found}")]
    PoolExhausted { wanted: usize, found: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    TokenOutOfRange(usize),
    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid intervention: {0}")]
    Intervention(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("empty batch: no target tokens")]
    EmptyBatch,
    #[error("empty stage mixture in stage {0}")]
    EmptyStage(usize),
    #[error("gradient check needs at least one coordinate")]
    EmptyGradCheck,
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("probe fold has a single class")]
    DegenerateProbe,
    #[error("no corrupted instance found within {0} draws")]
    CorruptionExhausted(usize),
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("graph file format: {0}")]
    GraphFormat(String),
    #[error("theory oracle: {0}")]
    Theory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
