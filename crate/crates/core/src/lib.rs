// SPDX-License-Identifier: MIT OR Apache-2.0

//! # khop
//!
//! A laboratory for implicit k-hop reasoning in small decoder-only
//! transformers:
//!
//! - [`graph`]: layered synthetic knowledge graphs, k-hop query enumeration,
//!   budget-scaled dataset splits and overlap-free test sets.
//! - [`corpus`]: profile/question templates and a word-level tokenizer.
//! - [`model`]: a pre-norm RoPE transformer with activation tracing and
//!   intervention hooks, plus hand-written backpropagation.
//! - [`train`]: causal-LM loss, AdamW, warmup+cosine schedule, staged
//!   (baseline / mixed / curriculum) training and gradient checking.
//! - [`eval`]: greedy answer evaluation, budget and depth sweeps.
//! - [`interp`]: linear probes and activation patching.
//! - [`theory`]: the f/g construction behind the depth lower bound.
//!
//! Everything is deterministic given a seed; randomness flows through
//! [`rng::SeedTree`].

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod graph;
pub mod interp;
pub mod model;
pub mod names;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
