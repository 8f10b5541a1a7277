// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text rendering and word-level tokenization.
//!
//! Every word, punctuation mark, relation name and entity name is one token;
//! text is tokens joined by single spaces. Question prompts end with an
//! explicit `<space>` slot token, the position at which the answer entity
//! is predicted.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::graph::{DatasetSplit, EntityGraph, EntityId, Query, RelationId};
use crate::{sha256_hex, Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const SLOT: &str = "<space>";
pub const TEMPLATE_WORDS: [&str; 10] = ["Who", "is", "the", "of", "?", "\n", "Answer", ":", "'s", "."];

/// Token table: `<pad>`, `<bos>`, `<space>`, template words, relation
/// names, entity names and filler names, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    relation_offset: usize,
    entity_offset: usize,
    num_entities: usize,
}

impl Vocab {
    pub fn build(graph: &EntityGraph) -> Self {
        let mut tokens: Vec<String> = [PAD, BOS, SLOT].iter().map(|s| s.to_string()).collect();
        tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        let relation_offset = tokens.len();
        debug_assert_eq!(relation_offset, RELATION_OFFSET);
        tokens.extend(graph.relation_names().iter().cloned());
        let entity_offset = tokens.len();
        tokens.extend(graph.entity_names().iter().cloned());
        tokens.extend(graph.filler_names().iter().cloned());
        Self::from_parts(tokens, relation_offset, entity_offset, graph.num_entities())
            .expect("graph names are distinct")
    }

    fn from_parts(
        tokens: Vec<String>,
        relation_offset: usize,
        entity_offset: usize,
        num_entities: usize,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(' ') || index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::UnknownToken(format!("invalid or duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, index, relation_offset, entity_offset, num_entities })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(Error::TokenOutOfRange(id as usize))
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn bos_id(&self) -> u32 {
        1
    }

    pub fn slot_id(&self) -> u32 {
        2
    }

    pub fn relation_token(&self, r: RelationId) -> u32 {
        (self.relation_offset + r.index()) as u32
    }

    pub fn entity_token(&self, e: EntityId) -> u32 {
        (self.entity_offset + e.index()) as u32
    }

    /// Inverse of [`Vocab::entity_token`]; `None` for non-entity tokens.
    pub fn token_entity(&self, id: u32) -> Option<EntityId> {
        let i = id as usize;
        (i >= self.entity_offset && i < self.entity_offset + self.num_entities)
            .then(|| EntityId((i - self.entity_offset) as u32))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split(' ').map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn checksum(&self) -> String {
        sha256_hex(serde_json::to_string(&self.tokens).expect("strings serialize").as_bytes())
    }
}

/// On-disk form: the ordered token list plus the relation and entity counts.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    num_relations: usize,
    num_entities: usize,
}

const RELATION_OFFSET: usize = 3 + TEMPLATE_WORDS.len();

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        Self {
            num_relations: v.entity_offset - v.relation_offset,
            num_entities: v.num_entities,
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;
    fn try_from(f: VocabFile) -> Result<Self> {
        let entity_offset = RELATION_OFFSET + f.num_relations;
        if entity_offset + f.num_entities > f.tokens.len() {
            return Err(Error::UnknownToken("vocab counts exceed token list".into()));
        }
        Self::from_parts(f.tokens, RELATION_OFFSET, entity_offset, f.num_entities)
    }
}

/// A profile paragraph: one sentence per relation, in relation-id order.
/// Top-layer entities get filler facts.
pub fn render_profile(graph: &EntityGraph, e: EntityId) -> String {
    let subj = graph.entity_name(e);
    graph
        .relations()
        .map(|r| {
            let obj = match graph.edge(e, r) {
                Some(t) => graph.entity_name(t),
                None => {
                    let f = graph.filler_edge(e, r).expect("top-layer entities have filler facts");
                    &graph.filler_names()[f]
                }
            };
            format!("{subj} 's {} is {obj} .", graph.relation_name(r))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `Who is the r_k of the r_{k-1} of ... of the r_1 of <source> ? \n Answer :`
pub fn render_question(graph: &EntityGraph, q: &Query) -> String {
    let chain: Vec<&str> = q.relations.iter().rev().map(|&r| graph.relation_name(r)).collect();
    format!("Who is the {} of {} ? \n Answer :", chain.join(" of the "), graph.entity_name(q.source))
}

/// Inverse of [`render_question`]: recovers `(source, relations)`.
pub fn parse_question(graph: &EntityGraph, text: &str) -> Result<(EntityId, Vec<RelationId>)> {
    let bad = || Error::Query(format!("not a rendered question: {text:?}"));
    let body = text
        .strip_prefix("Who is the ")
        .and_then(|t| t.strip_suffix(" ? \n Answer :"))
        .ok_or_else(bad)?;
    let (chain, source) = body.rsplit_once(" of ").ok_or_else(bad)?;
    let source = graph
        .entity_names()
        .iter()
        .position(|n| n == source)
        .ok_or_else(bad)?;
    let mut relations = chain
        .split(" of the ")
        .map(|name| {
            graph
                .relation_names()
                .iter()
                .position(|n| n == name)
                .map(|i| RelationId(i as u16))
                .ok_or_else(bad)
        })
        .collect::<Result<Vec<_>>>()?;
    relations.reverse();
    Ok((EntityId(source as u32), relations))
}

/// A tokenized question prompt with its position bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInstance {
    /// `<bos> Who is ... Answer : <space>`
    pub text: String,
    pub tokens: Vec<u32>,
    /// Index of the trailing `<space>` slot (the last prompt position).
    pub answer_position: usize,
    /// `hop_token_positions[i]` is the position of the (i+1)-hop relation.
    pub hop_token_positions: Vec<usize>,
    pub entity_position: usize,
    pub answer_token: u32,
}

impl RenderedInstance {
    pub fn question(graph: &EntityGraph, vocab: &Vocab, q: &Query) -> Result<Self> {
        let text = format!("{BOS} {} {SLOT}", render_question(graph, q));
        let tokens = vocab.encode(&text)?;
        let k = q.k();
        // <bos> Who is the r_k (of the r_j)* of E ? \n Answer : <space>
        // r_k sits at 4; each further relation 3 tokens later.
        let hop_token_positions = (1..=k).map(|hop| 4 + 3 * (k - hop)).collect();
        let entity_position = 4 + 3 * (k - 1) + 2;
        let answer_position = tokens.len() - 1;
        Ok(Self {
            text,
            tokens,
            answer_position,
            hop_token_positions,
            entity_position,
            answer_token: vocab.entity_token(q.answer),
        })
    }

    /// Prompt followed by the gold answer: the training sequence.
    pub fn training_tokens(&self) -> Vec<u32> {
        let mut t = self.tokens.clone();
        t.push(self.answer_token);
        t
    }
}

/// Training sequence for an entity profile: `<bos>` followed by the paragraph.
pub fn profile_tokens(graph: &EntityGraph, vocab: &Vocab, e: EntityId) -> Result<Vec<u32>> {
    vocab.encode(&format!("{BOS} {}", render_profile(graph, e)))
}

/// Serializes a split as JSON lines: a header record followed by profile
/// and question records. The header carries the SHA-256 of the body lines.
pub fn split_to_jsonl(graph: &EntityGraph, vocab: &Vocab, split: &DatasetSplit) -> Result<String> {
    let mut body = String::new();
    let mut push = |v: serde_json::Value| {
        body.push_str(&v.to_string());
        body.push('\n');
    };
    for &e in &split.profiles {
        push(json!({
            "kind": "profile",
            "payload": { "entity": e, "text": render_profile(graph, e) }
        }));
    }
    let parts = [("aux", &split.aux_queries), ("train", &split.train_queries), ("test", &split.test_queries)];
    for (part, qs) in parts {
        for q in qs.iter() {
            let inst = RenderedInstance::question(graph, vocab, q)?;
            push(json!({
                "kind": "question",
                "payload": {
                    "split": part,
                    "k": q.k(),
                    "source": q.source,
                    "relations": q.relations,
                    "bridges": q.bridges,
                    "answer": q.answer,
                    "text": inst.text,
                    "answer_text": graph.entity_name(q.answer),
                    "tokens": inst.tokens,
                    "answer_position": inst.answer_position,
                    "entity_position": inst.entity_position,
                    "hop_token_positions": inst.hop_token_positions,
                }
            }));
        }
    }
    let header = json!({
        "kind": "header",
        "payload": {
            "seed": split.seed,
            "graph_seed": graph.seed(),
            "num_entities": graph.num_entities(),
            "num_relations": graph.num_relations(),
            "num_layers": graph.num_layers(),
            "budget_ratio": split.budget_ratio,
            "base_budget": split.base_budget,
            "train_records": split.profiles.len() + split.train_queries.len() + split.aux_queries.len(),
            "test_records": split.test_queries.len(),
            "overlap_rule": split.overlap_rule,
            "vocab_checksum": vocab.checksum(),
            "checksum": sha256_hex(body.as_bytes()),
        }
    });
    Ok(format!("{header}\n{body}"))
}
