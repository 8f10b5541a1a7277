// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layered knowledge graphs, k-hop queries and dataset splits.
//!
//! Entities are split into `num_layers` disjoint layers of equal size.
//! Layer 0 is the bottom layer; every entity below the top layer has exactly
//! one outgoing edge per relation, pointing into the layer directly above.
//! A k-hop query starts at a bottom-layer entity, so its i-hop bridge entity
//! lives in layer i and its answer in layer k.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::names::{entity_namespace, filler_namespace, RELATION_NAMESPACE};
use crate::rng::SeedTree;
use crate::{sha256_hex, Error, Result};

/// The data-budget multipliers applied to the base 2-hop training size.
pub const BUDGET_RATIOS: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u16);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Sizes and seed of a graph; everything needed to regenerate it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    pub seed: u64,
}

fn default_layers() -> usize {
    5
}

impl GraphSpec {
    /// |E| = 250, |R| = 10.
    pub fn small(seed: u64) -> Self {
        Self { num_entities: 250, num_relations: 10, num_layers: 5, seed }
    }

    /// |E| = 500, |R| = 20.
    pub fn large(seed: u64) -> Self {
        Self { num_entities: 500, num_relations: 20, num_layers: 5, seed }
    }

    /// |E| = 100, |R| = 5: the desk-scale configuration.
    pub fn tiny(seed: u64) -> Self {
        Self { num_entities: 100, num_relations: 5, num_layers: 5, seed }
    }

    pub fn build(&self) -> Result<EntityGraph> {
        sample_entity_graph(self.num_entities, self.num_relations, self.num_layers, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityGraph {
    num_layers: usize,
    layer_size: usize,
    seed: u64,
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    filler_names: Vec<String>,
    /// `edges[e][r]`; empty for top-layer entities.
    edges: Vec<Vec<EntityId>>,
    /// `filler_edges[e][r]` indexes `filler_names`; only top-layer entities have them.
    filler_edges: Vec<Vec<u32>>,
}

/// Samples a layered entity graph.
///
/// Upper-layer targets are drawn with replacement per relation, so two
/// relations of one entity may share a target.
pub fn sample_entity_graph(
    num_entities: usize,
    num_relations: usize,
    num_layers: usize,
    seed: u64,
) -> Result<EntityGraph> {
    if num_layers < 2 {
        return Err(Error::GraphParams(format!("need at least 2 layers, got {num_layers}")));
    }
    if num_entities == 0 || num_entities % num_layers != 0 {
        return Err(Error::GraphParams(format!(
            "{num_entities} entities cannot be split into {num_layers} equal layers"
        )));
    }
    if num_relations == 0 {
        return Err(Error::GraphParams("need at least one relation".into()));
    }
    let ents = entity_namespace();
    if num_entities > ents.len() {
        return Err(Error::NamespaceExhausted {
            kind: "entity",
            needed: num_entities,
            available: ents.len(),
        });
    }
    if num_relations > RELATION_NAMESPACE.len() {
        return Err(Error::NamespaceExhausted {
            kind: "relation",
            needed: num_relations,
            available: RELATION_NAMESPACE.len(),
        });
    }

    let tree = SeedTree::new(seed);
    let layer_size = num_entities / num_layers;

    let mut order: Vec<usize> = (0..ents.len()).collect();
    order.shuffle(&mut tree.rng("entity-names", &[]));
    let entity_names: Vec<String> = order[..num_entities].iter().map(|&i| ents[i].clone()).collect();

    let mut rel_order: Vec<usize> = (0..RELATION_NAMESPACE.len()).collect();
    rel_order.shuffle(&mut tree.rng("relation-names", &[]));
    let relation_names: Vec<String> = rel_order[..num_relations]
        .iter()
        .map(|&i| RELATION_NAMESPACE[i].to_string())
        .collect();

    let filler_names = filler_namespace();
    let top_start = (num_layers - 1) * layer_size;

    let mut edges = Vec::with_capacity(num_entities);
    let mut filler_edges = Vec::with_capacity(num_entities);
    for e in 0..num_entities {
        if e < top_start {
            let upper = (e / layer_size + 1) * layer_size;
            let mut rng = tree.rng("edges", &[e as u64]);
            let targets = (0..num_relations)
                .map(|_| EntityId((upper + rng.random_range(0..layer_size)) as u32))
                .collect();
            edges.push(targets);
            filler_edges.push(Vec::new());
        } else {
            let mut rng = tree.rng("filler-edges", &[e as u64]);
            edges.push(Vec::new());
            filler_edges.push(
                (0..num_relations)
                    .map(|_| rng.random_range(0..filler_names.len()) as u32)
                    .collect(),
            );
        }
    }

    Ok(EntityGraph {
        num_layers,
        layer_size,
        seed,
        entity_names,
        relation_names,
        filler_names,
        edges,
        filler_edges,
    })
}

impl EntityGraph {
    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn layer_size(&self) -> usize {
        self.layer_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            num_entities: self.num_entities(),
            num_relations: self.num_relations(),
            num_layers: self.num_layers,
            seed: self.seed,
        }
    }

    /// Entities of layer `l` (0 = bottom), in id order.
    pub fn layer(&self, l: usize) -> Vec<EntityId> {
        (l * self.layer_size..(l + 1) * self.layer_size)
            .map(|i| EntityId(i as u32))
            .collect()
    }

    pub fn layers(&self) -> Vec<Vec<EntityId>> {
        (0..self.num_layers).map(|l| self.layer(l)).collect()
    }

    pub fn layer_of(&self, e: EntityId) -> usize {
        e.index() / self.layer_size
    }

    pub fn is_top(&self, e: EntityId) -> bool {
        self.layer_of(e) == self.num_layers - 1
    }

    pub fn edge(&self, e: EntityId, r: RelationId) -> Option<EntityId> {
        self.edges.get(e.index())?.get(r.index()).copied()
    }

    /// Filler object of a top-layer entity's relation, as an index into
    /// [`EntityGraph::filler_names`].
    pub fn filler_edge(&self, e: EntityId, r: RelationId) -> Option<usize> {
        self.filler_edges.get(e.index())?.get(r.index()).map(|&i| i as usize)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entity_names[e.index()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_names[r.index()]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn filler_names(&self) -> &[String] {
        &self.filler_names
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> {
        (0..self.num_relations()).map(|r| RelationId(r as u16))
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities()).map(|e| EntityId(e as u32))
    }

    /// Serializes the graph as a structured text file.
    ///
    /// ```text
    /// khop-graph v1
    /// seed <u64>
    /// entities <n> relations <n> layers <n>
    /// checksum <sha256 of everything after this line>
    /// [relations]      id name
    /// [entities]       id layer name
    /// [fillers]        id name
    /// [edges]          subject relation object
    /// [filler-edges]   subject relation filler-id
    /// ```
    pub fn to_text(&self) -> String {
        let mut body = String::new();
        body.push_str("[relations]\n");
        for (i, r) in self.relation_names.iter().enumerate() {
            let _ = writeln!(body, "{i} {r}");
        }
        body.push_str("[entities]\n");
        for e in self.entities() {
            let _ = writeln!(body, "{} {} {}", e.0, self.layer_of(e), self.entity_name(e));
        }
        body.push_str("[fillers]\n");
        for (i, f) in self.filler_names.iter().enumerate() {
            let _ = writeln!(body, "{i} {f}");
        }
        body.push_str("[edges]\n");
        for e in self.entities() {
            for (r, t) in self.edges[e.index()].iter().enumerate() {
                let _ = writeln!(body, "{} {} {}", e.0, r, t.0);
            }
        }
        body.push_str("[filler-edges]\n");
        for e in self.entities() {
            for (r, t) in self.filler_edges[e.index()].iter().enumerate() {
                let _ = writeln!(body, "{} {} {}", e.0, r, t);
            }
        }
        format!(
            "khop-graph v1\nseed {}\nentities {} relations {} layers {}\nchecksum {}\n{}",
            self.seed,
            self.num_entities(),
            self.num_relations(),
            self.num_layers,
            sha256_hex(body.as_bytes()),
            body
        )
    }

    /// Parses [`EntityGraph::to_text`] output, verifying the checksum and all
    /// graph invariants.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::GraphFormat(m.to_string());
        let mut head = text.splitn(5, '\n');
        if head.next() != Some("khop-graph v1") {
            return Err(bad("missing magic line"));
        }
        let seed: u64 = head
            .next()
            .and_then(|l| l.strip_prefix("seed "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad seed line"))?;
        let sizes: Vec<usize> = head
            .next()
            .ok_or_else(|| bad("missing size line"))?
            .split(' ')
            .skip(1)
            .step_by(2)
            .map(|s| s.parse().map_err(|_| bad("bad size")))
            .collect::<Result<_>>()?;
        let [n_ent, n_rel, n_layers] = sizes[..] else {
            return Err(bad("size line needs three values"));
        };
        let checksum = head
            .next()
            .and_then(|l| l.strip_prefix("checksum "))
            .ok_or_else(|| bad("missing checksum"))?;
        let body = head.next().unwrap_or("");
        if sha256_hex(body.as_bytes()) != checksum {
            return Err(bad("checksum mismatch"));
        }
        if n_layers < 2 || n_ent == 0 || n_ent % n_layers != 0 {
            return Err(bad("inconsistent sizes"));
        }
        let layer_size = n_ent / n_layers;

        let mut relation_names = Vec::new();
        let mut entity_names = Vec::new();
        let mut filler_names = Vec::new();
        let mut edges = vec![Vec::new(); n_ent];
        let mut filler_edges = vec![Vec::new(); n_ent];
        let mut section = "";
        for line in body.lines() {
            if line.starts_with('[') {
                section = line;
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))
            };
            match section {
                "[relations]" => {
                    if num(0)? != relation_names.len() || f.len() != 2 {
                        return Err(bad(line));
                    }
                    relation_names.push(f[1].to_string());
                }
                "[entities]" => {
                    let id = num(0)?;
                    if id != entity_names.len() || num(1)? != id / layer_size || f.len() != 3 {
                        return Err(bad(line));
                    }
                    entity_names.push(f[2].to_string());
                }
                "[fillers]" => {
                    if num(0)? != filler_names.len() || f.len() != 2 {
                        return Err(bad(line));
                    }
                    filler_names.push(f[1].to_string());
                }
                "[edges]" => {
                    let (s, r, t) = (num(0)?, num(1)?, num(2)?);
                    if s >= n_ent || r != edges[s].len() || t >= n_ent {
                        return Err(bad(line));
                    }
                    edges[s].push(EntityId(t as u32));
                }
                "[filler-edges]" => {
                    let (s, r, t) = (num(0)?, num(1)?, num(2)?);
                    if s >= n_ent || r != filler_edges[s].len() {
                        return Err(bad(line));
                    }
                    filler_edges[s].push(t as u32);
                }
                _ => return Err(bad("content outside a section")),
            }
        }
        if relation_names.len() != n_rel || entity_names.len() != n_ent {
            return Err(bad("section sizes disagree with header"));
        }
        let g = EntityGraph {
            num_layers: n_layers,
            layer_size,
            seed,
            entity_names,
            relation_names,
            filler_names,
            edges,
            filler_edges,
        };
        g.check_invariants().map_err(|m| Error::GraphFormat(m))?;
        Ok(g)
    }

    /// Verifies the structural invariants; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.num_entities();
        if self.layer_size * self.num_layers != n {
            return Err("layers do not cover all entities".into());
        }
        let names: HashSet<&String> = self.entity_names.iter().collect();
        if names.len() != n {
            return Err("entity names are not distinct".into());
        }
        let rels: HashSet<&String> = self.relation_names.iter().collect();
        if rels.len() != self.num_relations() {
            return Err("relation names are not distinct".into());
        }
        for e in self.entities() {
            let out = &self.edges[e.index()];
            if self.is_top(e) {
                if !out.is_empty() {
                    return Err(format!("top-layer entity {} has edges", e.0));
                }
                let fill = &self.filler_edges[e.index()];
                if fill.len() != self.num_relations()
                    || fill.iter().any(|&f| f as usize >= self.filler_names.len())
                {
                    return Err(format!("top-layer entity {} has bad filler facts", e.0));
                }
            } else {
                if out.len() != self.num_relations() {
                    return Err(format!("entity {} has {} edges", e.0, out.len()));
                }
                let up = self.layer_of(e) + 1;
                if out.iter().any(|&t| t.index() >= n || self.layer_of(t) != up) {
                    return Err(format!("entity {} has an edge outside layer {up}", e.0));
                }
            }
        }
        Ok(())
    }
}

/// A k-hop question with its gold traversal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub source: EntityId,
    /// `relations[i]` is the (i+1)-hop relation.
    pub relations: Vec<RelationId>,
    /// `bridges[i]` is the (i+1)-hop bridge entity.
    pub bridges: Vec<EntityId>,
    pub answer: EntityId,
}

/// Identity of a query: its source and relation chain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryKey {
    pub source: EntityId,
    pub relations: Vec<RelationId>,
}

impl Query {
    pub fn k(&self) -> usize {
        self.relations.len()
    }

    pub fn key(&self) -> QueryKey {
        QueryKey { source: self.source, relations: self.relations.clone() }
    }

    /// The gold entity at hop `i` (1-based); hop k is the answer.
    pub fn hop_entity(&self, i: usize) -> EntityId {
        assert!(i >= 1 && i <= self.k(), "hop {i} out of range for a {}-hop query", self.k());
        if i == self.k() {
            self.answer
        } else {
            self.bridges[i - 1]
        }
    }

    /// Source followed by every bridge: the subject of each hop in order.
    pub fn chain_subjects(&self) -> Vec<EntityId> {
        std::iter::once(self.source).chain(self.bridges.iter().copied()).collect()
    }
}

/// Per-hop limits on how many distinct relations may appear at each hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationConstraint {
    pub counts: Vec<usize>,
}

impl RelationConstraint {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    /// The allowed relations at hop `hop` (0-based): a seeded subset of the
    /// configured size, sorted by id.
    pub fn allowed(&self, graph: &EntityGraph, hop: usize) -> Vec<RelationId> {
        let mut ids: Vec<RelationId> = graph.relations().collect();
        let count = self.counts[hop];
        if count < ids.len() {
            ids.shuffle(&mut SeedTree::new(graph.seed()).rng("relation-constraint", &[hop as u64]));
            ids.truncate(count);
            ids.sort();
        }
        ids
    }
}

/// Follows `relations` from `source`, returning `(bridges, answer)`.
pub fn answer_query(
    graph: &EntityGraph,
    source: EntityId,
    relations: &[RelationId],
) -> Result<(Vec<EntityId>, EntityId)> {
    if source.index() >= graph.num_entities() || graph.layer_of(source) != 0 {
        return Err(Error::Query(format!("source {} is not a bottom-layer entity", source.0)));
    }
    if relations.is_empty() {
        return Err(Error::Query("empty relation chain".into()));
    }
    let mut cur = source;
    let mut bridges = Vec::with_capacity(relations.len() - 1);
    for (i, &r) in relations.iter().enumerate() {
        if r.index() >= graph.num_relations() {
            return Err(Error::Query(format!("relation {} out of range", r.0)));
        }
        cur = graph
            .edge(cur, r)
            .ok_or(Error::MissingEdge { entity: cur.index(), relation: r.index() })?;
        if i + 1 < relations.len() {
            bridges.push(cur);
        }
    }
    Ok((bridges, cur))
}

/// All k-hop queries from bottom-layer sources, ordered by source then by
/// relation tuple (lexicographic over the allowed lists).
pub fn enumerate_queries(
    graph: &EntityGraph,
    k: usize,
    constraint: Option<&RelationConstraint>,
) -> Result<Vec<Query>> {
    if k == 0 || k >= graph.num_layers() {
        return Err(Error::Query(format!(
            "k = {k} out of range 1..={}",
            graph.num_layers() - 1
        )));
    }
    let allowed: Vec<Vec<RelationId>> = match constraint {
        None => vec![graph.relations().collect(); k],
        Some(c) => {
            if c.counts.len() != k {
                return Err(Error::Query(format!(
                    "constraint has {} hop counts, query has {k} hops",
                    c.counts.len()
                )));
            }
            if let Some(&bad) = c.counts.iter().find(|&&n| n == 0 || n > graph.num_relations()) {
                return Err(Error::Query(format!(
                    "constraint size {bad} outside 1..={}",
                    graph.num_relations()
                )));
            }
            (0..k).map(|h| c.allowed(graph, h)).collect()
        }
    };
    let per_source: usize = allowed.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(per_source * graph.layer_size());
    for source in graph.layer(0) {
        let mut digits = vec![0usize; k];
        for _ in 0..per_source {
            let relations: Vec<RelationId> = digits.iter().zip(&allowed).map(|(&d, a)| a[d]).collect();
            let (bridges, answer) = answer_query(graph, source, &relations)?;
            out.push(Query { source, relations, bridges, answer });
            // odometer increment, last hop fastest
            for pos in (0..k).rev() {
                digits[pos] += 1;
                if digits[pos] < allowed[pos].len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }
    Ok(out)
}

/// Training questions, held-out test questions and the profile set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    /// Entities whose profiles are part of every training set (all of them).
    pub profiles: Vec<EntityId>,
    /// Target-hop training questions; `budget_ratio * base_budget` of them.
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    /// Lower-hop auxiliary training questions (mixed / curriculum).
    #[serde(default)]
    pub aux_queries: Vec<Query>,
    pub budget_ratio: usize,
    pub base_budget: usize,
    /// Hop count of every training question, present when the split mixes hops.
    #[serde(default)]
    pub stage_tags: Option<BTreeMap<usize, usize>>,
    /// Name of the overlap rule the test set was filtered with, if any.
    #[serde(default)]
    pub overlap_rule: Option<String>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Training questions of hop count `k` (target or auxiliary).
    pub fn train_with_hops(&self, hops: &[usize]) -> Vec<&Query> {
        self.aux_queries
            .iter()
            .chain(&self.train_queries)
            .filter(|q| hops.contains(&q.k()))
            .collect()
    }

    /// Number of training records: profiles plus all training questions.
    pub fn num_train_records(&self) -> usize {
        self.profiles.len() + self.train_queries.len() + self.aux_queries.len()
    }
}

fn check_ratio(ratio: usize) -> Result<()> {
    if BUDGET_RATIOS.contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Query(format!("budget ratio {ratio} is not one of {BUDGET_RATIOS:?}")))
    }
}

fn sorted_by_key(mut qs: Vec<Query>) -> Vec<Query> {
    qs.sort_by(|a, b| a.key().cmp(&b.key()));
    qs
}

/// Samples `budget_ratio * base_budget` training queries and `test_size`
/// held-out test queries, uniformly without replacement.
pub fn build_split(
    graph: &EntityGraph,
    queries: &[Query],
    base_budget: usize,
    budget_ratio: usize,
    test_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    check_ratio(budget_ratio)?;
    let n_train = budget_ratio * base_budget;
    if n_train + test_size > queries.len() {
        return Err(Error::BudgetExceeded { needed: n_train + test_size, available: queries.len() });
    }
    let order = shuffled_indices(queries.len(), seed);
    let train = order[..n_train].iter().map(|&i| queries[i].clone()).collect();
    let test = order[n_train..n_train + test_size].iter().map(|&i| queries[i].clone()).collect();
    Ok(DatasetSplit {
        profiles: graph.entities().collect(),
        train_queries: sorted_by_key(train),
        test_queries: sorted_by_key(test),
        aux_queries: Vec::new(),
        budget_ratio,
        base_budget,
        stage_tags: None,
        overlap_rule: None,
        seed,
    })
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).rng("split", &[]));
    order
}

/// Name recorded in split metadata for the overlap rule implemented by
/// [`OverlapIndex::has_overlap`].
pub const OVERLAP_RULE: &str = "contiguous-subchain";

/// Index of auxiliary queries for overlap tests.
#[derive(Debug, Clone, Default)]
pub struct OverlapIndex {
    keys: HashSet<QueryKey>,
    lengths: Vec<usize>,
}

impl OverlapIndex {
    pub fn new(aux: &[Query]) -> Self {
        let keys: HashSet<QueryKey> = aux.iter().map(Query::key).collect();
        let mut lengths: Vec<usize> = keys.iter().map(|k| k.relations.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        Self { keys, lengths }
    }

    /// True if some contiguous sub-chain of `q` (a subject entity of the
    /// chain followed by the next m relations) is an auxiliary query.
    pub fn has_overlap(&self, q: &Query) -> bool {
        let subjects = q.chain_subjects();
        for &m in &self.lengths {
            if m >= q.k() {
                continue;
            }
            for start in 0..=q.k() - m {
                let key = QueryKey {
                    source: subjects[start],
                    relations: q.relations[start..start + m].to_vec(),
                };
                if self.keys.contains(&key) {
                    return true;
                }
            }
        }
        false
    }
}

/// Test queries with no sub-chain appearing among the lower-hop
/// auxiliary training queries.
pub fn filter_overlap(test: &[Query], aux_train: &[Query]) -> Vec<Query> {
    let index = OverlapIndex::new(aux_train);
    test.iter().filter(|q| !index.has_overlap(q)).cloned().collect()
}

/// Samples lower-hop auxiliary training questions: `sizes[m]` m-hop
/// questions for each entry.
pub fn sample_aux_queries(
    graph: &EntityGraph,
    sizes: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<Vec<Query>> {
    let tree = SeedTree::new(seed);
    let mut out = Vec::new();
    for (&m, &n) in sizes {
        let all = enumerate_queries(graph, m, None)?;
        if n > all.len() {
            return Err(Error::BudgetExceeded { needed: n, available: all.len() });
        }
        let order = shuffled_indices(all.len(), tree.seed("aux", &[m as u64]));
        out.extend(sorted_by_key(order[..n].iter().map(|&i| all[i].clone()).collect()));
    }
    Ok(out)
}

/// Default auxiliary sizes for a k-hop target: 80% of all 2-hop questions,
/// and for 3-hop a fraction that follows the two reference configurations
/// (40% of all 3-hop questions when |R| <= 10, 12.5% otherwise).
pub fn default_aux_sizes(graph: &EntityGraph, k: usize) -> BTreeMap<usize, usize> {
    let n = graph.layer_size();
    let r = graph.num_relations();
    let mut sizes = BTreeMap::new();
    if k >= 3 {
        sizes.insert(2, (r * r * n * 4) / 5);
    }
    if k >= 4 {
        let all3 = r * r * r * n;
        let frac = if r <= 10 { all3 * 2 / 5 } else { all3 / 8 };
        sizes.insert(3, frac);
    }
    sizes
}

/// Builds a split with lower-hop auxiliary questions and an overlap-free
/// test set.
///
/// Training questions are sampled exactly as in [`build_split`]; test
/// questions are then drawn from the held-out remainder in seeded order,
/// rejecting any with a sub-chain among `aux`.
pub fn build_staged_split(
    graph: &EntityGraph,
    queries: &[Query],
    aux: Vec<Query>,
    base_budget: usize,
    budget_ratio: usize,
    test_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    check_ratio(budget_ratio)?;
    let n_train = budget_ratio * base_budget;
    if n_train + test_size > queries.len() {
        return Err(Error::BudgetExceeded { needed: n_train + test_size, available: queries.len() });
    }
    let order = shuffled_indices(queries.len(), seed);
    let train: Vec<Query> = order[..n_train].iter().map(|&i| queries[i].clone()).collect();
    let index = OverlapIndex::new(&aux);
    let mut test = Vec::with_capacity(test_size);
    for &i in &order[n_train..] {
        if test.len() == test_size {
            break;
        }
        if !index.has_overlap(&queries[i]) {
            test.push(queries[i].clone());
        }
    }
    if test.len() < test_size {
        return Err(Error::PoolExhausted { wanted: test_size, found: test.len() });
    }
    let mut tags = BTreeMap::new();
    for q in aux.iter().chain(&train) {
        *tags.entry(q.k()).or_insert(0) += 1;
    }
    Ok(DatasetSplit {
        profiles: graph.entities().collect(),
        train_queries: sorted_by_key(train),
        test_queries: sorted_by_key(test),
        aux_queries: aux,
        budget_ratio,
        base_budget,
        stage_tags: Some(tags),
        overlap_rule: Some(OVERLAP_RULE.to_string()),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> EntityGraph {
        sample_entity_graph(5, 1, 5, 3).unwrap()
    }

    #[test]
    fn reference_sizes() {
        let g = sample_entity_graph(500, 20, 5, 1).unwrap();
        assert_eq!(g.layer_size(), 100);
        for e in g.layer(0) {
            assert_eq!(g.relations().filter(|&r| g.edge(e, r).is_some()).count(), 20);
        }
        let g = sample_entity_graph(250, 10, 5, 1).unwrap();
        assert_eq!(g.layer_size(), 50);
        assert_eq!(enumerate_queries(&g, 2, None).unwrap().len(), 5000);
    }

    #[test]
    fn chain_graph_has_single_path() {
        let g = chain();
        assert_eq!(g.layer_size(), 1);
        let qs = enumerate_queries(&g, 4, None).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].answer, EntityId(4));
        assert_eq!(qs[0].bridges, vec![EntityId(1), EntityId(2), EntityId(3)]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(sample_entity_graph(101, 5, 5, 0), Err(Error::GraphParams(_))));
        assert!(matches!(
            sample_entity_graph(1000, 5, 5, 0),
            Err(Error::NamespaceExhausted { kind: "entity", .. })
        ));
        assert!(matches!(
            sample_entity_graph(100, 21, 5, 0),
            Err(Error::NamespaceExhausted { kind: "relation", .. })
        ));
        let g = GraphSpec::tiny(0).build().unwrap();
        assert!(enumerate_queries(&g, 5, None).is_err());
        assert!(enumerate_queries(&g, 0, None).is_err());
        assert!(enumerate_queries(&g, 2, Some(&RelationConstraint::new(vec![6, 1]))).is_err());
        assert!(enumerate_queries(&g, 2, Some(&RelationConstraint::new(vec![1]))).is_err());
    }

    #[test]
    fn one_hop_base_case() {
        let g = GraphSpec::tiny(4).build().unwrap();
        let s = g.layer(0)[3];
        let (b, a) = answer_query(&g, s, &[RelationId(2)]).unwrap();
        assert!(b.is_empty());
        assert_eq!(Some(a), g.edge(s, RelationId(2)));
        assert!(answer_query(&g, g.layer(1)[0], &[RelationId(0)]).is_err());
        assert!(answer_query(&g, s, &[RelationId(9)]).is_err());
    }

    #[test]
    fn constrained_enumeration_uses_fixed_subsets() {
        let g = GraphSpec::tiny(2).build().unwrap();
        let c = RelationConstraint::new(vec![1, 2, 5]);
        let qs = enumerate_queries(&g, 3, Some(&c)).unwrap();
        assert_eq!(qs.len(), 2 * 5 * 20);
        let first: HashSet<RelationId> = qs.iter().map(|q| q.relations[0]).collect();
        let second: HashSet<RelationId> = qs.iter().map(|q| q.relations[1]).collect();
        assert_eq!(first.len(), 1);
        assert_eq!(second.len(), 2);
        assert_eq!(c.allowed(&g, 1), c.allowed(&g, 1));
    }

    #[test]
    fn split_budget_errors() {
        let g = GraphSpec::tiny(0).build().unwrap();
        let qs = enumerate_queries(&g, 2, None).unwrap();
        let err = build_split(&g, &qs, 400, 2, 100, 0).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { needed: 900, available: 500 }));
        assert!(build_split(&g, &qs, 400, 3, 0, 0).is_err());
        let s = build_split(&g, &qs, 400, 1, 100, 0).unwrap();
        assert_eq!(s.train_queries.len(), 400);
        assert_eq!(s.test_queries.len(), 100);
    }

    #[test]
    fn overlap_definition_instance() {
        let g = GraphSpec::tiny(5).build().unwrap();
        let q4 = enumerate_queries(&g, 4, None).unwrap()[77].clone();
        let (b, a) = answer_query(&g, q4.source, &q4.relations[..2]).unwrap();
        let aux = Query { source: q4.source, relations: q4.relations[..2].to_vec(), bridges: b, answer: a };
        assert!(filter_overlap(&[q4.clone()], &[aux]).is_empty());
        assert_eq!(filter_overlap(&[q4.clone()], &[]), vec![q4]);
    }

    #[test]
    fn graph_text_round_trip_and_tamper() {
        let g = GraphSpec::tiny(11).build().unwrap();
        let text = g.to_text();
        assert_eq!(EntityGraph::from_text(&text).unwrap(), g);
        let tampered = text.replacen("[edges]\n0 0", "[edges]\n0 0 ", 1);
        assert!(EntityGraph::from_text(&tampered).is_err());
    }
}
