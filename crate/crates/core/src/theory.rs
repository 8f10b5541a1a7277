// SPDX-License-Identifier: MIT OR Apache-2.0

//! The f/g relation pair behind the depth lower bound.
//!
//! The universe is `{0, x_0, …, x_{n−1}}`, stored as indices with 0 the
//! sink and `x_i` at index `i + 1`. `f` cycles the non-sink entities; `g`
//! sends `x_0` to the sink and fixes everything else. Words over `{f, g}`
//! apply their first letter first.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Letter {
    F,
    G,
}

/// A total function on the universe, as a table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationMap {
    pub table: Vec<usize>,
}

impl RelationMap {
    pub fn identity(size: usize) -> Self {
        Self { table: (0..size).collect() }
    }

    pub fn apply(&self, x: usize) -> usize {
        self.table[x]
    }

    /// `other ∘ self`: apply `self`, then `other`.
    pub fn then(&self, other: &RelationMap) -> RelationMap {
        RelationMap { table: self.table.iter().map(|&y| other.table[y]).collect() }
    }
}

pub fn build_fg(n: usize) -> Result<(RelationMap, RelationMap)> {
    if n < 2 {
        return Err(Error::Theory(format!("need at least 2 non-sink entities, got {n}")));
    }
    let mut f = vec![0; n + 1];
    let mut g = vec![0; n + 1];
    for i in 0..n {
        f[i + 1] = (i + 1) % n + 1;
        g[i + 1] = if i == 0 { 0 } else { i + 1 };
    }
    Ok((RelationMap { table: f }, RelationMap { table: g }))
}

/// All words of length `k` with no two adjacent `g`s, in lexicographic order (f < g).
pub fn ggfree_words(k: usize) -> Vec<Vec<Letter>> {
    fn extend(word: &mut Vec<Letter>, k: usize, out: &mut Vec<Vec<Letter>>) {
        if word.len() == k {
            out.push(word.clone());
            return;
        }
        word.push(Letter::F);
        extend(word, k, out);
        word.pop();
        if word.last() != Some(&Letter::G) {
            word.push(Letter::G);
            extend(word, k, out);
            word.pop();
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(k), k, &mut out);
    out
}

pub fn word_string(w: &[Letter]) -> String {
    w.iter().map(|l| if *l == Letter::F { 'f' } else { 'g' }).collect()
}

pub fn compose(f: &RelationMap, g: &RelationMap, word: &[Letter]) -> RelationMap {
    word.iter().fold(RelationMap::identity(f.table.len()), |acc, l| match l {
        Letter::F => acc.then(f),
        Letter::G => acc.then(g),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enumeration {
    pub words: Vec<Vec<Letter>>,
    pub functions: BTreeSet<RelationMap>,
}

impl Enumeration {
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn distinct_count(&self) -> usize {
        self.functions.len()
    }
}

pub fn enumerate_ggfree_compositions(f: &RelationMap, g: &RelationMap, k: usize) -> Result<Enumeration> {
    if k == 0 {
        return Err(Error::Theory("word length must be at least 1".into()));
    }
    let words = ggfree_words(k);
    let functions = words.iter().map(|w| compose(f, g, w)).collect();
    Ok(Enumeration { words, functions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FibCount {
    /// F_{k+2} with F_1 = F_2 = 1.
    pub fib: u128,
    /// (3/2)^k
    pub lower_bound: f64,
}

pub fn fib_count(k: usize) -> FibCount {
    let (mut a, mut b) = (1u128, 1u128);
    for _ in 0..k {
        (a, b) = (b, a + b);
    }
    FibCount { fib: b, lower_bound: 1.5f64.powi(k as i32) }
}

/// Whether the composition of `word` sends `x_i` to the sink, predicted
/// from the word alone: some `g` must be applied while the value is `x_0`,
/// which happens after exactly m applications of f with m ≡ n − i (mod n).
pub fn predicts_sink(word: &[Letter], n: usize, i: usize) -> bool {
    let target = (n - i % n) % n;
    let mut fs = 0usize;
    for l in word {
        match l {
            Letter::F => fs += 1,
            Letter::G if fs % n == target => return true,
            Letter::G => {}
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub k: u64,
    /// Bits of numeric precision.
    pub p: u64,
    pub d: u64,
    pub h: u64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.d == 0 || self.h == 0 {
            return Err(Error::Theory("bound inputs must be positive".into()));
        }
        Ok(())
    }
}

/// k / (8·p·d·H), exactly.
pub fn depth_lower_bound(b: BoundInputs) -> Result<Ratio<u128>> {
    b.validate()?;
    Ok(Ratio::new(b.k as u128, 8 * b.p as u128 * b.d as u128 * b.h as u128))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub n: usize,
    pub k: usize,
    pub word_count: usize,
    pub distinct_count: usize,
    pub fib: u128,
    pub fib_lower_bound: f64,
    pub sink_rule_holds: bool,
    pub bound: String,
    pub bound_value: f64,
}

/// One row per k in `ks` for universe size `n`; `(p, d, h)` feed the bound.
pub fn oracle_table(n: usize, ks: &[usize], p: u64, d: u64, h: u64) -> Result<Vec<OracleRow>> {
    let (f, g) = build_fg(n)?;
    ks.iter()
        .map(|&k| {
            let e = enumerate_ggfree_compositions(&f, &g, k)?;
            let sink_rule_holds = e.words.iter().all(|w| {
                let c = compose(&f, &g, w);
                (0..n).all(|i| (c.apply(i + 1) == 0) == predicts_sink(w, n, i))
            });
            let fc = fib_count(k);
            let bound = depth_lower_bound(BoundInputs { k: k as u64, p, d, h })?;
            Ok(OracleRow {
                n,
                k,
                word_count: e.word_count(),
                distinct_count: e.distinct_count(),
                fib: fc.fib,
                fib_lower_bound: fc.lower_bound,
                sink_rule_holds,
                bound: bound.to_string(),
                bound_value: *bound.numer() as f64 / *bound.denom() as f64,
            })
        })
        .collect()
}

pub fn oracle_csv(rows: &[OracleRow]) -> String {
    let mut s = String::from("n,k,word_count,distinct_count,fib,fib_lower_bound,sink_rule_holds,bound,bound_value\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{},{:e}",
            r.n, r.k, r.word_count, r.distinct_count, r.fib, r.fib_lower_bound, r.sink_rule_holds, r.bound, r.bound_value
        );
    }
    s
}
