// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed name namespaces for entities, filler objects and relations.
//!
//! Entity and filler names are generated from a small syllable grammar so
//! every name is a single capitalised word that never collides with a
//! template word or a relation name. The filler pool is disjoint from the
//! entity pool.

/// Relation names, in namespace order.
pub const RELATION_NAMESPACE: [&str; 20] = [
    "instructor",
    "teacher",
    "ruler",
    "advisor",
    "supervisor",
    "leader",
    "manager",
    "director",
    "patron",
    "mentor",
    "administrator",
    "coordinator",
    "tutor",
    "predecessor",
    "sponsor",
    "financier",
    "backer",
    "overseer",
    "employer",
    "boss",
];

pub const ENTITY_NAMESPACE_SIZE: usize = 600;
pub const FILLER_NAMESPACE_SIZE: usize = 100;

const ONSETS: [&str; 18] = [
    "B", "C", "D", "F", "G", "H", "J", "K", "L", "M", "N", "P", "R", "S", "T", "V", "W", "Z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const MIDDLES: [&str; 9] = ["b", "d", "l", "m", "n", "r", "s", "t", "v"];
const ENDS: [&str; 5] = ["a", "e", "i", "o", "y"];
const FINALS: [&str; 5] = ["", "n", "l", "s", "r"];

const GRAMMAR_SIZE: usize = ONSETS.len() * VOWELS.len() * MIDDLES.len() * ENDS.len() * FINALS.len();
// Coprime with GRAMMAR_SIZE, so i -> i * STRIDE mod GRAMMAR_SIZE is a permutation.
const STRIDE: usize = 7919;

fn grammar_name(mut i: usize) -> String {
    let f = i % FINALS.len();
    i /= FINALS.len();
    let e = i % ENDS.len();
    i /= ENDS.len();
    let m = i % MIDDLES.len();
    i /= MIDDLES.len();
    let v = i % VOWELS.len();
    i /= VOWELS.len();
    let o = i % ONSETS.len();
    format!("{}{}{}{}{}", ONSETS[o], VOWELS[v], MIDDLES[m], ENDS[e], FINALS[f])
}

fn nth_name(n: usize) -> String {
    grammar_name((n * STRIDE) % GRAMMAR_SIZE)
}

/// The entity namespace (600 names).
pub fn entity_namespace() -> Vec<String> {
    (0..ENTITY_NAMESPACE_SIZE).map(nth_name).collect()
}

/// The filler-object namespace (100 names), disjoint from the entity namespace.
pub fn filler_namespace() -> Vec<String> {
    (ENTITY_NAMESPACE_SIZE..ENTITY_NAMESPACE_SIZE + FILLER_NAMESPACE_SIZE)
        .map(nth_name)
        .collect()
}
