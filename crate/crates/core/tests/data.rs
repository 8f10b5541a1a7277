use std::collections::{BTreeMap, HashSet};

use khop::corpus::{parse_question, profile_tokens, render_profile, render_question, RenderedInstance, Vocab};
use khop::graph::{
    answer_query, build_split, build_staged_split, enumerate_queries, filter_overlap, sample_aux_queries,
    sample_entity_graph, EntityGraph, EntityId, GraphSpec, Query, RelationConstraint, RelationId,
};
use proptest::prelude::*;

/// Walks the edge list directly, without going through `answer_query`.
fn naive_walk(g: &EntityGraph, source: EntityId, rels: &[RelationId]) -> Vec<EntityId> {
    let mut path = vec![source];
    for r in rels {
        let cur = *path.last().unwrap();
        let next = g.entities().find(|&t| g.edge(cur, *r) == Some(t)).unwrap();
        path.push(next);
    }
    path
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn graph_invariants_hold(seed in any::<u64>(), layer in 1usize..8, rels in 1usize..6) {
        let g = sample_entity_graph(layer * 5, rels, 5, seed).unwrap();
        prop_assert!(g.check_invariants().is_ok());
        prop_assert_eq!(g.layer_size(), layer);
        for e in g.entities() {
            let l = g.layer_of(e);
            for r in g.relations() {
                match g.edge(e, r) {
                    Some(t) => prop_assert_eq!(g.layer_of(t), l + 1),
                    None => {
                        prop_assert!(g.is_top(e));
                        prop_assert!(g.filler_edge(e, r).is_some());
                    }
                }
            }
        }
        let names: HashSet<&String> = g.entity_names().iter().chain(g.filler_names()).collect();
        prop_assert_eq!(names.len(), g.entity_names().len() + g.filler_names().len());
        let again = EntityGraph::from_text(&g.to_text()).unwrap();
        prop_assert_eq!(again.to_text(), g.to_text());
    }

    #[test]
    fn traversal_matches_naive_walk(seed in any::<u64>(), k in 1usize..5, picks in proptest::collection::vec(0u16..4, 4)) {
        let g = sample_entity_graph(40, 4, 5, seed).unwrap();
        let rels: Vec<RelationId> = picks[..k].iter().map(|&r| RelationId(r)).collect();
        for source in g.layer(0) {
            let (bridges, answer) = answer_query(&g, source, &rels).unwrap();
            let path = naive_walk(&g, source, &rels);
            prop_assert_eq!(&bridges[..], &path[1..k]);
            prop_assert_eq!(answer, path[k]);
        }
    }

    #[test]
    fn rendered_questions_parse_back(seed in any::<u64>(), k in 1usize..5) {
        let g = sample_entity_graph(50, 3, 5, seed).unwrap();
        let vocab = Vocab::build(&g);
        for q in enumerate_queries(&g, k, None).unwrap().iter().step_by(7) {
            let text = render_question(&g, q);
            let (source, rels) = parse_question(&g, &text).unwrap();
            prop_assert_eq!(source, q.source);
            prop_assert_eq!(&rels, &q.relations);
            prop_assert_eq!(vocab.decode(&vocab.encode(&text).unwrap()).unwrap(), text);
            let inst = RenderedInstance::question(&g, &vocab, q).unwrap();
            prop_assert_eq!(inst.tokens[inst.entity_position], vocab.entity_token(q.source));
            for (i, &p) in inst.hop_token_positions.iter().enumerate() {
                prop_assert_eq!(inst.tokens[p], vocab.relation_token(q.relations[i]));
            }
            prop_assert_eq!(inst.tokens[inst.answer_position], vocab.slot_id());
        }
    }
}

#[test]
fn reference_query_counts() {
    let small = GraphSpec::small(0).build().unwrap();
    let large = GraphSpec::large(0).build().unwrap();
    assert_eq!(small.layer_size(), 50);
    assert_eq!(large.layer_size(), 100);
    assert_eq!(enumerate_queries(&small, 2, None).unwrap().len(), 5000);
    assert_eq!(enumerate_queries(&large, 2, None).unwrap().len(), 40_000);
    let c = RelationConstraint::new(vec![1, 1, 20, 20]);
    let constrained = enumerate_queries(&large, 4, Some(&c)).unwrap();
    assert_eq!(constrained.len(), 40_000);
    let first: HashSet<RelationId> = constrained.iter().map(|q| q.relations[0]).collect();
    assert_eq!(first.len(), 1);
    let keys: HashSet<_> = constrained.iter().map(Query::key).collect();
    assert_eq!(keys.len(), constrained.len());
}

#[test]
fn constrained_count_is_product_of_sizes() {
    let g = sample_entity_graph(30, 4, 5, 9).unwrap();
    for counts in [vec![1, 2, 3], vec![4, 4, 1], vec![2, 3, 4]] {
        let c = RelationConstraint::new(counts.clone());
        let n = enumerate_queries(&g, 3, Some(&c)).unwrap().len();
        assert_eq!(n, counts.iter().product::<usize>() * g.layer_size());
    }
}

#[test]
fn chain_graph_has_one_four_hop_query() {
    let g = sample_entity_graph(5, 1, 5, 1).unwrap();
    let qs = enumerate_queries(&g, 4, None).unwrap();
    assert_eq!(qs.len(), 1);
    assert!(g.is_top(qs[0].answer));
}

#[test]
fn training_file_sizes() {
    let small = GraphSpec::small(0).build().unwrap();
    let qs = enumerate_queries(&small, 2, None).unwrap();
    let split = build_split(&small, &qs, 4000, 1, 0, 0).unwrap();
    assert_eq!(split.train_queries.len(), 4000);
    assert_eq!(split.num_train_records(), 4250);
    assert!(build_split(&small, &qs, 4000, 2, 0, 0).is_err());

    // 4-hop large at x100 only needs counting, not materialized queries.
    let large = GraphSpec::large(0).build().unwrap();
    let four_hop = 20usize.pow(4) * large.layer_size();
    assert!(100 * 20_000 <= four_hop);
    assert_eq!(100 * 20_000 + large.num_entities(), 2_000_500);
}

#[test]
fn splits_are_disjoint_and_deterministic() {
    let g = GraphSpec::tiny(3).build().unwrap();
    let qs = enumerate_queries(&g, 2, None).unwrap();
    let a = build_split(&g, &qs, 400, 1, 100, 11).unwrap();
    let b = build_split(&g, &qs, 400, 1, 100, 11).unwrap();
    assert_eq!(a, b);
    let train: HashSet<_> = a.train_queries.iter().map(Query::key).collect();
    assert!(a.test_queries.iter().all(|q| !train.contains(&q.key())));
}

/// Quadratic scan: compare every contiguous sub-chain with every auxiliary query.
fn brute_force_overlap(q: &Query, aux: &[Query]) -> bool {
    let subjects = q.chain_subjects();
    aux.iter().any(|a| {
        let m = a.k();
        m < q.k()
            && (0..=q.k() - m)
                .any(|s| subjects[s] == a.source && q.relations[s..s + m] == a.relations[..])
    })
}

#[test]
fn overlap_filter_matches_brute_force() {
    let g = GraphSpec::small(5).build().unwrap();
    let sizes = BTreeMap::from([(2, 1500), (3, 4000)]);
    let aux = sample_aux_queries(&g, &sizes, 2).unwrap();
    let four = enumerate_queries(&g, 4, Some(&RelationConstraint::new(vec![3, 3, 3, 3]))).unwrap();
    let kept = filter_overlap(&four, &aux);
    let expected: Vec<&Query> = four.iter().filter(|q| !brute_force_overlap(q, &aux)).collect();
    assert_eq!(kept.len(), expected.len());
    assert!(kept.len() < four.len());
    assert_eq!(filter_overlap(&four, &[]).len(), four.len());

    let staged = build_staged_split(&g, &four, aux.clone(), 200, 1, 100, 4).unwrap();
    assert!(staged.test_queries.iter().all(|q| !brute_force_overlap(q, &aux)));
    assert_eq!(staged.stage_tags.as_ref().unwrap()[&4], 200);
}

#[test]
fn profile_sentences() {
    let g = GraphSpec::tiny(2).build().unwrap();
    let vocab = Vocab::build(&g);
    let e = g.layer(0)[0];
    let text = render_profile(&g, e);
    assert_eq!(text.matches(" . ").count() + 1, g.num_relations());
    let first = g.edge(e, RelationId(0)).unwrap();
    assert!(text.starts_with(&format!(
        "{} 's {} is {} .",
        g.entity_name(e),
        g.relation_name(RelationId(0)),
        g.entity_name(first)
    )));
    let top = g.layer(4)[0];
    let fillers: HashSet<&str> = g.filler_names().iter().map(String::as_str).collect();
    let top_text = render_profile(&g, top);
    let objects: Vec<&str> =
        top_text.trim_end_matches(" .").split(" . ").map(|s| s.rsplit(' ').next().unwrap()).collect();
    assert_eq!(objects.len(), g.num_relations());
    assert!(objects.iter().all(|o| fillers.contains(o)));
    let toks = profile_tokens(&g, &vocab, e).unwrap();
    assert_eq!(toks[0], vocab.bos_id());
    assert_eq!(vocab.encode(g.entity_name(e)).unwrap().len(), 1);
}

#[test]
fn vocab_is_stable() {
    let a = Vocab::build(&GraphSpec::small(4).build().unwrap());
    let b = Vocab::build(&GraphSpec::small(4).build().unwrap());
    assert_eq!(a.checksum(), b.checksum());
    let g = GraphSpec::small(4).build().unwrap();
    for e in g.entities() {
        assert_eq!(a.token_entity(a.entity_token(e)), Some(e));
    }
}
