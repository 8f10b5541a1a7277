use std::collections::HashSet;

use khop::theory::{
    build_fg, depth_lower_bound, enumerate_ggfree_compositions, fib_count, ggfree_words, oracle_table, predicts_sink,
    word_string, BoundInputs, Letter,
};
use num_rational::Ratio;
use proptest::prelude::*;

/// Applies a word to element `x` (0 = sink, 1..=n = x_0..x_{n-1}) straight from
/// the definitions of f and g.
fn run_word(word: &str, n: usize, x: usize) -> usize {
    word.chars().fold(x, |v, c| match (c, v) {
        (_, 0) => 0,
        ('f', v) => v % n + 1,
        ('g', 1) => 0,
        ('g', v) => v,
        _ => unreachable!(),
    })
}

/// Every bit pattern of length k without "gg", as strings.
fn brute_words(k: usize) -> Vec<String> {
    (0u32..1 << k)
        .map(|bits| (0..k).map(|i| if bits >> (k - 1 - i) & 1 == 1 { 'g' } else { 'f' }).collect::<String>())
        .filter(|w| !w.contains("gg"))
        .collect()
}

#[test]
fn exhaustive_counts_up_to_ten() {
    for n in 2..=10 {
        let (f, g) = build_fg(n).unwrap();
        for k in 1..n {
            let e = enumerate_ggfree_compositions(&f, &g, k).unwrap();
            let words: Vec<String> = e.words.iter().map(|w| word_string(w)).collect();
            assert_eq!(words, brute_words(k), "n={n} k={k}");
            let fib = fib_count(k);
            assert_eq!(e.word_count() as u128, fib.fib);
            assert!(fib.fib as f64 >= fib.lower_bound);
            let tables: HashSet<Vec<usize>> =
                words.iter().map(|w| (0..=n).map(|x| run_word(w, n, x)).collect()).collect();
            assert_eq!(tables.len(), words.len(), "compositions collide at n={n} k={k}");
            assert_eq!(e.distinct_count(), words.len());
            for (w, word) in e.words.iter().zip(&words) {
                let c = khop::theory::compose(&f, &g, w);
                for x in 0..=n {
                    assert_eq!(c.apply(x), run_word(word, n, x));
                }
                for i in 0..n {
                    assert_eq!(predicts_sink(w, n, i), run_word(word, n, i + 1) == 0, "{word} x_{i}");
                }
            }
        }
    }
}

#[test]
fn fibonacci_values_and_growth() {
    let fib: Vec<u128> = (1..=6).map(|k| fib_count(k).fib).collect();
    assert_eq!(fib, vec![2, 3, 5, 8, 13, 21]);
    for k in 1..=30 {
        let c = fib_count(k);
        assert!(c.fib as f64 >= c.lower_bound, "k={k}");
        assert_eq!(c.fib, fib_count(k - 1).fib + if k >= 2 { fib_count(k - 2).fib } else { 1 });
    }
}

#[test]
fn word_lists_for_short_lengths() {
    let s = |k| ggfree_words(k).iter().map(|w| word_string(w)).collect::<Vec<_>>();
    assert_eq!(s(1), ["f", "g"]);
    assert_eq!(s(2), ["ff", "fg", "gf"]);
    assert_eq!(ggfree_words(3).len(), 5);
    assert!(ggfree_words(8).iter().all(|w| !w.windows(2).any(|p| p == [Letter::G, Letter::G])));
}

#[test]
fn f_is_a_cyclic_bijection() {
    for n in 2..12 {
        let (f, g) = build_fg(n).unwrap();
        let image: HashSet<usize> = (1..=n).map(|x| f.apply(x)).collect();
        assert_eq!(image.len(), n);
        assert!(!image.contains(&0));
        assert_eq!((f.apply(0), g.apply(0), g.apply(1)), (0, 0, 0));
        assert!((2..=n).all(|x| g.apply(x) == x));
    }
    assert!(build_fg(1).is_err());
}

#[test]
fn oracle_table_is_consistent() {
    let rows = oracle_table(7, &[1, 2, 3, 4, 5, 6], 32, 768, 12).unwrap();
    assert!(rows.iter().all(|r| r.sink_rule_holds && r.distinct_count == r.word_count));
    assert_eq!(rows[3].bound, "1/589824");
}

proptest! {
    #[test]
    fn bound_is_homogeneous(k in 1u64..100, p in 1u64..64, d in 1u64..4096, h in 1u64..64) {
        let b = depth_lower_bound(BoundInputs { k, p, d, h }).unwrap();
        let doubled = depth_lower_bound(BoundInputs { k, p, d: 2 * d, h }).unwrap();
        prop_assert_eq!(doubled * Ratio::from_integer(2), b);
        prop_assert_eq!(b, Ratio::new(k as u128, 8 * (p * d * h) as u128));
        let unit = depth_lower_bound(BoundInputs { k: 8 * p * d * h, p, d, h }).unwrap();
        prop_assert_eq!(unit, Ratio::from_integer(1));
    }
}
