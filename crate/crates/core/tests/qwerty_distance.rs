//! Keyboard-conditioned edit distance against an independent shortest-path
//! oracle over the space of edit operations.

use ksda::keyboard::KeyboardLayout;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::oracles::{oracle, random_word};

#[test]
fn matches_shortest_path_oracle_on_random_pairs() {
    let kb = KeyboardLayout::qwerty();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let all: Vec<char> = kb.chars();
    for _ in 0..1000 {
        // A small per-pair alphabet makes repeated characters (and hence
        // transpositions) common.
        let pool: Vec<char> = (0..4).map(|_| all[rng.gen_range(0..all.len())]).collect();
        let a = random_word(&mut rng, &pool, 4);
        let b = random_word(&mut rng, &pool, 4);
        let dp = kb.edit_distance(&a, &b).unwrap_or_else(|e| panic!("{a:?} {b:?}: {e}"));
        let want = oracle(&kb, a.trim_end(), b.trim_end(), false);
        assert!((dp - want).abs() < 1e-9, "{a:?} vs {b:?}: dp {dp} oracle {want}");
    }
}

#[test]
fn bounded_by_unit_cost_damerau_levenshtein() {
    let kb = KeyboardLayout::qwerty();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pool: Vec<char> = "qpahlo".chars().collect();
    for _ in 0..200 {
        let a = random_word(&mut rng, &pool, 4);
        let b = random_word(&mut rng, &pool, 4);
        let unit = oracle(&kb, &a, &b, true);
        assert!(kb.edit_distance(&a, &b).unwrap() <= unit + 1e-12, "{a:?} {b:?}");
    }
}

proptest! {
    #[test]
    fn symmetric_and_zero_iff_equal(a in "[a-z ]{0,6}", b in "[a-z ]{0,6}") {
        let kb = KeyboardLayout::qwerty();
        let ab = kb.edit_distance(&a, &b).unwrap();
        let ba = kb.edit_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        let same = a.trim_end() == b.trim_end();
        prop_assert_eq!(ab == 0.0, same);
    }

    #[test]
    fn triangle_inequality(a in "[a-e ]{0,6}", b in "[a-e ]{0,6}", c in "[a-e ]{0,6}") {
        let kb = KeyboardLayout::qwerty();
        let ac = kb.edit_distance(&a, &c).unwrap();
        let ab = kb.edit_distance(&a, &b).unwrap();
        let bc = kb.edit_distance(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9, "{} > {} + {}", ac, ab, bc);
    }
}
