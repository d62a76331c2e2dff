use ksda::metrics::ter::{greedy_ter_counts, ter, ter_counts, word_levenshtein};

mod common;

use common::oracles::{all_sequences, exhaustive};

#[test]
fn shift_search_matches_exhaustive_oracle() {
    let seqs = all_sequences(5, 3);
    let mut mismatches = Vec::new();
    let mut pairs = 0;
    for hyp in &seqs {
        for r in seqs.iter().filter(|r| !r.is_empty()) {
            pairs += 1;
            let (s, e) = ter_counts(hyp, r);
            let want = exhaustive(hyp, r);
            if s + e != want {
                mismatches.push((hyp.clone(), r.clone(), s + e, want));
            }
        }
    }
    assert_eq!(pairs, 364 * 363);
    assert!(mismatches.is_empty(), "{} mismatches: {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]);
}

#[test]
fn plain_greedy_can_be_suboptimal() {
    // The first-found best shift leads to a dead end; two shifts suffice.
    let (h, r) = ([0u8, 0, 1, 2], [2u8, 1, 0, 0]);
    let (gs, ge) = greedy_ter_counts(&h, &r);
    assert_eq!(gs + ge, 3);
    assert_eq!(ter_counts(&h, &r), (2, 0));
    // Reaching the optimum here needs a first shift that does not lower the
    // edit distance.
    let (h, r) = ([0u8, 0, 1, 2, 1], [1u8, 1, 0, 2, 0]);
    assert_eq!(word_levenshtein(&h, &r), 4);
    assert_eq!(ter_counts(&h, &r), (2, 0));
}

#[test]
fn never_worse_than_levenshtein() {
    let seqs = all_sequences(4, 3);
    for hyp in &seqs {
        for r in seqs.iter().filter(|r| !r.is_empty()) {
            let t = ter(hyp, r).unwrap();
            assert!(t <= word_levenshtein(hyp, r) as f64 / r.len() as f64 + 1e-12);
            assert_eq!(t == 0.0, hyp == r);
        }
    }
}

#[test]
fn long_hypotheses_fall_back_to_greedy() {
    let h: Vec<u32> = (0..12).rev().collect();
    let r: Vec<u32> = (0..12).collect();
    assert_eq!(ter_counts(&h, &r), greedy_ter_counts(&h, &r));
}
