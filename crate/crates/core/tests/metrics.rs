use ksda::keyboard::KeyboardLayout;
use ksda::metrics::{
    bleu_n, dictionary_correct, evaluate, meteor, rouge1_recall, score_pairs, ter, word_char_pr, Lexicon,
    MetricsReport,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn w(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_examples() {
    assert_eq!(bleu_n(&w("a b c d e"), &w("a b c d e"), 4), 1.0);
    assert_eq!(bleu_n(&w("the the"), &w("the cat"), 1), 0.5);
    let short = bleu_n(&w("the cat"), &w("the cat sat"), 1);
    assert!((short - (1.0f64 - 1.5).exp()).abs() < 1e-12);
    assert_eq!(bleu_n(&[], &w("a"), 1), 0.0);
}

#[test]
fn rouge_examples() {
    assert_eq!(rouge1_recall(&w("a b"), &w("a b")).unwrap(), 1.0);
    assert!((rouge1_recall(&w("the cat"), &w("the black cat")).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(rouge1_recall(&w("x y"), &w("a b")).unwrap(), 0.0);
    assert!(rouge1_recall(&w("a"), &[]).is_err());
}

/// Brute force over all maximum-size alignments for the minimum chunk count.
fn meteor_oracle(h: &[&str], r: &[&str]) -> f64 {
    fn rec(i: usize, h: &[&str], r: &[&str], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == h.len() {
            let m = cur.len();
            let mut c = 0;
            for (k, &(a, b)) in cur.iter().enumerate() {
                if k == 0 || !(a == cur[k - 1].0 + 1 && b == cur[k - 1].1 + 1) {
                    c += 1;
                }
            }
            if m > best.0 || (m == best.0 && c < best.1) {
                *best = (m, c);
            }
            return;
        }
        rec(i + 1, h, r, used, cur, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == h[i] {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, h, r, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    rec(0, h, r, &mut vec![false; r.len()], &mut vec![], &mut best);
    let (m, c) = best;
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = p * rc / (0.9 * p + 0.1 * rc);
    f * (1.0 - 0.5 * (c as f64 / m as f64).powi(3))
}

#[test]
fn meteor_examples() {
    let five = w("one two three four five");
    assert!((meteor(&five, &five) - (1.0 - 0.5 / 125.0)).abs() < 1e-12);
    assert!((meteor(&five, &five) - 0.996).abs() < 1e-12);
    assert_eq!(meteor(&w("hi"), &w("hi")), 0.5);
    assert_eq!(meteor(&w("a b"), &w("c d")), 0.0);
    assert_eq!(meteor(&[], &w("a")), 0.0);
}

#[test]
fn meteor_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab = ["a", "b", "c", "d"];
    for _ in 0..2000 {
        let h: Vec<&str> = (0..rng.gen_range(0..7)).map(|_| vocab[rng.gen_range(0..4)]).collect();
        let r: Vec<&str> = (0..rng.gen_range(1..7)).map(|_| vocab[rng.gen_range(0..4)]).collect();
        let got = meteor(&h, &r);
        let want = meteor_oracle(&h, &r);
        assert!((got - want).abs() < 1e-12, "{h:?} {r:?}: {got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn ter_examples() {
    assert_eq!(ter(&w("a b c"), &w("a b c")).unwrap(), 0.0);
    assert!((ter(&w("a c b"), &w("a b c")).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(ter::<&str>(&[], &w("a b c d")).unwrap(), 1.0);
    assert!(ter(&w("a"), &[]).is_err());
}

#[test]
fn precision_recall_examples() {
    let pr = word_char_pr("a b", "a b").unwrap();
    assert_eq!((pr.word_precision, pr.word_recall, pr.char_precision, pr.char_recall), (1.0, 1.0, 1.0, 1.0));
    let pr = word_char_pr("a b", "a c").unwrap();
    assert_eq!((pr.word_precision, pr.word_recall), (0.5, 0.5));
    let pr = word_char_pr("aa", "a").unwrap();
    assert_eq!((pr.char_precision, pr.char_recall), (0.5, 1.0));
    assert!(word_char_pr("a", "").is_err());
}

#[test]
fn keyboard_example_from_text() {
    // A neighbouring-key typo is cheaper than a distant one.
    let kb = KeyboardLayout::qwerty();
    assert!(kb.edit_distance("hellp", "hello").unwrap() < kb.edit_distance("hellv", "hello").unwrap());
}

#[test]
fn corrector_examples() {
    let kb = KeyboardLayout::qwerty();
    let lex = Lexicon::from_words([("hello", 3), ("help", 3)]);
    let to_hello = kb.edit_distance("hellp", "hello").unwrap();
    let to_help = kb.edit_distance("hellp", "help").unwrap();
    assert!(to_hello < to_help && to_hello <= 2.0);
    assert_eq!(dictionary_correct("hellp there", &lex, &kb, 2.0), "hello there");
}

#[test]
fn identical_predictions_score_perfectly() {
    let kb = KeyboardLayout::qwerty();
    let pairs: Vec<(String, String)> =
        ["the quick fox", "a dog ran", "hello"].iter().map(|s| (s.to_string(), s.to_string())).collect();
    let r = score_pairs(&pairs, &kb).unwrap();
    assert_eq!((r.bleu1, r.ter, r.qwerty_d), (1.0, 0.0, 0.0));
    assert_eq!(MetricsReport::header(), "Bleu-1 ↑ | Bleu-4 ↑ | METEOR ↑ | ROUGE ↑ | TER ↓ | Qwerty-D ↓");
}

#[test]
fn correction_never_lowers_word_precision_on_typo_corpus() {
    let kb = KeyboardLayout::qwerty();
    let words = [
        "market", "shares", "bank", "rates", "price", "oil", "trade", "growth", "talks", "plan", "vote", "court",
        "storm", "team", "wins", "city", "police", "school", "health", "energy",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let refs: Vec<String> = (0..300)
        .map(|_| (0..rng.gen_range(2..6)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    let lex = Lexicon::from_sentences(refs.iter().map(String::as_str));
    let pairs: Vec<(String, String)> = refs
        .iter()
        .map(|r| {
            let mut chars: Vec<char> = r.chars().collect();
            let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i] != ' ').collect();
            let i = letters[rng.gen_range(0..letters.len())];
            let orig = chars[i];
            while chars[i] == orig {
                chars[i] = (b'a' + rng.gen_range(0..26u8)) as char;
            }
            (chars.into_iter().collect(), r.clone())
        })
        .collect();
    let ev = evaluate(&pairs, &kb, Some(&lex)).unwrap();
    let corrected = ev.corrected.unwrap();
    println!("word precision raw {:.4} corrected {:.4}", ev.raw.word_precision, corrected.word_precision);
    assert!(corrected.word_precision >= ev.raw.word_precision);
    assert!(corrected.word_precision > ev.raw.word_precision);
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "bc", "def", "gh", "ij"]), 1..7).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn case_and_trailing_whitespace_invariance(h in sentence(), r in sentence()) {
        let kb = KeyboardLayout::qwerty();
        let a = score_pairs(&[(h.clone(), r.clone())], &kb).unwrap();
        let b = score_pairs(&[(format!("{}  ", h.to_uppercase()), format!("{} ", r.to_uppercase()))], &kb).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn zero_ter_iff_equal_iff_zero_keyboard_distance(h in sentence(), r in sentence()) {
        let kb = KeyboardLayout::qwerty();
        let t = ter(&w(&h), &w(&r)).unwrap();
        let q = kb.edit_distance(&h, &r).unwrap();
        prop_assert_eq!(t == 0.0, h == r);
        prop_assert_eq!(q == 0.0, h == r);
    }

    #[test]
    fn meteor_bounds(h in sentence(), r in sentence()) {
        let (hw, rw) = (w(&h), w(&r));
        let m = meteor(&hw, &rw);
        prop_assert!((0.0..=1.0).contains(&m));
        let any_match = hw.iter().any(|x| rw.contains(x));
        prop_assert_eq!(m == 0.0, !any_match);
    }

    #[test]
    fn fixing_a_token_never_lowers_corpus_bleu1(
        refs in prop::collection::vec(sentence(), 1..5),
        seed in any::<u64>(),
    ) {
        let kb = KeyboardLayout::qwerty();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Corrupt a few tokens, then repair one of them.
        let mut hyps: Vec<Vec<String>> = refs.iter().map(|r| w(r).iter().map(|s| s.to_string()).collect()).collect();
        let mut broken = Vec::new();
        for (si, h) in hyps.iter_mut().enumerate() {
            for (ti, tok) in h.iter_mut().enumerate() {
                if rng.gen_bool(0.4) {
                    *tok = "zz".into();
                    broken.push((si, ti));
                }
            }
        }
        prop_assume!(!broken.is_empty());
        let join = |hs: &Vec<Vec<String>>| -> Vec<(String, String)> {
            hs.iter().zip(&refs).map(|(h, r)| (h.join(" "), r.clone())).collect()
        };
        let before = score_pairs(&join(&hyps), &kb).unwrap().bleu1;
        let (si, ti) = broken[rng.gen_range(0..broken.len())];
        hyps[si][ti] = w(&refs[si])[ti].to_string();
        let after = score_pairs(&join(&hyps), &kb).unwrap().bleu1;
        prop_assert!(after >= before - 1e-12, "{before} -> {after}");
    }

    #[test]
    fn shifts_only_help(h in sentence(), r in sentence()) {
        let (hw, rw) = (w(&h), w(&r));
        let lev = ksda::metrics::ter::word_levenshtein(&hw, &rw) as f64 / rw.len() as f64;
        prop_assert!(ter(&hw, &rw).unwrap() <= lev + 1e-12);
    }
}
