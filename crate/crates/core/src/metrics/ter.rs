//! Translation edit rate with greedy block shifts.

use crate::error::{Error, Result};

/// Longest block considered for a shift.
pub const MAX_SHIFT_LEN: usize = 10;

pub fn word_levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Moves `words[start..start + len]` so that it begins at `dest` in the
/// sequence with the block removed.
pub fn apply_shift<S: Clone>(words: &[S], start: usize, len: usize, dest: usize) -> Vec<S> {
    let block: Vec<S> = words[start..start + len].to_vec();
    let mut rest: Vec<S> = words[..start].iter().chain(&words[start + len..]).cloned().collect();
    let tail = rest.split_off(dest);
    rest.extend(block);
    rest.extend(tail);
    rest
}

fn occurs_in<S: PartialEq>(block: &[S], reference: &[S]) -> bool {
    reference.windows(block.len()).any(|w| w == block)
}

/// Hypotheses up to this many words get an exact minimum over shift
/// sequences; longer ones use the greedy search alone.
pub const EXACT_MAX_WORDS: usize = 6;

/// Admissible single shifts of `cur`: blocks of at most [`MAX_SHIFT_LEN`]
/// words that also occur somewhere in the reference.
fn shifts<'a, S: PartialEq + Clone>(cur: &'a [S], reference: &'a [S]) -> impl Iterator<Item = Vec<S>> + 'a {
    (0..cur.len()).flat_map(move |start| {
        (1..=MAX_SHIFT_LEN.min(cur.len() - start))
            .take_while(move |&len| occurs_in(&cur[start..start + len], reference))
            .flat_map(move |len| {
                (0..=cur.len() - len).filter(move |&d| d != start).map(move |d| apply_shift(cur, start, len, d))
            })
    })
}

/// Classic greedy loop: apply the shift that most reduces the word edit
/// distance (first found on ties) until none helps.
pub fn greedy_ter_counts<S: PartialEq + Clone>(hyp: &[S], reference: &[S]) -> (usize, usize) {
    let mut cur = hyp.to_vec();
    let mut dist = word_levenshtein(&cur, reference);
    let mut count = 0;
    loop {
        let mut best: Option<(usize, Vec<S>)> = None;
        for moved in shifts(&cur, reference) {
            let d = word_levenshtein(&moved, reference);
            if d < best.as_ref().map_or(dist, |b| b.0) {
                best = Some((d, moved));
            }
        }
        match best {
            Some((d, moved)) => {
                cur = moved;
                dist = d;
                count += 1;
            }
            None => return (count, dist),
        }
    }
}

/// Edit distance can never drop below this, whatever the word order.
fn order_free_bound<S: PartialEq>(hyp: &[S], reference: &[S]) -> usize {
    let mut used = vec![false; reference.len()];
    let mut common = 0;
    for h in hyp {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *h) {
            used[j] = true;
            common += 1;
        }
    }
    hyp.len().max(reference.len()) - common
}

fn exact_search<S: PartialEq + Clone>(
    cur: &[S],
    reference: &[S],
    depth: usize,
    floor: usize,
    best: &mut (usize, usize),
) {
    let d = word_levenshtein(cur, reference);
    if depth + d < best.0 + best.1 {
        *best = (depth, d);
    }
    // Another shift costs one and edits cannot go below `floor`.
    if depth + 1 + floor >= best.0 + best.1 {
        return;
    }
    for moved in shifts(cur, reference) {
        exact_search(&moved, reference, depth + 1, floor, best);
    }
}

/// `(shifts, edits)` for the hypothesis. The greedy result is an upper bound;
/// short hypotheses are then searched exhaustively over admissible shift
/// sequences, which also finds orderings that need a non-improving first move.
pub fn ter_counts<S: PartialEq + Clone>(hyp: &[S], reference: &[S]) -> (usize, usize) {
    let mut best = greedy_ter_counts(hyp, reference);
    if hyp.len() <= EXACT_MAX_WORDS {
        let floor = order_free_bound(hyp, reference);
        exact_search(hyp, reference, 0, floor, &mut best);
    }
    best
}

/// (shifts + edits) / |reference|.
pub fn ter<S: PartialEq + Clone>(hyp: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("TER needs a non-empty reference".into()));
    }
    let (s, e) = ter_counts(hyp, reference);
    Ok((s + e) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(ter(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((ter(&["a", "c", "b"], &["a", "b", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty: [&str; 0] = [];
        assert_eq!(ter(&empty, &["a", "b", "c", "d"]).unwrap(), 1.0);
        assert!(ter(&["a"], &empty).is_err());
    }

    #[test]
    fn shift_helper() {
        assert_eq!(apply_shift(&[1, 2, 3, 4], 0, 2, 2), vec![3, 4, 1, 2]);
        assert_eq!(apply_shift(&[1, 2, 3, 4], 3, 1, 0), vec![4, 1, 2, 3]);
    }

    #[test]
    fn block_shift_counts_once() {
        // Moving "d e" to the front is one shift.
        let (s, e) = ter_counts(&["a", "b", "c", "d", "e"], &["d", "e", "a", "b", "c"]);
        assert_eq!((s, e), (1, 0));
    }
}
