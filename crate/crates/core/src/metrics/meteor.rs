//! Exact-match METEOR.

use std::collections::HashMap;

pub const ALPHA: f64 = 0.9;
pub const BETA: f64 = 3.0;
pub const GAMMA: f64 = 0.5;

/// Search budget for the chunk-minimising alignment before falling back to
/// the greedy left-to-right alignment.
const SEARCH_LIMIT: usize = 200_000;

/// Number of chunks in an alignment given as `(hyp_pos, ref_pos)` pairs.
fn chunks(mut pairs: Vec<(usize, usize)>) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    pairs.sort_unstable();
    1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
}

struct Search<'a> {
    /// For each hyp position, candidate reference positions with the same word.
    cands: Vec<Vec<usize>>,
    /// How many hyp occurrences of each word still have to be matched.
    need: HashMap<&'a str, usize>,
    /// Remaining hyp occurrences of each word after the current position.
    left: Vec<HashMap<&'a str, usize>>,
    words: &'a [&'a str],
    used: Vec<bool>,
    cur: Vec<(usize, usize)>,
    best: Option<(usize, Vec<(usize, usize)>)>,
    visited: usize,
}

impl Search<'_> {
    fn run(&mut self, i: usize) {
        self.visited += 1;
        if self.visited > SEARCH_LIMIT {
            return;
        }
        if i == self.words.len() {
            let c = chunks(self.cur.clone());
            if self.best.as_ref().map_or(true, |(b, _)| c < *b) {
                self.best = Some((c, self.cur.clone()));
            }
            return;
        }
        let w = self.words[i];
        let need = *self.need.get(w).unwrap_or(&0);
        if need > 0 {
            for ci in 0..self.cands[i].len() {
                let r = self.cands[i][ci];
                if self.used[r] {
                    continue;
                }
                self.used[r] = true;
                self.cur.push((i, r));
                *self.need.get_mut(w).unwrap() -= 1;
                self.run(i + 1);
                *self.need.get_mut(w).unwrap() += 1;
                self.cur.pop();
                self.used[r] = false;
            }
        }
        // Skipping is allowed only if enough later occurrences remain to
        // reach the maximum match count.
        let later = *self.left[i].get(w).unwrap_or(&0);
        if later >= need {
            self.run(i + 1);
        }
    }
}

/// Maximum-match, minimum-chunk unigram alignment.
pub fn align(hyp: &[&str], reference: &[&str]) -> Vec<(usize, usize)> {
    let mut rcount: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *rcount.entry(w).or_default() += 1;
    }
    let mut hcount: HashMap<&str, usize> = HashMap::new();
    for w in hyp {
        *hcount.entry(w).or_default() += 1;
    }
    let need: HashMap<&str, usize> =
        hcount.iter().map(|(w, &c)| (*w, c.min(*rcount.get(w).unwrap_or(&0)))).collect();
    let cands: Vec<Vec<usize>> =
        hyp.iter().map(|w| reference.iter().enumerate().filter(|(_, r)| *r == w).map(|(j, _)| j).collect()).collect();
    let mut left = vec![HashMap::new(); hyp.len()];
    let mut acc: HashMap<&str, usize> = HashMap::new();
    for i in (0..hyp.len()).rev() {
        left[i] = acc.clone();
        *acc.entry(hyp[i]).or_default() += 1;
    }
    let mut s = Search {
        cands,
        need,
        left,
        words: hyp,
        used: vec![false; reference.len()],
        cur: Vec::new(),
        best: None,
        visited: 0,
    };
    s.run(0);
    if s.visited <= SEARCH_LIMIT {
        if let Some((_, pairs)) = s.best {
            return pairs;
        }
    }
    // Greedy fallback: first unused occurrence.
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, w) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

pub fn meteor(hyp: &[&str], reference: &[&str]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let pairs = align(hyp, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks(pairs) as f64 / m as f64).powf(BETA);
    fmean * (1.0 - penalty)
}
