//! Brute-force references for the edit-based metrics.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use ksda::keyboard::KeyboardLayout;
use ksda::metrics::ter::{apply_shift, word_levenshtein};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

fn occurs(block: &[u8], r: &[u8]) -> bool {
    r.windows(block.len()).any(|w| w == block)
}

/// Breadth-first search over every arrangement reachable by shifting blocks
/// that occur in the reference; returns min(shifts + edits).
pub fn exhaustive(hyp: &[u8], r: &[u8]) -> usize {
    let mut depth: HashMap<Vec<u8>, usize> = HashMap::from([(hyp.to_vec(), 0)]);
    let mut queue = VecDeque::from([hyp.to_vec()]);
    let mut best = usize::MAX;
    while let Some(p) = queue.pop_front() {
        let d = depth[&p];
        best = best.min(d + word_levenshtein(&p, r));
        if d + 1 >= best {
            continue;
        }
        let n = p.len();
        for s in 0..n {
            for len in 1..=n - s {
                if !occurs(&p[s..s + len], r) {
                    break;
                }
                for dest in 0..=n - len {
                    let q = apply_shift(&p, s, len, dest);
                    if !depth.contains_key(&q) {
                        depth.insert(q.clone(), d + 1);
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    best
}

#[derive(PartialEq)]
struct State(f64, Vec<char>);
impl Eq for State {}
impl PartialOrd for State {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for State {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| self.1.cmp(&o.1))
    }
}

/// Dijkstra over strings: every single insertion, deletion, substitution or
/// adjacent swap is an edge. Only characters from either input are used and
/// lengths are capped one above the longer input.
pub fn oracle(kb: &KeyboardLayout, a: &str, b: &str, unit_sub: bool) -> f64 {
    let src: Vec<char> = a.chars().collect();
    let dst: Vec<char> = b.chars().collect();
    let mut alphabet: Vec<char> = src.iter().chain(&dst).copied().collect();
    alphabet.sort();
    alphabet.dedup();
    let cap = src.len().max(dst.len()) + 1;
    let sub = |x: char, y: char| if unit_sub { 1.0 } else { kb.substitution_cost(x, y).unwrap() };
    let mut best: HashMap<Vec<char>, f64> = HashMap::new();
    let mut heap = BinaryHeap::new();
    best.insert(src.clone(), 0.0);
    heap.push(State(0.0, src));
    while let Some(State(d, s)) = heap.pop() {
        if s == dst {
            return d;
        }
        if d > best[&s] {
            continue;
        }
        let mut next: Vec<(Vec<char>, f64)> = Vec::new();
        for i in 0..s.len() {
            let mut t = s.clone();
            t.remove(i);
            next.push((t, 1.0));
            for &c in &alphabet {
                if c != s[i] {
                    let mut t = s.clone();
                    t[i] = c;
                    next.push((t, sub(s[i], c)));
                }
            }
            if i + 1 < s.len() && s[i] != s[i + 1] {
                let mut t = s.clone();
                t.swap(i, i + 1);
                next.push((t, 1.0));
            }
        }
        if s.len() < cap {
            for i in 0..=s.len() {
                for &c in &alphabet {
                    let mut t = s.clone();
                    t.insert(i, c);
                    next.push((t, 1.0));
                }
            }
        }
        for (t, w) in next {
            let nd = d + w;
            if best.get(&t).map_or(true, |&o| nd < o - 1e-15) {
                best.insert(t.clone(), nd);
                heap.push(State(nd, t));
            }
        }
    }
    unreachable!("target always reachable")
}

pub fn random_word(rng: &mut ChaCha8Rng, pool: &[char], max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

