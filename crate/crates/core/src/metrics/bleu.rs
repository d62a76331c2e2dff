//! BLEU with clipped n-gram precision and brevity penalty.

use std::collections::HashMap;

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one order.
pub fn clipped_counts(hyp: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Accumulated statistics for corpus-level BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matched: [usize; 4],
    pub total: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[&str], reference: &[&str]) {
        for n in 1..=4 {
            let (m, t) = clipped_counts(hyp, reference, n);
            self.matched[n - 1] += m;
            self.total[n - 1] += t;
        }
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
    }

    /// Geometric mean of orders `1..=n` times the brevity penalty. Zero when
    /// the hypothesis is empty or any order has no match.
    pub fn score(&self, n: usize) -> f64 {
        assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            if self.matched[k] == 0 || self.total[k] == 0 {
                return 0.0;
            }
            log_sum += (self.matched[k] as f64 / self.total[k] as f64).ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * (log_sum / n as f64).exp()
    }
}

/// Sentence-level BLEU-n.
pub fn bleu_n(hyp: &[&str], reference: &[&str], n: usize) -> f64 {
    let mut s = BleuStats::default();
    s.add(hyp, reference);
    s.score(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_one() {
        let s = ["the", "cat", "sat", "on", "mat"];
        assert_eq!(bleu_n(&s, &s, 1), 1.0);
        assert!((bleu_n(&s, &s, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        assert_eq!(bleu_n(&["the", "the"], &["the", "cat"], 1), 0.5);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let b = bleu_n(&["the", "cat"], &["the", "cat", "sat"], 1);
        assert!((b - (1.0f64 - 1.5).exp()).abs() < 1e-12);
        assert!(b < 1.0);
        assert_eq!(bleu_n(&[], &["a"], 1), 0.0);
    }
}
