//! Multiset precision/recall over words and characters.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overlap {
    pub matched: usize,
    pub hyp: usize,
    pub reference: usize,
}

impl Overlap {
    pub fn of<T: Eq + Hash + Copy>(hyp: impl IntoIterator<Item = T>, reference: impl IntoIterator<Item = T>) -> Self {
        let mut h: HashMap<T, usize> = HashMap::new();
        let mut nh = 0;
        for x in hyp {
            *h.entry(x).or_default() += 1;
            nh += 1;
        }
        let mut r: HashMap<T, usize> = HashMap::new();
        let mut nr = 0;
        for x in reference {
            *r.entry(x).or_default() += 1;
            nr += 1;
        }
        let matched = r.iter().map(|(x, &c)| c.min(*h.get(x).unwrap_or(&0))).sum();
        Self { matched, hyp: nh, reference: nr }
    }

    pub fn merge(&mut self, o: Overlap) {
        self.matched += o.matched;
        self.hyp += o.hyp;
        self.reference += o.reference;
    }

    /// Zero for an empty hypothesis.
    pub fn precision(&self) -> f64 {
        if self.hyp == 0 {
            0.0
        } else {
            self.matched as f64 / self.hyp as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.reference == 0 {
            0.0
        } else {
            self.matched as f64 / self.reference as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WordCharPr {
    pub word_precision: f64,
    pub word_recall: f64,
    pub char_precision: f64,
    pub char_recall: f64,
}

pub fn word_overlap(hyp: &str, reference: &str) -> Overlap {
    Overlap::of(hyp.split_whitespace(), reference.split_whitespace())
}

/// Characters with spaces excluded.
pub fn char_overlap(hyp: &str, reference: &str) -> Overlap {
    Overlap::of(hyp.chars().filter(|c| !c.is_whitespace()), reference.chars().filter(|c| !c.is_whitespace()))
}

pub fn word_char_pr(hyp: &str, reference: &str) -> Result<WordCharPr> {
    let (hyp, reference) = (super::normalise(hyp), super::normalise(reference));
    if reference.is_empty() {
        return Err(Error::InvalidArgument("precision/recall needs a non-empty reference".into()));
    }
    let w = word_overlap(&hyp, &reference);
    let c = char_overlap(&hyp, &reference);
    Ok(WordCharPr {
        word_precision: w.precision(),
        word_recall: w.recall(),
        char_precision: c.precision(),
        char_recall: c.recall(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let p = word_char_pr("a cat", "a cat").unwrap();
        assert_eq!((p.word_precision, p.word_recall, p.char_precision, p.char_recall), (1.0, 1.0, 1.0, 1.0));
        let p = word_char_pr("a b", "a c").unwrap();
        assert_eq!((p.word_precision, p.word_recall), (0.5, 0.5));
        let p = word_char_pr("aa", "a").unwrap();
        assert_eq!((p.char_precision, p.char_recall), (0.5, 1.0));
        assert!(word_char_pr("a", "  ").is_err());
    }
}
