//! Lexicon-based spelling correction under the keyboard edit distance.

use std::collections::BTreeMap;

use log::warn;

use crate::keyboard::KeyboardLayout;

/// Replacement happens only within this keyboard edit distance.
pub const DEFAULT_THRESHOLD: f64 = 2.0;

/// Word list with corpus frequencies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    freq: BTreeMap<String, u64>,
}

impl Lexicon {
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq = BTreeMap::new();
        for s in sentences {
            for w in s.split_whitespace() {
                *freq.entry(w.to_ascii_lowercase()).or_insert(0) += 1;
            }
        }
        Self { freq }
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = (&'a str, u64)>) -> Self {
        Self { freq: words.into_iter().map(|(w, f)| (w.to_string(), f)).collect() }
    }

    /// One `word [count]` per line.
    pub fn parse(text: &str) -> Self {
        let mut freq = BTreeMap::new();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            if let Some(w) = it.next() {
                let f = it.next().and_then(|f| f.parse().ok()).unwrap_or(1);
                *freq.entry(w.to_ascii_lowercase()).or_insert(0) += f;
            }
        }
        Self { freq }
    }

    pub fn contains(&self, w: &str) -> bool {
        self.freq.contains_key(w)
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.freq.iter().map(|(w, &f)| (w.as_str(), f))
    }
}

/// Replaces every out-of-lexicon word by its nearest lexicon word when that
/// word is within `threshold`. Ties go to the more frequent word, then the
/// lexicographically smaller one.
pub fn dictionary_correct(hyp: &str, lexicon: &Lexicon, layout: &KeyboardLayout, threshold: f64) -> String {
    if lexicon.is_empty() {
        warn!("empty lexicon; corrections disabled");
        return hyp.to_string();
    }
    let words: Vec<String> = hyp
        .split_whitespace()
        .map(|w| {
            let w = w.to_ascii_lowercase();
            if lexicon.contains(&w) {
                return w;
            }
            let mut best: Option<(f64, u64, &str)> = None;
            for (cand, f) in lexicon.iter() {
                // Length difference is a lower bound on the distance.
                if (cand.len() as f64 - w.len() as f64).abs() > threshold {
                    continue;
                }
                let Ok(d) = layout.edit_distance(&w, cand) else { continue };
                if d > threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bd, bf, bw)) => {
                        d < bd - 1e-12 || ((d - bd).abs() <= 1e-12 && (f > bf || (f == bf && cand < bw)))
                    }
                };
                if better {
                    best = Some((d, f, cand));
                }
            }
            best.map_or(w.clone(), |(_, _, c)| c.to_string())
        })
        .collect();
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let kb = KeyboardLayout::qwerty();
        let lex = Lexicon::from_words([("hello", 1), ("help", 1)]);
        assert!(kb.edit_distance("hellp", "hello").unwrap() < kb.edit_distance("hellp", "help").unwrap());
        assert_eq!(dictionary_correct("hellp", &lex, &kb, DEFAULT_THRESHOLD), "hello");
        assert_eq!(dictionary_correct("help", &lex, &kb, DEFAULT_THRESHOLD), "help");
        assert_eq!(dictionary_correct("zzzzzzzz", &lex, &kb, DEFAULT_THRESHOLD), "zzzzzzzz");
        assert_eq!(dictionary_correct("hellp", &Lexicon::default(), &kb, DEFAULT_THRESHOLD), "hellp");
    }

    #[test]
    fn ties_prefer_frequency_then_order() {
        let kb = KeyboardLayout::qwerty();
        // Both candidates are one insertion away.
        let lex = Lexicon::from_words([("ab", 1), ("ac", 5)]);
        assert_eq!(dictionary_correct("a", &lex, &kb, DEFAULT_THRESHOLD), "ac");
        let lex = Lexicon::from_words([("ac", 2), ("ab", 2)]);
        assert_eq!(dictionary_correct("a", &lex, &kb, DEFAULT_THRESHOLD), "ab");
    }
}
