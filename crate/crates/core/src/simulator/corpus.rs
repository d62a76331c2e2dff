use std::collections::HashSet;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::MAX_PHRASE_LEN;

/// What to do with lines containing characters outside `a-z` and space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharsetPolicy {
    #[default]
    Drop,
    /// Replace every other character by a space.
    Normalize,
}

fn clean_line(line: &str, policy: CharsetPolicy) -> Option<String> {
    let lower = line.to_lowercase();
    let mut mapped = String::with_capacity(lower.len());
    for c in lower.chars() {
        match c {
            'a'..='z' => mapped.push(c),
            c if c.is_whitespace() => mapped.push(' '),
            _ if policy == CharsetPolicy::Normalize => mapped.push(' '),
            _ => return None,
        }
    }
    let words: Vec<&str> = mapped.split_whitespace().collect();
    (!words.is_empty()).then(|| words.join(" "))
}

/// Cleans, length-filters and deduplicates `lines`, keeping first occurrences
/// in order.
pub fn clean_sentences<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    max_len: usize,
    policy: CharsetPolicy,
) -> Result<Vec<String>> {
    if max_len > MAX_PHRASE_LEN - 2 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} exceeds {}", MAX_PHRASE_LEN - 2)));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in lines {
        if let Some(s) = clean_line(line, policy) {
            if s.len() <= max_len && seen.insert(s.clone()) {
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Reads a one-headline-per-line corpus. A headline CSV (`date,text`) is
/// accepted too: a leading all-digit field is stripped.
pub fn ingest_corpus(path: &Path, max_len: usize, policy: CharsetPolicy) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
    let lines = text.lines().map(|l| match l.split_once(',') {
        Some((head, rest)) if !head.is_empty() && head.bytes().all(|b| b.is_ascii_digit()) => rest,
        _ => l,
    });
    let out = clean_sentences(lines, max_len, policy)?;
    if out.is_empty() {
        warn!("corpus {} yielded no usable sentences", path.display());
    }
    Ok(out)
}

const WORDS: &[&str] = &[
    "a", "after", "again", "aid", "air", "all", "alert", "amid", "and", "app", "area", "army", "art", "at", "back",
    "ban", "bank", "basic", "beach", "best", "bid", "big", "bill", "blow", "board", "boat", "body", "boost", "border",
    "boy", "bridge", "budget", "bus", "call", "car", "case", "cash", "chief", "child", "city", "claim", "climate",
    "club", "coach", "coal", "coast", "court", "crash", "crime", "crop", "cup", "cut", "dam", "data", "day", "deal",
    "death", "debt", "delay", "dog", "down", "drive", "drug", "dry", "east", "end", "energy", "event", "face", "fair",
    "farm", "fear", "fee", "festival", "film", "fire", "first", "fish", "flood", "for", "fresh", "fuel", "fund", "game",
    "gas", "gold", "green", "group", "growth", "gun", "health", "heat", "help", "high", "hit", "home", "hope",
    "house", "in", "jail", "job", "jury", "key", "kids", "labor", "land", "law", "leader", "league", "left", "life",
    "line", "loan", "local", "long", "lost", "low", "man", "market", "mayor", "meet", "mine", "minister", "money",
    "more", "mother", "move", "new", "news", "night", "north", "now", "of", "off", "oil", "on", "open", "out", "over",
    "park", "party", "pay", "plan", "plant", "play", "police", "poll", "port", "power", "price", "push", "race", "rain",
    "rate", "record", "report", "rescue", "rise", "river", "road", "rule", "run", "safe", "sale", "school", "sea",
    "search", "set", "shark", "ship", "shot", "show", "site", "sky", "south", "speed", "star", "state", "storm",
    "strike", "study", "talks", "tax", "team", "test", "to", "top", "town", "trade", "train", "trial", "up", "urged",
    "vote", "war", "water", "week", "west", "wind", "win", "wins", "with", "woman", "work", "world", "year", "young",
];

/// Headline-like word salad used when no corpus file is supplied.
pub fn fallback_sentences(count: usize, max_len: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < count * 50 + 1000 {
        attempts += 1;
        let target = rng.gen_range(2..=6);
        let mut s = String::new();
        for _ in 0..target {
            let w = WORDS.choose(rng).expect("non-empty word list");
            let extra = if s.is_empty() { w.len() } else { w.len() + 1 };
            if s.len() + extra > max_len {
                break;
            }
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(w);
        }
        if !s.is_empty() && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn drop_and_normalize_policies() {
        let lines = ["Rain DELAYS match; 2022", "Rain delays match", "rain  delays match ", "x"];
        let drop = clean_sentences(lines, 68, CharsetPolicy::Drop).unwrap();
        assert_eq!(drop, vec!["rain delays match", "x"]);
        let norm = clean_sentences(lines, 68, CharsetPolicy::Normalize).unwrap();
        assert_eq!(norm, vec!["rain delays match", "x"]);
        let norm = clean_sentences(["Storm, hits 2 towns"], 68, CharsetPolicy::Normalize).unwrap();
        assert_eq!(norm, vec!["storm hits towns"]);
        assert!(clean_sentences(lines, 69, CharsetPolicy::Drop).is_err());
    }

    #[test]
    fn fallback_respects_length() {
        let s = fallback_sentences(200, 20, &mut stream(0, "c"));
        assert_eq!(s.len(), 200);
        assert!(s.iter().all(|x| x.len() <= 20 && !x.is_empty()));
        assert!(crate::vocab::validate_sentence(&s[0], 68).is_ok());
    }
}
