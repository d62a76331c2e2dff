//! The 30-symbol output vocabulary and sentence encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 30;
pub const PAD: usize = 0;
pub const START: usize = 1;
pub const STOP: usize = 2;
pub const SPACE_TOKEN: usize = 3;
const FIRST_LETTER: usize = 4;

/// Maximum token count of an encoded phrase, START and STOP included.
pub const MAX_PHRASE_LEN: usize = 70;

/// Index lookup in both directions over the fixed symbol set:
/// `PAD, START, STOP, SPACE, a..z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocabulary {
    symbols: Vec<String>,
}

impl Default for TokenVocabulary {
    fn default() -> Self {
        let mut symbols: Vec<String> = ["<pad>", "<start>", "<stop>", " "].iter().map(|s| s.to_string()).collect();
        symbols.extend(('a'..='z').map(String::from));
        Self { symbols }
    }
}

impl TokenVocabulary {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

pub fn char_to_token(c: char) -> Option<usize> {
    match c {
        ' ' => Some(SPACE_TOKEN),
        'a'..='z' => Some(FIRST_LETTER + (c as usize - 'a' as usize)),
        _ => None,
    }
}

pub fn token_to_char(t: usize) -> Option<char> {
    match t {
        SPACE_TOKEN => Some(' '),
        t if (FIRST_LETTER..VOCAB_SIZE).contains(&t) => Some((b'a' + (t - FIRST_LETTER) as u8) as char),
        _ => None,
    }
}

/// Character set check shared by the encoder and the simulator.
pub fn validate_sentence(s: &str, max_chars: usize) -> Result<()> {
    let err = |reason: String| Error::InvalidSentence { sentence: s.to_string(), reason };
    if s.is_empty() {
        return Err(err("empty sentence".into()));
    }
    if let Some(c) = s.chars().find(|&c| char_to_token(c).is_none()) {
        return Err(err(format!("character {c:?} outside a-z and space")));
    }
    let n = s.chars().count();
    if n > max_chars {
        return Err(err(format!("{n} characters exceeds the limit of {max_chars}")));
    }
    Ok(())
}

/// A sentence encoded as `START, chars.., STOP, PAD..` of fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn encode(s: &str, phrase_len: usize) -> Result<Self> {
        if phrase_len < 3 {
            return Err(Error::InvalidArgument(format!("phrase length {phrase_len} < 3")));
        }
        validate_sentence(s, phrase_len - 2)?;
        let mut ids = Vec::with_capacity(phrase_len);
        ids.push(START);
        ids.extend(s.chars().map(|c| char_to_token(c).expect("validated")));
        ids.push(STOP);
        ids.resize(phrase_len, PAD);
        Ok(Self(ids))
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&START) {
            return Err(Error::InvalidTokens("sequence must begin with START".into()));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::InvalidTokens(format!("token {bad} outside vocabulary")));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of meaningful tokens: START through STOP inclusive (or the whole
    /// unterminated sequence).
    pub fn content_len(&self) -> usize {
        self.0.iter().position(|&t| t == STOP).map_or(self.0.len(), |p| p + 1)
    }

    pub fn decode(&self) -> Result<String> {
        decode_tokens(&self.0)
    }
}

/// Characters between START and the first STOP (or PAD); special tokens elsewhere
/// are rejected.
pub fn decode_tokens(ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    let body = if ids.first() == Some(&START) { &ids[1..] } else { ids };
    for &t in body {
        if t == STOP || t == PAD {
            break;
        }
        match token_to_char(t) {
            Some(c) => out.push(c),
            None => return Err(Error::InvalidTokens(format!("unexpected token {t} inside sentence"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_has_thirty_distinct_symbols() {
        let v = TokenVocabulary::default();
        assert_eq!(v.len(), VOCAB_SIZE);
        let mut specials = [PAD, START, STOP, SPACE_TOKEN];
        specials.sort();
        specials.windows(2).for_each(|w| assert_ne!(w[0], w[1]));
        assert_eq!(v.index("q"), char_to_token('q'));
        assert_eq!(v.symbol(SPACE_TOKEN), Some(" "));
    }

    #[test]
    fn encode_layout() {
        let t = TokenSequence::encode("hi", MAX_PHRASE_LEN).unwrap();
        assert_eq!(&t.ids()[..4], &[START, char_to_token('h').unwrap(), char_to_token('i').unwrap(), STOP]);
        assert!(t.ids()[4..].iter().all(|&x| x == PAD));
        assert_eq!(t.len(), MAX_PHRASE_LEN);
        assert_eq!(t.decode().unwrap(), "hi");
        assert_eq!(TokenSequence::encode("a cat", MAX_PHRASE_LEN).unwrap().decode().unwrap(), "a cat");
    }

    #[test]
    fn longest_sentence_fills_buffer() {
        let s = "a".repeat(MAX_PHRASE_LEN - 2);
        let t = TokenSequence::encode(&s, MAX_PHRASE_LEN).unwrap();
        assert_eq!(t.ids().last(), Some(&STOP));
        assert!(!t.ids().contains(&PAD));
        assert!(TokenSequence::encode(&"a".repeat(MAX_PHRASE_LEN - 1), MAX_PHRASE_LEN).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TokenSequence::encode("Hi", 10).is_err());
        assert!(TokenSequence::encode("hi!", 10).is_err());
        assert!(TokenSequence::encode("", 10).is_err());
        assert!(TokenSequence::from_ids(vec![STOP]).is_err());
        assert!(decode_tokens(&[START, 5, START]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[a-z ]{1,68}") {
            let t = TokenSequence::encode(&s, MAX_PHRASE_LEN).unwrap();
            prop_assert_eq!(t.decode().unwrap(), s);
        }
    }
}
