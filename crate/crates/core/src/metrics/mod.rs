//! Text-recovery metrics: BLEU, ROUGE-1, METEOR, TER, the keyboard edit
//! distance and word/character precision-recall, plus the lexicon corrector.
//!
//! BLEU and precision/recall are corpus-level (counts pooled before the
//! ratio). METEOR, ROUGE, TER and QWERTY-D are per-sentence scores averaged
//! without weighting; QWERTY-D is the raw keyboard edit distance per sentence.

pub mod bleu;
pub mod correct;
pub mod meteor;
pub mod prf;
pub mod rouge;
pub mod ter;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::KeyboardLayout;

pub use bleu::{bleu_n, BleuStats};
pub use correct::{dictionary_correct, Lexicon};
pub use meteor::meteor;
pub use prf::{word_char_pr, WordCharPr};
pub use rouge::rouge1_recall;
pub use ter::ter;

/// Lowercase and trim trailing whitespace.
pub fn normalise(s: &str) -> String {
    s.trim_end().to_ascii_lowercase()
}

pub fn tokenize(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge: f64,
    pub ter: f64,
    pub qwerty_d: f64,
    pub word_precision: f64,
    pub word_recall: f64,
    pub char_precision: f64,
    pub char_recall: f64,
    pub sample_count: usize,
}

/// Column header matching the reported metric order, with the direction in
/// which each metric improves.
pub const COLUMNS: [(&str, &str); 6] =
    [("Bleu-1", "↑"), ("Bleu-4", "↑"), ("METEOR", "↑"), ("ROUGE", "↑"), ("TER", "↓"), ("Qwerty-D", "↓")];

impl MetricsReport {
    pub fn headline(&self) -> [f64; 6] {
        [self.bleu1, self.bleu4, self.meteor, self.rouge, self.ter, self.qwerty_d]
    }

    pub fn header() -> String {
        COLUMNS.iter().map(|(n, d)| format!("{n} {d}")).collect::<Vec<_>>().join(" | ")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::header())?;
        let vals: Vec<String> = self.headline().iter().map(|v| format!("{v:.4}")).collect();
        writeln!(f, "{}", vals.join(" | "))?;
        write!(
            f,
            "word P/R {:.4}/{:.4}  char P/R {:.4}/{:.4}  (n = {})",
            self.word_precision, self.word_recall, self.char_precision, self.char_recall, self.sample_count
        )
    }
}

/// Scores aligned `(hypothesis, reference)` pairs.
pub fn score_pairs(pairs: &[(String, String)], layout: &KeyboardLayout) -> Result<MetricsReport> {
    let mut bleu = BleuStats::default();
    let mut words = prf::Overlap::default();
    let mut chars = prf::Overlap::default();
    let (mut met, mut rou, mut terr, mut qd) = (0.0, 0.0, 0.0, 0.0);
    for (h, r) in pairs {
        let (h, r) = (normalise(h), normalise(r));
        let (ht, rt) = (tokenize(&h), tokenize(&r));
        if rt.is_empty() {
            return Err(Error::InvalidArgument(format!("empty reference for hypothesis {h:?}")));
        }
        bleu.add(&ht, &rt);
        met += meteor(&ht, &rt);
        rou += rouge1_recall(&ht, &rt)?;
        terr += ter(&ht, &rt)?;
        qd += layout.edit_distance(&h, &r)?;
        words.merge(prf::word_overlap(&h, &r));
        chars.merge(prf::char_overlap(&h, &r));
    }
    let n = pairs.len().max(1) as f64;
    Ok(MetricsReport {
        bleu1: bleu.score(1),
        bleu4: bleu.score(4),
        meteor: met / n,
        rouge: rou / n,
        ter: terr / n,
        qwerty_d: qd / n,
        word_precision: words.precision(),
        word_recall: words.recall(),
        char_precision: chars.precision(),
        char_recall: chars.recall(),
        sample_count: pairs.len(),
    })
}

/// Raw scores and, when a lexicon is available, scores after correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub raw: MetricsReport,
    pub corrected: Option<MetricsReport>,
}

pub fn evaluate(
    pairs: &[(String, String)],
    layout: &KeyboardLayout,
    lexicon: Option<&Lexicon>,
) -> Result<Evaluation> {
    let raw = score_pairs(pairs, layout)?;
    let corrected = match lexicon {
        Some(lex) => {
            let fixed: Vec<(String, String)> = pairs
                .iter()
                .map(|(h, r)| (dictionary_correct(&normalise(h), lex, layout, correct::DEFAULT_THRESHOLD), r.clone()))
                .collect();
            Some(score_pairs(&fixed, layout)?)
        }
        None => None,
    };
    Ok(Evaluation { raw, corrected })
}

/// One line of a predictions or references file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

pub fn read_records(path: &Path) -> Result<Vec<TextRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::at(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::at(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[TextRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::at(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Pairs predictions with references by id; ids present in only one file are
/// an error.
pub fn join_records(pred: &[TextRecord], refs: &[TextRecord]) -> Result<Vec<(String, String)>> {
    let p: BTreeMap<&str, &str> = pred.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
    let r: BTreeMap<&str, &str> = refs.iter().map(|r| (r.id.as_str(), r.text.as_str())).collect();
    let pk: BTreeSet<&str> = p.keys().copied().collect();
    let rk: BTreeSet<&str> = r.keys().copied().collect();
    let missing: Vec<String> = pk.symmetric_difference(&rk).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    Ok(r.iter().map(|(id, text)| (p[id].to_string(), text.to_string())).collect())
}

pub fn evaluate_files(
    predictions: &Path,
    references: &Path,
    layout: &KeyboardLayout,
    lexicon: Option<&Lexicon>,
) -> Result<Evaluation> {
    let pairs = join_records(&read_records(predictions)?, &read_records(references)?)?;
    evaluate(&pairs, layout, lexicon)
}
