//! ROUGE-1 recall.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Fraction of reference unigrams (clipped counts) present in the hypothesis.
pub fn rouge1_recall(hyp: &[&str], reference: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("ROUGE needs a non-empty reference".into()));
    }
    let mut h: HashMap<&str, usize> = HashMap::new();
    for w in hyp {
        *h.entry(w).or_default() += 1;
    }
    let mut r: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *r.entry(w).or_default() += 1;
    }
    let hit: usize = r.iter().map(|(w, &c)| c.min(*h.get(w).unwrap_or(&0))).sum();
    Ok(hit as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(rouge1_recall(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        let r = rouge1_recall(&["the", "cat"], &["the", "black", "cat"]).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge1_recall(&["x"], &["y"]).unwrap(), 0.0);
        assert!(rouge1_recall(&["x"], &[]).is_err());
    }
}
