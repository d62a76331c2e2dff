//! The six training objectives, built on a graph so they can be
//! differentiated (and gradient-checked in `f64`).

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::vocab::{TokenSequence, PAD};

/// Style discriminator objective: binary cross-entropy with "synthetic" as
/// the positive class, summed over the two balanced halves (so chance-level
/// outputs give `2 ln 2`). `flipped` swaps the labels for the encoder update.
pub fn loss_style_disc<T: Scalar>(g: &mut Graph<T>, synthetic_logits: Var, real_logits: Var, flipped: bool) -> Var {
    let (pos, neg) = if flipped { (T::zero(), T::one()) } else { (T::one(), T::zero()) };
    let ns = g.value(synthetic_logits).len();
    let nr = g.value(real_logits).len();
    let a = g.bce_logits(synthetic_logits, &vec![pos; ns]);
    let b = g.bce_logits(real_logits, &vec![neg; nr]);
    g.add(a, b)
}

/// Token cross-entropy of the content discriminator, averaged over non-PAD
/// target positions.
pub fn loss_content_disc<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[Option<usize>]) -> Var {
    g.cross_entropy(logits, targets)
}

/// Mean prediction entropy over valid positions (the style encoder maximises it).
pub fn loss_style_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, valid: &[bool]) -> Var {
    g.entropy(logits, valid)
}

/// Mean over pairings of each pairing's token cross-entropy.
pub fn loss_classification<T: Scalar>(g: &mut Graph<T>, pairings: &[(Var, &[Option<usize>])]) -> Var {
    assert!(!pairings.is_empty());
    let terms: Vec<Var> = pairings.iter().map(|(l, t)| g.cross_entropy(*l, t)).collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    g.scale(total, T::one() / T::of(pairings.len() as f64))
}

/// Four-way group cross-entropy; `labels[i]` is the group index of row `i`.
pub fn loss_group_disc<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    let t: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    g.cross_entropy(logits, &t)
}

/// Confusion objective: G2 outputs are pushed toward the G1 label and G4
/// outputs toward the G3 label.
pub fn loss_semantic_align<T: Scalar>(g: &mut Graph<T>, g2_logits: Var, g4_logits: Var) -> Var {
    let n2 = g.value(g2_logits).rows();
    let n4 = g.value(g4_logits).rows();
    let a = g.cross_entropy(g2_logits, &vec![Some(0); n2]);
    let b = g.cross_entropy(g4_logits, &vec![Some(2); n4]);
    g.add(a, b)
}

/// Teacher-forcing inputs and targets for a batch of token sequences, padded
/// to a shared prefix length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub plen: usize,
}

impl TeacherBatch {
    pub fn new(seqs: &[&TokenSequence], plen: usize) -> Self {
        let mut inputs = Vec::with_capacity(seqs.len() * plen);
        let mut targets = Vec::with_capacity(seqs.len() * plen);
        for s in seqs {
            let ids = s.ids();
            for t in 0..plen {
                inputs.push(ids.get(t).copied().unwrap_or(PAD));
                targets.push(ids.get(t + 1).copied().filter(|&x| x != PAD));
            }
        }
        Self { inputs, targets, plen }
    }

    /// Prefix length covering every sequence's START..last character.
    pub fn prefix_len(seqs: &[&TokenSequence]) -> usize {
        seqs.iter().map(|s| s.content_len().saturating_sub(1)).max().unwrap_or(1).max(1)
    }

    pub fn valid(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }

    /// Rows `[start, start + n)` of samples.
    pub fn samples(&self, start: usize, n: usize) -> (&[usize], &[Option<usize>]) {
        let r = start * self.plen..(start + n) * self.plen;
        (&self.inputs[r.clone()], &self.targets[r])
    }
}
