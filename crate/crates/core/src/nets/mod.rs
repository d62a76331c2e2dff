//! Sequence networks: content/style encoders, feature aggregation, the
//! decoder and the three discriminators.

mod model;
mod transformer;

pub use model::{pack_frames, pack_frames_to, ComponentId, DisentangleModel, Encoded, COMPONENTS};
pub use transformer::{DecoderLayout, Dropout, EncoderLayout};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featex::FEATURE_DIM;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{MAX_PHRASE_LEN, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub max_phrase_len: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            embed_dim: 128,
            hidden_dim: 256,
            dropout: 0.15,
            max_seq_len: 300,
            max_phrase_len: MAX_PHRASE_LEN,
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
        }
    }

    pub fn desk() -> Self {
        Self { num_layers: 2, num_heads: 2, embed_dim: 64, hidden_dim: 128, max_seq_len: 120, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.max_phrase_len < 3 {
            return bad(format!("max_phrase_len {} < 3", self.max_phrase_len));
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.num_layers == 0 || self.hidden_dim == 0 || self.max_seq_len == 0 || self.feature_dim == 0 {
            return bad("layer count, hidden size, sequence length and feature width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// How frames are chosen when a video is longer than `max_seq_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Fresh sorted random subset per call.
    Train,
    /// Evenly spaced, deterministic subset.
    Eval,
}

/// A fixed-length frame sequence: `max_len` rows, rows beyond `valid` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedFrames<T> {
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> PaddedFrames<T> {
    pub fn valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Indices kept from a `k`-frame video.
pub fn frame_indices(k: usize, max_len: usize, mode: SampleMode, rng: &mut impl Rng) -> Vec<usize> {
    if k <= max_len {
        return (0..k).collect();
    }
    match mode {
        SampleMode::Train => {
            let mut idx = sample(rng, k, max_len).into_vec();
            idx.sort_unstable();
            idx
        }
        SampleMode::Eval => (0..max_len).map(|i| i * k / max_len).collect(),
    }
}

pub fn sample_or_pad_frames<T: Scalar>(
    features: &Tensor<T>,
    max_len: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<PaddedFrames<T>> {
    let k = features.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("empty feature sequence".into()));
    }
    let dim = features.cols();
    let idx = frame_indices(k, max_len, mode, rng);
    let mut data = vec![T::zero(); max_len * dim];
    for (r, &i) in idx.iter().enumerate() {
        data[r * dim..(r + 1) * dim].copy_from_slice(features.row(i));
    }
    let mut mask = vec![false; max_len];
    mask[..idx.len()].iter_mut().for_each(|m| *m = true);
    Ok(PaddedFrames { values: Tensor::matrix(max_len, dim, data), mask })
}

/// An `n x embed_dim` sequence with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence<T> {
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Coordinate-wise maximum over unmasked rows.
pub fn temporal_max_pool<T: Scalar>(e: &EmbeddingSequence<T>) -> Result<Vec<T>> {
    if e.mask.len() != e.values.rows() {
        return Err(Error::Shape { expected: format!("{} mask entries", e.values.rows()), actual: e.mask.len().to_string() });
    }
    let mut out: Option<Vec<T>> = None;
    for (r, _) in e.mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = e.values.row(r);
        match out.as_mut() {
            None => out = Some(row.to_vec()),
            Some(o) => o.iter_mut().zip(row).for_each(|(a, &b)| *a = a.max(b)),
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("temporal max pool over a fully masked sequence".into()))
}

/// Style/content domain pairings fed through the aggregation module. The
/// label index is the discriminant: G1 = 0 .. G4 = 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingGroup {
    /// Synthetic style, synthetic content.
    G1,
    /// Real style, synthetic content.
    G2,
    /// Synthetic style, real content.
    G3,
    /// Real style, real content.
    G4,
}

impl PairingGroup {
    pub const ALL: [PairingGroup; 4] = [PairingGroup::G1, PairingGroup::G2, PairingGroup::G3, PairingGroup::G4];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.label()] = 1.0;
        v
    }

    /// Whether (style, content) come from the real domain.
    pub fn real_style(self) -> bool {
        matches!(self, PairingGroup::G2 | PairingGroup::G4)
    }

    pub fn real_content(self) -> bool {
        matches!(self, PairingGroup::G3 | PairingGroup::G4)
    }
}
