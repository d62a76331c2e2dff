use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, Params};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{decode_tokens, PAD, START, STOP};

use super::transformer::{DecoderLayout, Dropout, EncoderLayout};
use super::{EmbeddingSequence, ModelConfig, PaddedFrames};

const MAGIC: &[u8; 4] = b"KSDM";
const VERSION: u32 = 1;

/// The seven learnable components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComponentId {
    ContentEncoder,
    StyleEncoder,
    Aggregator,
    Decoder,
    StyleDiscriminator,
    ContentDiscriminator,
    GroupDiscriminator,
}

pub const COMPONENTS: [ComponentId; 7] = [
    ComponentId::ContentEncoder,
    ComponentId::StyleEncoder,
    ComponentId::Aggregator,
    ComponentId::Decoder,
    ComponentId::StyleDiscriminator,
    ComponentId::ContentDiscriminator,
    ComponentId::GroupDiscriminator,
];

impl ComponentId {
    pub fn name(self) -> &'static str {
        match self {
            ComponentId::ContentEncoder => "E_C",
            ComponentId::StyleEncoder => "E_S",
            ComponentId::Aggregator => "M",
            ComponentId::Decoder => "G",
            ComponentId::StyleDiscriminator => "D_S",
            ComponentId::ContentDiscriminator => "D_C",
            ComponentId::GroupDiscriminator => "D_M",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Encoder output for a packed batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

/// Content/style encoders, aggregation, decoder and discriminators.
#[derive(Clone, Debug)]
pub struct DisentangleModel<T> {
    pub config: ModelConfig,
    encoder: EncoderLayout,
    decoder: DecoderLayout,
    aggregator: LayerNorm,
    style_disc: Linear,
    group_disc: Linear,
    params: Vec<Params<T>>,
}

impl<T: Scalar> DisentangleModel<T> {
    /// Fresh model. Both encoders start from the same weights; the content
    /// discriminator gets its own initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut enc = Params::new();
        let encoder = EncoderLayout::new(&mut enc, &mut stream(seed, "model/encoder"), &config);
        let mut dec = Params::new();
        let decoder = DecoderLayout::new(&mut dec, &mut stream(seed, "model/decoder"), &config);
        let mut dc = Params::new();
        DecoderLayout::new(&mut dc, &mut stream(seed, "model/content-disc"), &config);
        let mut m = Params::new();
        let aggregator = LayerNorm::new(&mut m, "aggregate", d);
        let mut ds = Params::new();
        let style_disc = Linear::new(&mut ds, &mut stream(seed, "model/style-disc"), "style", d, 1);
        let mut dm = Params::new();
        let group_disc = Linear::new(&mut dm, &mut stream(seed, "model/group-disc"), "group", d, 4);
        let params = vec![enc.clone(), enc, m, dec, ds, dc, dm];
        Ok(Self { config, encoder, decoder, aggregator, style_disc, group_disc, params })
    }

    pub fn params(&self, c: ComponentId) -> &Params<T> {
        &self.params[c.index()]
    }

    pub fn params_mut(&mut self, c: ComponentId) -> &mut Params<T> {
        &mut self.params[c.index()]
    }

    pub fn checksum(&self, c: ComponentId) -> String {
        self.params(c).checksum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Params::all_finite)
    }

    /// Scalar count implied by the configuration for one component.
    pub fn expected_param_count(config: &ModelConfig, c: ComponentId) -> usize {
        let d = config.embed_dim;
        match c {
            ComponentId::ContentEncoder | ComponentId::StyleEncoder => EncoderLayout::param_count(config),
            ComponentId::Decoder | ComponentId::ContentDiscriminator => DecoderLayout::param_count(config),
            ComponentId::Aggregator => 2 * d,
            ComponentId::StyleDiscriminator => Linear::param_count(d, 1),
            ComponentId::GroupDiscriminator => Linear::param_count(d, 4),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, c: ComponentId, trainable: bool) -> Bound {
        self.params(c).bind(g, trainable)
    }

    /// Runs an encoder (`ContentEncoder` or `StyleEncoder`) over a packed batch.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
        drop: &mut Dropout,
    ) -> Encoded {
        let var = self.encoder.forward(g, bound, x, batch, len, mask, drop);
        Encoded { var, batch, len, mask: mask.to_vec() }
    }

    /// LayerNorm of the elementwise sum. The result keeps the content mask.
    pub fn aggregate(&self, g: &mut Graph<T>, bound: &Bound, style: &Encoded, content: &Encoded) -> Encoded {
        assert_eq!((style.batch, style.len), (content.batch, content.len), "aggregate shape mismatch");
        let s = g.add(style.var, content.var);
        let var = self.aggregator.forward(g, bound, s);
        Encoded { var, batch: content.batch, len: content.len, mask: content.mask.clone() }
    }

    /// Decoder logits (component `Decoder` or `ContentDiscriminator`) for
    /// packed prefixes of length `plen`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        ids: &[usize],
        plen: usize,
        memory: &Encoded,
        drop: &mut Dropout,
    ) -> Var {
        self.decoder.forward(g, bound, ids, memory.batch, plen, memory.var, memory.len, &memory.mask, drop)
    }

    /// Temporal max pool per sample, `[batch, embed_dim]`.
    pub fn pool(&self, g: &mut Graph<T>, e: &Encoded) -> Result<Var> {
        let segments: Vec<(usize, usize)> = (0..e.batch).map(|i| (i * e.len, e.len)).collect();
        if let Some(i) = segments.iter().position(|&(s, n)| !e.mask[s..s + n].iter().any(|&m| m)) {
            return Err(Error::InvalidArgument(format!("sample {i} is fully masked; nothing to pool")));
        }
        Ok(g.masked_max_pool(e.var, &segments, &e.mask))
    }

    /// Logit of "synthetic" per pooled row.
    pub fn style_logits(&self, g: &mut Graph<T>, bound: &Bound, pooled: Var) -> Var {
        self.style_disc.forward(g, bound, pooled)
    }

    /// Four group logits per pooled row.
    pub fn group_logits(&self, g: &mut Graph<T>, bound: &Bound, pooled: Var) -> Var {
        self.group_disc.forward(g, bound, pooled)
    }

    fn check_frames(&self, x: &PaddedFrames<T>) -> Result<()> {
        let (n, f) = (self.config.max_seq_len, self.config.feature_dim);
        if x.values.shape() != [n, f] || x.mask.len() != n {
            return Err(Error::Shape {
                expected: format!("{n}x{f} frames with {n} mask entries"),
                actual: format!("{:?} frames with {} mask entries", x.values.shape(), x.mask.len()),
            });
        }
        Ok(())
    }

    fn encode_one(&self, c: ComponentId, x: &PaddedFrames<T>) -> Result<EmbeddingSequence<T>> {
        self.check_frames(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, c, false);
        let xv = g.constant(x.values.clone());
        let e = self.encode(&mut g, &b, xv, 1, x.mask.len(), &x.mask, &mut Dropout::off());
        Ok(EmbeddingSequence { values: g.value(e.var).clone(), mask: x.mask.clone() })
    }

    pub fn content_encode(&self, x: &PaddedFrames<T>) -> Result<EmbeddingSequence<T>> {
        self.encode_one(ComponentId::ContentEncoder, x)
    }

    pub fn style_encode(&self, x: &PaddedFrames<T>) -> Result<EmbeddingSequence<T>> {
        self.encode_one(ComponentId::StyleEncoder, x)
    }

    /// Aggregation of two single sequences; masks combine by intersection.
    pub fn aggregate_sequences(
        &self,
        style: &EmbeddingSequence<T>,
        content: &EmbeddingSequence<T>,
    ) -> Result<EmbeddingSequence<T>> {
        if style.values.shape() != content.values.shape() || style.mask.len() != content.mask.len() {
            return Err(Error::Shape {
                expected: format!("{:?}", style.values.shape()),
                actual: format!("{:?}", content.values.shape()),
            });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, ComponentId::Aggregator, false);
        let s = g.constant(style.values.clone());
        let c = g.constant(content.values.clone());
        let sum = g.add(s, c);
        let out = self.aggregator.forward(&mut g, &b, sum);
        let mask = style.mask.iter().zip(&content.mask).map(|(a, b)| *a && *b).collect();
        Ok(EmbeddingSequence { values: g.value(out).clone(), mask })
    }

    fn decode_one(&self, c: ComponentId, memory: &EmbeddingSequence<T>, prefix: &[usize]) -> Result<Tensor<T>> {
        if prefix.first() != Some(&START) {
            return Err(Error::InvalidTokens("decoder prefix must begin with START".into()));
        }
        if prefix.len() > self.config.max_phrase_len {
            return Err(Error::InvalidTokens(format!(
                "prefix of {} tokens exceeds {}",
                prefix.len(),
                self.config.max_phrase_len
            )));
        }
        if let Some(t) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidTokens(format!("token {t} outside vocabulary")));
        }
        if memory.values.cols() != self.config.embed_dim || memory.mask.len() != memory.values.rows() {
            return Err(Error::Shape {
                expected: format!("n x {} memory", self.config.embed_dim),
                actual: format!("{:?}", memory.values.shape()),
            });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, c, false);
        let m = g.constant(memory.values.clone());
        let enc = Encoded { var: m, batch: 1, len: memory.mask.len(), mask: memory.mask.clone() };
        let logits = self.decode(&mut g, &b, prefix, prefix.len(), &enc, &mut Dropout::off());
        Ok(g.value(logits).clone())
    }

    /// Decoder logits, `prefix.len() x vocab`.
    pub fn decoder_logits(&self, memory: &EmbeddingSequence<T>, prefix: &[usize]) -> Result<Tensor<T>> {
        self.decode_one(ComponentId::Decoder, memory, prefix)
    }

    /// Content discriminator logits on a style memory.
    pub fn content_disc_logits(&self, style_memory: &EmbeddingSequence<T>, prefix: &[usize]) -> Result<Tensor<T>> {
        self.decode_one(ComponentId::ContentDiscriminator, style_memory, prefix)
    }

    /// Probability that a pooled content vector is synthetic.
    pub fn style_probability(&self, pooled: &[T]) -> Result<T> {
        let z = self.linear_one(ComponentId::StyleDiscriminator, self.style_disc, pooled)?;
        Ok(crate::graph::sigmoid(z[0]))
    }

    /// Group distribution (G1..G4) of a pooled aggregate vector.
    pub fn group_probabilities(&self, pooled: &[T]) -> Result<[T; 4]> {
        let z = self.linear_one(ComponentId::GroupDiscriminator, self.group_disc, pooled)?;
        let p = softmax_rows(&z, 4);
        Ok([p[0], p[1], p[2], p[3]])
    }

    fn linear_one(&self, c: ComponentId, layer: Linear, pooled: &[T]) -> Result<Vec<T>> {
        if pooled.len() != self.config.embed_dim {
            return Err(Error::Shape { expected: self.config.embed_dim.to_string(), actual: pooled.len().to_string() });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, c, false);
        let x = g.constant(Tensor::matrix(1, pooled.len(), pooled.to_vec()));
        let z = layer.forward(&mut g, &b, x);
        Ok(g.value(z).data().to_vec())
    }

    /// Greedy decoding through the real-style/real-content path
    /// `G(M(E_S(x), E_C(x)))`. Every sentence stops at STOP or when the
    /// phrase budget is used up.
    pub fn greedy_decode(&self, batch: &[&PaddedFrames<T>]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(32) {
            for f in chunk {
                self.check_frames(f)?;
            }
            let (x, len, mask) = pack_frames(chunk);
            let n = chunk.len();
            let mut g = Graph::new();
            let bc = self.bind(&mut g, ComponentId::ContentEncoder, false);
            let bs = self.bind(&mut g, ComponentId::StyleEncoder, false);
            let bm = self.bind(&mut g, ComponentId::Aggregator, false);
            let xv = g.constant(x);
            let mut off = Dropout::off();
            let c = self.encode(&mut g, &bc, xv, n, len, &mask, &mut off);
            let s = self.encode(&mut g, &bs, xv, n, len, &mask, &mut off);
            let memory = self.aggregate(&mut g, &bm, &s, &c);
            let memory_value = g.value(memory.var).clone();
            let mut seqs: Vec<Vec<usize>> = vec![vec![START]; n];
            let mut done = vec![false; n];
            // START plus at most max_phrase_len - 2 characters; STOP is implied at the end.
            for step in 1..self.config.max_phrase_len - 1 {
                if done.iter().all(|&d| d) {
                    break;
                }
                let mut h = Graph::new();
                let bg2 = self.bind(&mut h, ComponentId::Decoder, false);
                let mv = h.constant(memory_value.clone());
                let mem = Encoded { var: mv, ..memory.clone() };
                let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
                let logits = self.decode(&mut h, &bg2, &ids, step, &mem, &mut off);
                let lv = h.value(logits);
                for (i, seq) in seqs.iter_mut().enumerate() {
                    let next = if done[i] {
                        PAD
                    } else {
                        let row = lv.row(i * step + step - 1);
                        crate::featex::argmax(row)
                    };
                    if next == STOP || next == PAD || next == START {
                        done[i] = true;
                    }
                    seq.push(if done[i] { PAD } else { next });
                }
            }
            for s in seqs {
                out.push(decode_tokens(&s)?);
            }
        }
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_str(w, &serde_json::to_string(&self.config)?)?;
        for p in &self.params {
            p.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, MAGIC)?;
        let v = binio::read_u32(r)?;
        if v != VERSION {
            return Err(Error::Format(format!("model checkpoint version {v}, expected {VERSION}")));
        }
        let config: ModelConfig = serde_json::from_str(&binio::read_str(r)?)?;
        let mut m = Self::new(config, 0)?;
        for p in &mut m.params {
            p.read_into(r)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::at(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::at(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Packs padded sequences into one `[batch * len, feature_dim]` matrix, where
/// `len` is the longest valid prefix in the batch (trailing all-pad rows are
/// dropped).
pub fn pack_frames<T: Scalar>(batch: &[&PaddedFrames<T>]) -> (Tensor<T>, usize, Vec<bool>) {
    let len = batch.iter().map(|f| f.mask.iter().rposition(|&m| m).map_or(1, |p| p + 1)).max().unwrap_or(1);
    pack_frames_to(batch, len)
}

pub fn pack_frames_to<T: Scalar>(batch: &[&PaddedFrames<T>], len: usize) -> (Tensor<T>, usize, Vec<bool>) {
    let dim = batch.first().map_or(0, |f| f.values.cols());
    let mut data = Vec::with_capacity(batch.len() * len * dim);
    let mut mask = Vec::with_capacity(batch.len() * len);
    for f in batch {
        data.extend_from_slice(&f.values.data()[..len * dim]);
        mask.extend_from_slice(&f.mask[..len]);
    }
    (Tensor::matrix(batch.len() * len, dim, data), len, mask)
}
