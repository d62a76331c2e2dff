//! Synthetic pretraining, the disentanglement training loop and the
//! finetuning baseline.

mod losses;

pub use losses::{
    loss_classification, loss_content_disc, loss_group_disc, loss_semantic_align, loss_style_disc,
    loss_style_entropy, TeacherBatch,
};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{normalise, ter, tokenize};
use crate::nets::{
    pack_frames_to, sample_or_pad_frames, ComponentId, DisentangleModel, Dropout, Encoded, PaddedFrames, SampleMode,
    COMPONENTS,
};
use crate::params::Adam;
use crate::rng::stream;
use crate::simulator::Domain;
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Classification over the four pairings.
    pub lambda1: f64,
    /// Semantic-alignment confusion (encoders and aggregation).
    pub lambda2: f64,
    /// Group discriminator.
    pub lambda3: f64,
    /// Style-encoder entropy.
    pub lambda4: f64,
    /// Content discriminator.
    pub lambda5: f64,
    /// Style discriminator and its flipped-label encoder update.
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.25, lambda3: 1.0, lambda4: 1.0, lambda5: 1.0, lambda6: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6];
        if let Some(i) = all.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weight lambda{} = {} must be non-negative", i + 1, all[i])));
        }
        Ok(())
    }
}

/// Ablation variants; each enables a subset of the sub-updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "I")]
    IBase,
    #[serde(rename = "II")]
    IIStyle,
    #[serde(rename = "III")]
    IIIContent,
    #[serde(rename = "IV")]
    IVStyleContent,
    #[serde(rename = "V")]
    VSemantic,
    #[serde(rename = "VI")]
    VIFull,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::IBase,
        AblationVariant::IIStyle,
        AblationVariant::IIIContent,
        AblationVariant::IVStyleContent,
        AblationVariant::VSemantic,
        AblationVariant::VIFull,
    ];

    pub fn roman(self) -> &'static str {
        ["I", "II", "III", "IV", "V", "VI"][self as usize]
    }

    pub fn title(self) -> &'static str {
        match self {
            AblationVariant::IBase => "Base",
            AblationVariant::IIStyle => "Base + Style",
            AblationVariant::IIIContent => "Base + Content",
            AblationVariant::IVStyleContent => "Base + Style + Content",
            AblationVariant::VSemantic => "Base + Semantic Alignment",
            AblationVariant::VIFull => "Full",
        }
    }

    pub fn style(self) -> bool {
        matches!(self, AblationVariant::IIStyle | AblationVariant::IVStyleContent | AblationVariant::VIFull)
    }

    pub fn content(self) -> bool {
        matches!(self, AblationVariant::IIIContent | AblationVariant::IVStyleContent | AblationVariant::VIFull)
    }

    pub fn semantic(self) -> bool {
        matches!(self, AblationVariant::VSemantic | AblationVariant::VIFull)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.roman().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}; expected one of I, II, III, IV, V, VI")))
    }
}

/// One video's frame features with its sentence.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub id: String,
    pub domain: Domain,
    pub sentence: String,
    pub features: Tensor<f32>,
    pub tokens: TokenSequence,
}

impl SequenceSample {
    pub fn new(id: String, domain: Domain, sentence: String, features: Tensor<f32>, max_phrase_len: usize) -> Result<Self> {
        let tokens = TokenSequence::encode(&sentence, max_phrase_len)?;
        if features.rows() == 0 {
            return Err(Error::InvalidArgument(format!("sample {id} has no frames")));
        }
        Ok(Self { id, domain, sentence, features, tokens })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Validation interval in iterations (0 disables checkpoint selection).
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { iterations: 3000, batch_size: 8, lr: 1e-4, eval_every: 250, seed: 0 }
    }
}

/// Scalars logged after each iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    /// Unweighted loss terms by name.
    pub losses: BTreeMap<String, f64>,
    /// Weighted total over the logged terms.
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ter: Option<f64>,
}

pub const TERM_CLS: &str = "cls";
pub const TERM_ADV_M: &str = "adv_m";
pub const TERM_ADV_DM: &str = "adv_dm";
pub const TERM_ADV_ES: &str = "adv_es";
pub const TERM_ADV_DC: &str = "adv_dc";
pub const TERM_ADV_DS: &str = "adv_ds";

/// Weighted sum of whichever terms are present.
pub fn weighted_total(losses: &BTreeMap<String, f64>, w: &LossWeights) -> f64 {
    let weight = |k: &str| match k {
        TERM_CLS => w.lambda1,
        TERM_ADV_M => w.lambda2,
        TERM_ADV_DM => w.lambda3,
        TERM_ADV_ES => w.lambda4,
        TERM_ADV_DC => w.lambda5,
        TERM_ADV_DS => w.lambda6,
        _ => 0.0,
    };
    losses.iter().map(|(k, v)| weight(k) * v).sum()
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub iteration: u64,
    pub val_ter: f64,
    pub model: DisentangleModel<f32>,
}

/// Everything needed to continue training exactly where it stopped. Batch
/// draws and dropout masks are derived from `(seed, iteration)`, so no RNG
/// stream has to be stored.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub seed: u64,
    pub model: DisentangleModel<f32>,
    optimizers: Vec<Adam<f32>>,
    pub best: Option<BestCheckpoint>,
}

const STATE_MAGIC: &[u8; 4] = b"KSTS";

/// Changes whenever training dynamics or the state format change; cached
/// pipeline stages include it in their keys.
pub const TRAINER_REVISION: u32 = 4;

impl TrainState {
    pub fn new(model: DisentangleModel<f32>, lr: f64, seed: u64) -> Self {
        let optimizers = COMPONENTS.iter().map(|&c| Adam::new(lr, model.params(c))).collect();
        Self { iteration: 0, seed, model, optimizers, best: None }
    }

    fn step_component(&mut self, c: ComponentId, bound: &crate::params::Bound, grads: &crate::graph::Grads<f32>) {
        let i = COMPONENTS.iter().position(|&x| x == c).expect("known component");
        self.optimizers[i].step(self.model.params_mut(c), bound, grads);
    }

    /// The selected checkpoint, or the current model when none was selected.
    pub fn final_model(&self) -> &DisentangleModel<f32> {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(STATE_MAGIC)?;
        binio::write_u64(w, self.iteration)?;
        binio::write_u64(w, self.seed)?;
        self.model.write_to(w)?;
        for o in &self.optimizers {
            binio::write_str(w, &o.lr.to_string())?;
            o.write_to(w)?;
        }
        match &self.best {
            None => binio::write_u32(w, 0)?,
            Some(b) => {
                binio::write_u32(w, 1)?;
                binio::write_u64(w, b.iteration)?;
                w.write_all(&b.val_ter.to_le_bytes())?;
                b.model.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, STATE_MAGIC)?;
        let iteration = binio::read_u64(r)?;
        let seed = binio::read_u64(r)?;
        let model = DisentangleModel::read_from(r)?;
        let mut state = Self::new(model, 0.0, seed);
        state.iteration = iteration;
        for o in &mut state.optimizers {
            o.lr = binio::read_str(r)?.parse().map_err(|e| Error::Format(format!("learning rate: {e}")))?;
            o.read_from(r)?;
        }
        if binio::read_u32(r)? == 1 {
            let iteration = binio::read_u64(r)?;
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let model = DisentangleModel::read_from(r)?;
            state.best = Some(BestCheckpoint { iteration, val_ter: f64::from_le_bytes(b), model });
        }
        Ok(state)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::at(path, e))?);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::at(path, e))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::at(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}

fn check(term: &str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { term: term.into(), iteration })
    }
}

/// Draws `b` distinct samples (with replacement only when the pool is smaller).
fn draw<'a>(pool: &'a [SequenceSample], b: usize, rng: &mut impl Rng) -> Vec<&'a SequenceSample> {
    if pool.len() >= b {
        sample(rng, pool.len(), b).into_iter().map(|i| &pool[i]).collect()
    } else {
        (0..b).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
    }
}

fn prepare(
    samples: &[&SequenceSample],
    max_len: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Vec<PaddedFrames<f32>>> {
    samples.iter().map(|s| sample_or_pad_frames(&s.features, max_len, mode, rng)).collect()
}

fn valid_len(frames: &[PaddedFrames<f32>]) -> usize {
    frames.iter().map(|f| f.mask.iter().rposition(|&m| m).map_or(1, |p| p + 1)).max().unwrap_or(1)
}

fn slice(g: &mut Graph<f32>, e: &Encoded, start: usize, n: usize) -> Encoded {
    let var = g.slice_rows(e.var, start * e.len, n * e.len);
    Encoded { var, batch: n, len: e.len, mask: e.mask[start * e.len..(start + n) * e.len].to_vec() }
}

fn concat(g: &mut Graph<f32>, parts: &[&Encoded]) -> Encoded {
    let var = g.concat_rows(&parts.iter().map(|e| e.var).collect::<Vec<_>>());
    Encoded {
        var,
        batch: parts.iter().map(|e| e.batch).sum(),
        len: parts[0].len,
        mask: parts.iter().flat_map(|e| e.mask.iter().copied()).collect(),
    }
}

fn detach(g: &mut Graph<f32>, e: &Encoded) -> Encoded {
    Encoded { var: g.detach(e.var), ..e.clone() }
}

/// One iteration of the disentanglement algorithm: style disentanglement
/// (D_S then E_C), content disentanglement (D_C then E_S), sequence prediction
/// (E_C, E_S, M, G), semantic alignment (D_M then M, E_C, E_S). Sub-updates
/// not enabled by `variant` are skipped.
pub fn train_step(
    state: &mut TrainState,
    synthetic: &[SequenceSample],
    real: &[SequenceSample],
    weights: &LossWeights,
    variant: AblationVariant,
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::InvalidArgument("training needs synthetic and real samples".into()));
    }
    let it = state.iteration;
    let b = batch_size.max(1);
    let cfg = state.model.config.clone();
    let mut rng = stream(state.seed, &format!("step/{it}"));
    let mut drop = Dropout::train(cfg.dropout, stream(state.seed, &format!("dropout/{it}")));
    let syn = draw(synthetic, b, &mut rng);
    let rl = draw(real, b, &mut rng);
    let all: Vec<&SequenceSample> = syn.iter().chain(rl.iter()).copied().collect();
    let frames = prepare(&all, cfg.max_seq_len, SampleMode::Train, &mut rng)?;
    let len = valid_len(&frames);
    let refs: Vec<&PaddedFrames<f32>> = frames.iter().collect();
    let (x, len, mask) = pack_frames_to(&refs, len);
    let tokens: Vec<&TokenSequence> = all.iter().map(|s| &s.tokens).collect();
    let plen = TeacherBatch::prefix_len(&tokens);
    let mut losses = BTreeMap::new();

    if variant.style() {
        let mut g = Graph::new();
        let ec = state.model.bind(&mut g, ComponentId::ContentEncoder, true);
        let xv = g.constant(x.clone());
        let content = state.model.encode(&mut g, &ec, xv, 2 * b, len, &mask, &mut drop);
        let pooled = state.model.pool(&mut g, &content)?;
        let frozen = g.detach(pooled);
        let ds = state.model.bind(&mut g, ComponentId::StyleDiscriminator, true);
        let z = state.model.style_logits(&mut g, &ds, frozen);
        let (zs, zr) = (g.slice_rows(z, 0, b), g.slice_rows(z, b, b));
        let l = loss_style_disc(&mut g, zs, zr, false);
        losses.insert(TERM_ADV_DS.into(), check(TERM_ADV_DS, g.value(l).item() as f64, it)?);
        let l = g.scale(l, weights.lambda6 as f32);
        let grads = g.backward(l);
        state.step_component(ComponentId::StyleDiscriminator, &ds, &grads);

        let ds = state.model.bind(&mut g, ComponentId::StyleDiscriminator, false);
        let z = state.model.style_logits(&mut g, &ds, pooled);
        let (zs, zr) = (g.slice_rows(z, 0, b), g.slice_rows(z, b, b));
        let l = loss_style_disc(&mut g, zs, zr, true);
        check("style encoder", g.value(l).item() as f64, it)?;
        let l = g.scale(l, weights.lambda6 as f32);
        let grads = g.backward(l);
        state.step_component(ComponentId::ContentEncoder, &ec, &grads);
    }

    if variant.content() {
        let mut g = Graph::new();
        let es = state.model.bind(&mut g, ComponentId::StyleEncoder, true);
        let xv = g.constant(x.clone());
        let style = state.model.encode(&mut g, &es, xv, 2 * b, len, &mask, &mut drop);
        let frozen = detach(&mut g, &style);
        let teacher = TeacherBatch::new(&tokens, plen);
        let dc = state.model.bind(&mut g, ComponentId::ContentDiscriminator, true);
        let z = state.model.decode(&mut g, &dc, &teacher.inputs, plen, &frozen, &mut drop);
        let l = loss_content_disc(&mut g, z, &teacher.targets);
        losses.insert(TERM_ADV_DC.into(), check(TERM_ADV_DC, g.value(l).item() as f64, it)?);
        let l = g.scale(l, weights.lambda5 as f32);
        let grads = g.backward(l);
        state.step_component(ComponentId::ContentDiscriminator, &dc, &grads);

        // Entropy on the synthetic half, with D_C frozen.
        let dc = state.model.bind(&mut g, ComponentId::ContentDiscriminator, false);
        let syn_style = slice(&mut g, &style, 0, b);
        let (ids, targets) = teacher.samples(0, b);
        let z = state.model.decode(&mut g, &dc, ids, plen, &syn_style, &mut drop);
        let valid: Vec<bool> = targets.iter().map(Option::is_some).collect();
        let h = loss_style_entropy(&mut g, z, &valid);
        losses.insert(TERM_ADV_ES.into(), check(TERM_ADV_ES, g.value(h).item() as f64, it)?);
        let l = g.scale(h, -(weights.lambda4 as f32));
        let grads = g.backward(l);
        state.step_component(ComponentId::StyleEncoder, &es, &grads);
    }

    // Sequence prediction over the four pairings; labels follow the content input.
    {
        let mut g = Graph::new();
        let ec = state.model.bind(&mut g, ComponentId::ContentEncoder, true);
        let es = state.model.bind(&mut g, ComponentId::StyleEncoder, true);
        let m = state.model.bind(&mut g, ComponentId::Aggregator, true);
        let dg = state.model.bind(&mut g, ComponentId::Decoder, true);
        let xv = g.constant(x.clone());
        let content = state.model.encode(&mut g, &ec, xv, 2 * b, len, &mask, &mut drop);
        let style = state.model.encode(&mut g, &es, xv, 2 * b, len, &mask, &mut drop);
        let memory = paired_memory(&state.model, &mut g, &m, &style, &content, b);
        let content_tokens: Vec<&TokenSequence> =
            [&tokens[..b], &tokens[..b], &tokens[b..], &tokens[b..]].concat();
        let teacher = TeacherBatch::new(&content_tokens, plen);
        let z = state.model.decode(&mut g, &dg, &teacher.inputs, plen, &memory, &mut drop);
        let parts: Vec<Var> = (0..4).map(|k| g.slice_rows(z, k * b * plen, b * plen)).collect();
        let pairs: Vec<(Var, &[Option<usize>])> =
            (0..4).map(|k| (parts[k], teacher.samples(k * b, b).1)).collect();
        let l = loss_classification(&mut g, &pairs);
        losses.insert(TERM_CLS.into(), check(TERM_CLS, g.value(l).item() as f64, it)?);
        let l = g.scale(l, weights.lambda1 as f32);
        let grads = g.backward(l);
        for (c, bound) in [
            (ComponentId::ContentEncoder, &ec),
            (ComponentId::StyleEncoder, &es),
            (ComponentId::Aggregator, &m),
            (ComponentId::Decoder, &dg),
        ] {
            state.step_component(c, bound, &grads);
        }
    }

    if variant.semantic() {
        let mut g = Graph::new();
        let ec = state.model.bind(&mut g, ComponentId::ContentEncoder, true);
        let es = state.model.bind(&mut g, ComponentId::StyleEncoder, true);
        let m = state.model.bind(&mut g, ComponentId::Aggregator, true);
        let xv = g.constant(x.clone());
        let content = state.model.encode(&mut g, &ec, xv, 2 * b, len, &mask, &mut drop);
        let style = state.model.encode(&mut g, &es, xv, 2 * b, len, &mask, &mut drop);
        let memory = paired_memory(&state.model, &mut g, &m, &style, &content, b);
        let pooled = state.model.pool(&mut g, &memory)?;
        let frozen = g.detach(pooled);
        let dm = state.model.bind(&mut g, ComponentId::GroupDiscriminator, true);
        let z = state.model.group_logits(&mut g, &dm, frozen);
        let labels: Vec<usize> = (0..4 * b).map(|i| i / b).collect();
        let l = loss_group_disc(&mut g, z, &labels);
        losses.insert(TERM_ADV_DM.into(), check(TERM_ADV_DM, g.value(l).item() as f64, it)?);
        let l = g.scale(l, weights.lambda3 as f32);
        let grads = g.backward(l);
        state.step_component(ComponentId::GroupDiscriminator, &dm, &grads);

        let dm = state.model.bind(&mut g, ComponentId::GroupDiscriminator, false);
        let z = state.model.group_logits(&mut g, &dm, pooled);
        let (z2, z4) = (g.slice_rows(z, b, b), g.slice_rows(z, 3 * b, b));
        let l = loss_semantic_align(&mut g, z2, z4);
        losses.insert(TERM_ADV_M.into(), check(TERM_ADV_M, g.value(l).item() as f64, it)?);
        let l = g.scale(l, weights.lambda2 as f32);
        let grads = g.backward(l);
        for (c, bound) in
            [(ComponentId::ContentEncoder, &ec), (ComponentId::StyleEncoder, &es), (ComponentId::Aggregator, &m)]
        {
            state.step_component(c, bound, &grads);
        }
    }

    state.iteration += 1;
    Ok(losses)
}

/// Aggregated memories for G1..G4, stacked in that order (`4b` samples).
fn paired_memory(
    model: &DisentangleModel<f32>,
    g: &mut Graph<f32>,
    m: &crate::params::Bound,
    style: &Encoded,
    content: &Encoded,
    b: usize,
) -> Encoded {
    let (s_syn, s_real) = (slice(g, style, 0, b), slice(g, style, b, b));
    let (c_syn, c_real) = (slice(g, content, 0, b), slice(g, content, b, b));
    let styles = concat(g, &[&s_syn, &s_real, &s_syn, &s_real]);
    let contents = concat(g, &[&c_syn, &c_syn, &c_real, &c_real]);
    model.aggregate(g, m, &styles, &contents)
}

/// One supervised step on the shared-encoder path `G(M(E_C(x) + E_C(x)))`,
/// used for synthetic pretraining and for the finetuning baseline.
pub fn tied_step(state: &mut TrainState, pool: &[SequenceSample], batch_size: usize) -> Result<BTreeMap<String, f64>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let it = state.iteration;
    let cfg = state.model.config.clone();
    let mut rng = stream(state.seed, &format!("step/{it}"));
    let mut drop = Dropout::train(cfg.dropout, stream(state.seed, &format!("dropout/{it}")));
    let batch = draw(pool, batch_size.max(1), &mut rng);
    let n = batch.len();
    let frames = prepare(&batch, cfg.max_seq_len, SampleMode::Train, &mut rng)?;
    let refs: Vec<&PaddedFrames<f32>> = frames.iter().collect();
    let (x, len, mask) = pack_frames_to(&refs, valid_len(&frames));
    let tokens: Vec<&TokenSequence> = batch.iter().map(|s| &s.tokens).collect();
    let plen = TeacherBatch::prefix_len(&tokens);
    let teacher = TeacherBatch::new(&tokens, plen);
    let mut g = Graph::new();
    let ec = state.model.bind(&mut g, ComponentId::ContentEncoder, true);
    let m = state.model.bind(&mut g, ComponentId::Aggregator, true);
    let dg = state.model.bind(&mut g, ComponentId::Decoder, true);
    let xv = g.constant(x);
    let e = state.model.encode(&mut g, &ec, xv, n, len, &mask, &mut drop);
    let memory = state.model.aggregate(&mut g, &m, &e, &e);
    let z = state.model.decode(&mut g, &dg, &teacher.inputs, plen, &memory, &mut drop);
    let l = g.cross_entropy(z, &teacher.targets);
    let value = check(TERM_CLS, g.value(l).item() as f64, it)?;
    let grads = g.backward(l);
    for (c, bound) in [(ComponentId::ContentEncoder, &ec), (ComponentId::Aggregator, &m), (ComponentId::Decoder, &dg)] {
        state.step_component(c, bound, &grads);
    }
    // Keep the style encoder tied to the content encoder.
    let ec_params = state.model.params(ComponentId::ContentEncoder).clone();
    state.model.params_mut(ComponentId::StyleEncoder).copy_from(&ec_params)?;
    state.iteration += 1;
    Ok(BTreeMap::from([(TERM_CLS.to_string(), value)]))
}

/// Greedy predictions for samples (evenly spaced frames when too long).
pub fn predict(model: &DisentangleModel<f32>, samples: &[SequenceSample]) -> Result<Vec<String>> {
    let mut rng = stream(0, "eval");
    let frames: Vec<PaddedFrames<f32>> = samples
        .iter()
        .map(|s| sample_or_pad_frames(&s.features, model.config.max_seq_len, SampleMode::Eval, &mut rng))
        .collect::<Result<_>>()?;
    let refs: Vec<&PaddedFrames<f32>> = frames.iter().collect();
    model.greedy_decode(&refs)
}

/// Mean per-sentence TER of the model's predictions.
pub fn mean_ter(model: &DisentangleModel<f32>, samples: &[SequenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let preds = predict(model, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        let (p, r) = (normalise(p), normalise(&s.sentence));
        total += ter(&tokenize(&p), &tokenize(&r))?;
    }
    Ok(total / samples.len() as f64)
}

/// Kind of training loop driven by [`run_training`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Shared-encoder cross-entropy on one pool.
    Supervised,
    /// Disentanglement with the given variant.
    Disentangle(AblationVariant),
}

/// Runs `opts.iterations` total iterations (continuing from `state`),
/// validating every `opts.eval_every` and keeping the checkpoint with the
/// lowest validation TER. `on_record` receives each log record.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    state: &mut TrainState,
    objective: Objective,
    synthetic: &[SequenceSample],
    real: &[SequenceSample],
    validation: &[SequenceSample],
    weights: &LossWeights,
    opts: &TrainOptions,
    on_record: &mut dyn FnMut(&TrainState, &LogRecord) -> Result<()>,
) -> Result<()> {
    weights.validate()?;
    let start = Instant::now();
    while state.iteration < opts.iterations {
        let losses = match objective {
            Objective::Supervised => tied_step(state, if real.is_empty() { synthetic } else { real }, opts.batch_size)?,
            Objective::Disentangle(v) => train_step(state, synthetic, real, weights, v, opts.batch_size)?,
        };
        let mut val_ter = None;
        let done = state.iteration;
        if opts.eval_every > 0 && !validation.is_empty() && (done % opts.eval_every == 0 || done == opts.iterations) {
            let t = mean_ter(&state.model, validation)?;
            val_ter = Some(t);
            if state.best.as_ref().map_or(true, |b| t < b.val_ter) {
                state.best = Some(BestCheckpoint { iteration: done, val_ter: t, model: state.model.clone() });
            }
            info!("iteration {done}: validation TER {t:.4}");
        }
        let record = LogRecord {
            iteration: done,
            total: weighted_total(&losses, weights),
            losses,
            lr: opts.lr,
            wall_time: start.elapsed().as_secs_f64(),
            val_ter,
        };
        debug!("{record:?}");
        on_record(state, &record)?;
    }
    Ok(())
}

/// Trains the shared encoder, aggregation and decoder on synthetic data; the
/// style encoder leaves training as a copy of the content encoder.
pub fn pretrain_synthetic(
    config: crate::nets::ModelConfig,
    train: &[SequenceSample],
    validation: &[SequenceSample],
    opts: &TrainOptions,
    on_record: &mut dyn FnMut(&TrainState, &LogRecord) -> Result<()>,
) -> Result<TrainState> {
    let model = DisentangleModel::new(config, opts.seed)?;
    let mut state = TrainState::new(model, opts.lr, opts.seed);
    run_training(&mut state, Objective::Supervised, train, &[], validation, &LossWeights::default(), opts, on_record)?;
    Ok(state)
}

/// Continues from a pretrained model with fresh optimisers and a new seed.
pub fn start_from(pretrained: &DisentangleModel<f32>, lr: f64, seed: u64) -> TrainState {
    TrainState::new(pretrained.clone(), lr, seed)
}

/// Cross-entropy finetuning of the shared encoder/decoder on real data.
pub fn finetune_baseline(
    pretrained: &DisentangleModel<f32>,
    train: &[SequenceSample],
    validation: &[SequenceSample],
    opts: &TrainOptions,
    on_record: &mut dyn FnMut(&TrainState, &LogRecord) -> Result<()>,
) -> Result<TrainState> {
    let mut state = start_from(pretrained, opts.lr, opts.seed);
    run_training(&mut state, Objective::Supervised, &[], train, validation, &LossWeights::default(), opts, on_record)?;
    Ok(state)
}

/// Disentanglement training of one ablation variant from a pretrained model.
#[allow(clippy::too_many_arguments)]
pub fn train_variant(
    pretrained: &DisentangleModel<f32>,
    variant: AblationVariant,
    synthetic: &[SequenceSample],
    real: &[SequenceSample],
    validation: &[SequenceSample],
    weights: &LossWeights,
    opts: &TrainOptions,
    on_record: &mut dyn FnMut(&TrainState, &LogRecord) -> Result<()>,
) -> Result<TrainState> {
    let mut state = start_from(pretrained, opts.lr, opts.seed);
    run_training(&mut state, Objective::Disentangle(variant), synthetic, real, validation, weights, opts, on_record)?;
    Ok(state)
}
