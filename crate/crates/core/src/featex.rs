//! Single-keypress CNN: training, adversarial alignment to a second domain,
//! and per-frame feature extraction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::nn::Linear;
use crate::params::{he_normal, Adam, Bound, ParamId, Params};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::simulator::{Domain, FrameStack, KeypressSet};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 128;
pub const NUM_KEYS: usize = 27;
const MAGIC: &[u8; 4] = b"KSFX";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 3],
    pub kernel: usize,
    pub feature_dim: usize,
}

impl CnnConfig {
    pub fn desk() -> Self {
        Self { height: 25, width: 50, channels: [8, 16, 32], kernel: 3, feature_dim: FEATURE_DIM }
    }

    pub fn paper() -> Self {
        Self { height: 100, width: 200, channels: [16, 32, 64], kernel: 3, feature_dim: FEATURE_DIM }
    }

    /// Spatial size after each of the three pooling stages.
    fn stage_dims(&self) -> [(usize, usize); 4] {
        let mut d = [(self.height, self.width); 4];
        for i in 1..4 {
            d[i] = (d[i - 1].0 / 2, d[i - 1].1 / 2);
        }
        d
    }

    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.stage_dims()[3];
        self.channels[2] * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.stage_dims()[3];
        if h == 0 || w == 0 || self.kernel % 2 == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!("unusable CNN configuration {self:?}")));
        }
        Ok(())
    }
}

/// Three conv/ReLU/max-pool blocks, a 128-wide feature layer and a 27-way head.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub config: CnnConfig,
    pub domain: Domain,
    params: Params<T>,
    convs: [(ParamId, ParamId); 3],
    fc: Linear,
    head: Linear,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(config: CnnConfig, domain: Domain, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "cnn-init");
        let mut params = Params::new();
        let mut in_ch = 1;
        let mut convs = Vec::new();
        for (i, &out) in config.channels.iter().enumerate() {
            let fan_in = in_ch * config.kernel * config.kernel;
            let w = params.add(format!("conv{i}.w"), he_normal(&mut rng, vec![out, fan_in], fan_in));
            let b = params.add(format!("conv{i}.b"), Tensor::zeros(vec![out]));
            convs.push((w, b));
            in_ch = out;
        }
        let fc = Linear::new(&mut params, &mut rng, "fc", config.flat_dim(), config.feature_dim);
        let head = Linear::new(&mut params, &mut rng, "head", config.feature_dim, NUM_KEYS);
        Ok(Self { config, domain, params, convs: [convs[0], convs[1], convs[2]], fc, head })
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn frame_len(&self) -> usize {
        self.config.height * self.config.width
    }

    /// `(features, logits)` for a batch `x` of `[batch, 1, H, W]` frames.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var, batch: usize) -> (Var, Var) {
        let dims = self.config.stage_dims();
        let mut h = x;
        let mut in_ch = 1;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            let out_ch = self.config.channels[i];
            let geom = ConvGeom {
                batch,
                in_ch,
                out_ch,
                height: dims[i].0,
                width: dims[i].1,
                kernel: self.config.kernel,
            };
            h = g.conv2d(h, bound.get(w), bound.get(b), geom);
            h = g.relu(h);
            h = g.max_pool2d(h);
            in_ch = out_ch;
        }
        let flat = g.reshape(h, vec![batch, self.config.flat_dim()]);
        let f = self.fc.forward(g, bound, flat);
        let f = g.relu(f);
        let logits = self.head.forward(g, bound, f);
        (f, logits)
    }

    fn check_frames(&self, frames: &FrameStack) -> Result<()> {
        if (frames.height, frames.width) != (self.config.height, self.config.width) {
            return Err(Error::Shape {
                expected: format!("{}x{} frames", self.config.height, self.config.width),
                actual: format!("{}x{} frames", frames.height, frames.width),
            });
        }
        Ok(())
    }

    fn batch_tensor(&self, frames: &FrameStack, idx: &[usize]) -> Tensor<T> {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(frames.frame(i).iter().map(|&v| T::from_single(v)));
        }
        Tensor::new(vec![idx.len(), 1, self.config.height, self.config.width], data)
    }

    /// Features and logits for every frame, computed in batches without
    /// recording gradients.
    pub fn infer(&self, frames: &FrameStack) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_frames(frames)?;
        let n = frames.len();
        let mut feats = Vec::with_capacity(n * self.config.feature_dim);
        let mut logits = Vec::with_capacity(n * NUM_KEYS);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(256) {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, false);
            let x = g.constant(self.batch_tensor(frames, chunk));
            let (f, l) = self.forward(&mut g, &bound, x, chunk.len());
            feats.extend_from_slice(g.value(f).data());
            logits.extend_from_slice(g.value(l).data());
        }
        Ok((Tensor::matrix(n, self.config.feature_dim, feats), Tensor::matrix(n, NUM_KEYS, logits)))
    }

    pub fn extract(&self, frames: &FrameStack) -> Result<Tensor<T>> {
        Ok(self.infer(frames)?.0)
    }

    pub fn predict(&self, frames: &FrameStack) -> Result<Vec<usize>> {
        let (_, logits) = self.infer(frames)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn accuracy(&self, set: &KeypressSet) -> Result<f64> {
        let pred = self.predict(&set.images)?;
        let hits = pred.iter().zip(&set.labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / set.labels.len().max(1) as f64)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_str(w, &serde_json::to_string(&self.config)?)?;
        binio::write_str(w, self.domain.as_str())?;
        self.params.write_to(w)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, MAGIC)?;
        let v = binio::read_u32(r)?;
        if v != VERSION {
            return Err(Error::Format(format!("extractor checkpoint version {v}, expected {VERSION}")));
        }
        let config: CnnConfig = serde_json::from_str(&binio::read_str(r)?)?;
        let domain: Domain = binio::read_str(r)?.parse()?;
        let mut ex = Self::new(config, domain, 0)?;
        ex.params.read_into(r)?;
        Ok(ex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::at(path, e))?);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path).map_err(|e| Error::at(path, e))?))
    }
}

pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `k x 128` feature matrix for a rendered video.
pub fn extract_features<T: Scalar>(frames: &FrameStack, extractor: &FeatureExtractor<T>) -> Result<Tensor<T>> {
    extractor.extract(frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Merges keypress sets of equal frame size (e.g. one per domain).
pub fn concat_sets(sets: &[&KeypressSet]) -> Result<KeypressSet> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("no keypress sets".into()))?;
    let mut images = FrameStack::empty(first.images.height, first.images.width);
    let mut labels = Vec::new();
    for s in sets {
        if (s.images.height, s.images.width) != (images.height, images.width) {
            return Err(Error::Shape {
                expected: format!("{}x{}", images.height, images.width),
                actual: format!("{}x{}", s.images.height, s.images.width),
            });
        }
        images.data.extend_from_slice(&s.images.data);
        labels.extend_from_slice(&s.labels);
    }
    Ok(KeypressSet { images, labels })
}

pub fn train_keypress_classifier(
    train: &KeypressSet,
    val: Option<&KeypressSet>,
    config: CnnConfig,
    domain: Domain,
    opts: &ClassifierOptions,
) -> Result<(FeatureExtractor<f32>, ClassifierReport)> {
    let mut present = [false; NUM_KEYS];
    for &l in &train.labels {
        if l >= NUM_KEYS {
            return Err(Error::InvalidArgument(format!("label {l} outside the 27 keys")));
        }
        present[l] = true;
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::InvalidArgument(format!("class {missing} has no training images")));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = FeatureExtractor::<f32>::new(config, domain, opts.seed)?;
    model.check_frames(&train.images)?;
    let mut adam = Adam::new(opts.lr, model.params());
    let mut rng = stream(opts.seed, "cnn-train");
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    let mut report = ClassifierReport::default();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let x = g.constant(model.batch_tensor(&train.images, chunk));
            let (_, logits) = model.forward(&mut g, &bound, x, chunk.len());
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train.labels[i])).collect();
            let loss = g.cross_entropy(logits, &targets);
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(Error::Diverged { term: "keypress cross-entropy".into(), iteration: epoch as u64 });
            }
            total += l;
            batches += 1;
            let grads = g.backward(loss);
            adam.step(&mut model.params, &bound, &grads);
        }
        let mean = total / batches.max(1) as f64;
        info!("keypress epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    report.train_accuracy = model.accuracy(train)?;
    report.val_accuracy = val.map(|v| model.accuracy(v)).transpose()?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Target extractor learning rate.
    pub lr: f64,
    pub discriminator_lr: f64,
    /// Discriminator updates per extractor update.
    pub discriminator_steps: usize,
    /// First-moment decay for both Adam optimisers.
    pub beta1: f64,
    pub seed: u64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 64, lr: 5e-5, discriminator_lr: 5e-4, discriminator_steps: 2, beta1: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub discriminator_losses: Vec<f64>,
    pub spoof_losses: Vec<f64>,
}

/// One hidden layer of width 128 with ReLU, then a single logit (the sigmoid
/// is folded into the loss).
#[derive(Clone, Debug)]
struct DomainDiscriminator {
    hidden: Linear,
    out: Linear,
    shift: Vec<f32>,
    inv_scale: Vec<f32>,
}

impl DomainDiscriminator {
    const WIDTH: usize = 128;

    /// Inputs are standardised with fixed statistics of the reference
    /// features so that low-magnitude dimensions are not ignored.
    fn new(p: &mut Params<f32>, rng: &mut impl Rng, reference: &Tensor<f32>) -> Self {
        let (n, dim) = (reference.rows(), reference.cols());
        let mut shift = vec![0.0f32; dim];
        let mut var = vec![0.0f32; dim];
        for r in 0..n {
            for (m, v) in shift.iter_mut().zip(reference.row(r)) {
                *m += v / n as f32;
            }
        }
        for r in 0..n {
            for ((s, m), v) in var.iter_mut().zip(&shift).zip(reference.row(r)) {
                *s += (v - m).powi(2) / n as f32;
            }
        }
        let inv_scale = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-2)).collect();
        let hidden = Linear::new(p, rng, "domain.hidden", dim, Self::WIDTH);
        let out = Linear::new(p, rng, "domain.out", Self::WIDTH, 1);
        Self { hidden, out, shift, inv_scale }
    }

    fn forward(&self, g: &mut Graph<f32>, bound: &Bound, x: Var) -> Var {
        let rows = g.value(x).rows();
        let shift = g.constant(Tensor::matrix(1, self.shift.len(), self.shift.iter().map(|v| -v).collect()));
        let scale = g.constant(Tensor::matrix(rows, self.inv_scale.len(), self.inv_scale.repeat(rows)));
        let x = g.add_row(x, shift);
        let x = g.mul(x, scale);
        let h = self.hidden.forward(g, bound, x);
        let h = g.relu(h);
        self.out.forward(g, bound, h)
    }
}

/// Adversarial alignment: a copy of `source` is trained so that a one-layer
/// domain discriminator cannot tell its target features from the source
/// extractor's source features. `source` itself is never modified.
pub fn align_extractor(
    source: &FeatureExtractor<f32>,
    source_frames: &FrameStack,
    target_frames: &FrameStack,
    opts: &AlignOptions,
) -> Result<(FeatureExtractor<f32>, AlignReport)> {
    if target_frames.is_empty() || source_frames.is_empty() {
        return Err(Error::InvalidArgument("alignment needs non-empty source and target frames".into()));
    }
    source.check_frames(source_frames)?;
    source.check_frames(target_frames)?;
    let mut target = source.clone();
    target.domain = Domain::PseudoReal;
    let mut report = AlignReport::default();
    if opts.steps == 0 {
        return Ok((target, report));
    }
    let mut rng = stream(opts.seed, "adda");
    // The source extractor is frozen, so its features are computed once.
    let source_features = source.extract(source_frames)?;
    let dim = source.config.feature_dim;
    let mut disc = Params::<f32>::new();
    let d = DomainDiscriminator::new(&mut disc, &mut rng, &source_features);
    let mut d_opt = Adam::new(opts.discriminator_lr, &disc);
    let mut t_opt = Adam::new(opts.lr, target.params());
    d_opt.beta1 = opts.beta1;
    t_opt.beta1 = opts.beta1;
    let b = opts.batch_size.max(1);
    for step in 0..opts.steps {
        let mut dl = 0.0;
        for _ in 0..opts.discriminator_steps.max(1) {
            // Discriminator: source features labelled 1, target features 0.
            let mut both = Vec::with_capacity(2 * b * dim);
            for _ in 0..b {
                both.extend_from_slice(source_features.row(rng.gen_range(0..source_frames.len())));
            }
            let ti: Vec<usize> = (0..b).map(|_| rng.gen_range(0..target_frames.len())).collect();
            both.extend(target.infer_batch(target_frames, &ti).into_data());
            let mut g = Graph::new();
            let db = disc.bind(&mut g, true);
            let x = g.constant(Tensor::matrix(2 * b, dim, both));
            let z = d.forward(&mut g, &db, x);
            let labels: Vec<f32> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
            let loss = g.bce_logits(z, &labels);
            dl = g.value(loss).item() as f64;
            let grads = g.backward(loss);
            d_opt.step(&mut disc, &db, &grads);
        }

        // Target extractor: make target features look like source ones.
        let ti: Vec<usize> = (0..b).map(|_| rng.gen_range(0..target_frames.len())).collect();
        let mut g = Graph::new();
        let tb = target.params.bind(&mut g, true);
        let db = disc.bind(&mut g, false);
        let x = g.constant(target.batch_tensor(target_frames, &ti));
        let (f, _) = target.forward(&mut g, &tb, x, b);
        let z = d.forward(&mut g, &db, f);
        let loss = g.bce_logits(z, &vec![1.0; b]);
        let tl = g.value(loss).item() as f64;
        if !dl.is_finite() || !tl.is_finite() {
            return Err(Error::Diverged { term: "domain alignment".into(), iteration: step as u64 });
        }
        let grads = g.backward(loss);
        t_opt.step(&mut target.params, &tb, &grads);
        report.discriminator_losses.push(dl);
        report.spoof_losses.push(tl);
    }
    Ok((target, report))
}

impl FeatureExtractor<f32> {
    fn infer_batch(&self, frames: &FrameStack, idx: &[usize]) -> Tensor<f32> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(self.batch_tensor(frames, idx));
        let (f, _) = self.forward(&mut g, &bound, x, idx.len());
        g.value(f).clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainProbeOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of each domain held out for scoring.
    pub held_out: f64,
    pub seed: u64,
}

impl Default for DomainProbeOptions {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 1e-3, held_out: 0.3, seed: 0 }
    }
}

/// Held-out accuracy of a freshly trained domain discriminator (same
/// architecture as the alignment one) separating `source` features from
/// `target` features. Both sets are truncated to the same size.
pub fn domain_probe_accuracy(source: &Tensor<f32>, target: &Tensor<f32>, opts: &DomainProbeOptions) -> Result<f64> {
    let n = source.rows().min(target.rows());
    if n < 4 || source.cols() != target.cols() {
        return Err(Error::InvalidArgument(format!(
            "domain probe needs matching feature widths and at least 4 rows per domain (got {}x{} and {}x{})",
            source.rows(),
            source.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let dim = source.cols();
    let mut rng = stream(opts.seed, "domain-probe");
    let split = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let k = ((n as f64 * opts.held_out).round() as usize).clamp(1, n - 1);
        let test = idx.split_off(n - k);
        (idx, test)
    };
    let (s_train, s_test) = split(&mut rng);
    let (t_train, t_test) = split(&mut rng);
    let mut rows: Vec<(&[f32], f32)> = s_train.iter().map(|&i| (source.row(i), 1.0)).collect();
    rows.extend(t_train.iter().map(|&i| (target.row(i), 0.0)));
    let pooled: Vec<f32> = rows.iter().flat_map(|(r, _)| r.iter().copied()).collect();
    let mut params = Params::<f32>::new();
    let disc = DomainDiscriminator::new(&mut params, &mut rng, &Tensor::matrix(rows.len(), dim, pooled));
    let mut adam = Adam::new(opts.lr, &params);
    let b = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        rows.shuffle(&mut rng);
        for chunk in rows.chunks(b) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(Tensor::matrix(chunk.len(), dim, chunk.iter().flat_map(|(r, _)| r.iter().copied()).collect()));
            let labels: Vec<f32> = chunk.iter().map(|(_, y)| *y).collect();
            let z = disc.forward(&mut g, &bound, x);
            let loss = g.bce_logits(z, &labels);
            let grads = g.backward(loss);
            adam.step(&mut params, &bound, &grads);
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut hits = 0;
    for (set, idx, label) in [(source, &s_test, true), (target, &t_test, false)] {
        let x = g.constant(Tensor::matrix(idx.len(), dim, idx.iter().flat_map(|&i| set.row(i).iter().copied()).collect()));
        let z = disc.forward(&mut g, &bound, x);
        hits += g.value(z).data().iter().filter(|&&v| (v > 0.0) == label).count();
    }
    Ok(hits as f64 / (s_test.len() + t_test.len()) as f64)
}
