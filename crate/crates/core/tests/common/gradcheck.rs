//! Tape-vs-finite-difference checks of each training objective, evaluated
//! through the real networks in f64.

use ksda::graph::{Graph, Var};
use ksda::nets::{pack_frames_to, sample_or_pad_frames, ComponentId, DisentangleModel, Dropout, Encoded, ModelConfig, SampleMode, COMPONENTS};
use ksda::params::Bound;
use ksda::rng::stream;
use ksda::tensor::Tensor;
use ksda::train::{loss_classification, loss_content_disc, loss_group_disc, loss_semantic_align, loss_style_disc, loss_style_entropy, TeacherBatch};
use ksda::vocab::{TokenSequence, VOCAB_SIZE};
use rand::Rng;

/// One layer, two heads, width 8.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        num_heads: 2,
        embed_dim: 8,
        hidden_dim: 16,
        dropout: 0.0,
        max_seq_len: 8,
        max_phrase_len: 10,
        vocab_size: VOCAB_SIZE,
        feature_dim: 5,
    }
}

struct Batch {
    x: Tensor<f64>,
    len: usize,
    mask: Vec<bool>,
    tokens: Vec<TokenSequence>,
    b: usize,
}

fn f64_batch(cfg: &ModelConfig) -> Batch {
    let mut rng = stream(11, "gc");
    let lens = [5, 8, 3, 6];
    let frames: Vec<_> = lens
        .iter()
        .map(|&n| {
            let t = Tensor::matrix(n, cfg.feature_dim, (0..n * cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            sample_or_pad_frames(&t, cfg.max_seq_len, SampleMode::Eval, &mut stream(0, "x")).unwrap()
        })
        .collect();
    let refs: Vec<_> = frames.iter().collect();
    let (x, len, mask) = pack_frames_to(&refs, cfg.max_seq_len);
    let tokens = ["ab", "cat", "do", "hi x"].iter().map(|s| TokenSequence::encode(s, cfg.max_phrase_len).unwrap()).collect();
    Batch { x, len, mask, tokens, b: 2 }
}

fn slice(g: &mut Graph<f64>, e: &Encoded, start: usize, n: usize) -> Encoded {
    let var = g.slice_rows(e.var, start * e.len, n * e.len);
    Encoded { var, batch: n, len: e.len, mask: e.mask[start * e.len..(start + n) * e.len].to_vec() }
}

fn concat(g: &mut Graph<f64>, parts: &[&Encoded]) -> Encoded {
    let var = g.concat_rows(&parts.iter().map(|e| e.var).collect::<Vec<_>>());
    Encoded {
        var,
        batch: parts.iter().map(|e| e.batch).sum(),
        len: parts[0].len,
        mask: parts.iter().flat_map(|e| e.mask.iter().copied()).collect(),
    }
}

pub struct Ctx<'a> {
    m: &'a DisentangleModel<f64>,
    bounds: Vec<Bound>,
    content: Encoded,
    style: Encoded,
    batch: &'a Batch,
}

impl Ctx<'_> {
    fn bound(&self, c: ComponentId) -> &Bound {
        &self.bounds[COMPONENTS.iter().position(|&x| x == c).unwrap()]
    }

    fn paired(&self, g: &mut Graph<f64>) -> Encoded {
        let b = self.batch.b;
        let (ss, sr) = (slice(g, &self.style, 0, b), slice(g, &self.style, b, b));
        let (cs, cr) = (slice(g, &self.content, 0, b), slice(g, &self.content, b, b));
        let styles = concat(g, &[&ss, &sr, &ss, &sr]);
        let contents = concat(g, &[&cs, &cs, &cr, &cr]);
        self.m.aggregate(g, self.bound(ComponentId::Aggregator), &styles, &contents)
    }

    fn teacher(&self, rows: &[usize]) -> TeacherBatch {
        let toks: Vec<&TokenSequence> = rows.iter().map(|&i| &self.batch.tokens[i]).collect();
        let all: Vec<&TokenSequence> = self.batch.tokens.iter().collect();
        TeacherBatch::new(&toks, TeacherBatch::prefix_len(&all))
    }
}

pub type LossFn = fn(&Ctx, &mut Graph<f64>) -> Var;

fn build(m: &DisentangleModel<f64>, batch: &Batch, g: &mut Graph<f64>, f: LossFn) -> (Var, Vec<Bound>) {
    let bounds: Vec<Bound> = COMPONENTS.iter().map(|&c| m.bind(g, c, true)).collect();
    let x = g.constant(batch.x.clone());
    let n = 2 * batch.b;
    let mut off = Dropout::off();
    let ec = &bounds[COMPONENTS.iter().position(|&c| c == ComponentId::ContentEncoder).unwrap()];
    let es = &bounds[COMPONENTS.iter().position(|&c| c == ComponentId::StyleEncoder).unwrap()];
    let content = m.encode(g, ec, x, n, batch.len, &batch.mask, &mut off);
    let style = m.encode(g, es, x, n, batch.len, &batch.mask, &mut off);
    let ctx = Ctx { m, bounds, content, style, batch };
    (f(&ctx, g), ctx.bounds)
}

pub fn loss_cls(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let b = c.batch.b;
    let memory = c.paired(g);
    let t = c.teacher(&[0, 1, 0, 1, 2, 3, 2, 3]);
    let z = c.m.decode(g, c.bound(ComponentId::Decoder), &t.inputs, t.plen, &memory, &mut Dropout::off());
    let parts: Vec<Var> = (0..4).map(|k| g.slice_rows(z, k * b * t.plen, b * t.plen)).collect();
    let pairs: Vec<(Var, &[Option<usize>])> = (0..4).map(|k| (parts[k], t.samples(k * b, b).1)).collect();
    loss_classification(g, &pairs)
}

fn group_logits(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let memory = c.paired(g);
    let pooled = c.m.pool(g, &memory).unwrap();
    c.m.group_logits(g, c.bound(ComponentId::GroupDiscriminator), pooled)
}

pub fn loss_adv_m(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let b = c.batch.b;
    let z = group_logits(c, g);
    let (z2, z4) = (g.slice_rows(z, b, b), g.slice_rows(z, 3 * b, b));
    loss_semantic_align(g, z2, z4)
}

pub fn loss_adv_dm(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let z = group_logits(c, g);
    let labels: Vec<usize> = (0..4 * c.batch.b).map(|i| i / c.batch.b).collect();
    loss_group_disc(g, z, &labels)
}

pub fn loss_adv_es(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let syn = slice(g, &c.style, 0, c.batch.b);
    let t = c.teacher(&[0, 1]);
    let z = c.m.decode(g, c.bound(ComponentId::ContentDiscriminator), &t.inputs, t.plen, &syn, &mut Dropout::off());
    loss_style_entropy(g, z, &t.valid())
}

pub fn loss_adv_dc(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let t = c.teacher(&[0, 1, 2, 3]);
    let z = c.m.decode(g, c.bound(ComponentId::ContentDiscriminator), &t.inputs, t.plen, &c.style, &mut Dropout::off());
    loss_content_disc(g, z, &t.targets)
}

fn style_pair(c: &Ctx, g: &mut Graph<f64>) -> (Var, Var) {
    let b = c.batch.b;
    let pooled = c.m.pool(g, &c.content).unwrap();
    let z = c.m.style_logits(g, c.bound(ComponentId::StyleDiscriminator), pooled);
    (g.slice_rows(z, 0, b), g.slice_rows(z, b, b))
}

pub fn loss_adv_ds(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let (zs, zr) = style_pair(c, g);
    loss_style_disc(g, zs, zr, false)
}

pub fn loss_adv_ds_flipped(c: &Ctx, g: &mut Graph<f64>) -> Var {
    let (zs, zr) = style_pair(c, g);
    loss_style_disc(g, zs, zr, true)
}

/// Relative error between tape and central-difference gradients over a random
/// subset of coordinates of each listed component.
pub fn gradcheck(f: LossFn, components: &[ComponentId]) -> f64 {
    let cfg = tiny();
    let model = DisentangleModel::<f64>::new(cfg.clone(), 4).unwrap();
    let batch = f64_batch(&cfg);
    let mut g = Graph::new();
    let (out, bounds) = build(&model, &batch, &mut g, f);
    let grads = g.backward(out);

    let mut rng = stream(9, "coords");
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-5;
    let value = |m: &DisentangleModel<f64>| {
        let mut g = Graph::new();
        let (v, _) = build(m, &batch, &mut g, f);
        g.value(v).item()
    };
    for &c in components {
        let ci = COMPONENTS.iter().position(|&x| x == c).unwrap();
        let shapes: Vec<usize> = model.params(c).iter().map(|(_, t)| t.len()).collect();
        for _ in 0..16 {
            let ti = rng.gen_range(0..shapes.len());
            let j = rng.gen_range(0..shapes[ti]);
            let a = grads.get(bounds[ci].vars()[ti]).map_or(0.0, |t| t.data()[j]);
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.params_mut(c).iter_mut().nth(ti).unwrap().1.data_mut()[j] += delta;
                value(&m)
            };
            let n = (shifted(h) - shifted(-h)) / (2.0 * h);
            analytic.push(a);
            numeric.push(n);
        }
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(na > 1e-8, "gradient vanished on the sampled coordinates");
    diff / na.max(nn)
}

pub const GC_TOL: f64 = 1e-3;
