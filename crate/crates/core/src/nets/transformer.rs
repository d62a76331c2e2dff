//! Post-norm transformer encoder and decoder stacks over packed batches.
//!
//! A batch of `b` sequences of equal padded length `n` is packed row-wise into
//! a `[b * n, width]` matrix; masks mark the valid rows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{AttnSpec, Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{normal, Bound, ParamId, Params};
use crate::scalar::Scalar;

use super::ModelConfig;

/// Inverted dropout. Inactive without an RNG or with `p == 0`.
#[derive(Debug)]
pub struct Dropout {
    pub p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn active(&self) -> bool {
        self.p > 0.0 && self.rng.is_some()
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        let p = self.p;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = T::of(1.0 / (1.0 - p));
        let n = g.value(x).len();
        let factor = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        g.mul_const(x, factor)
    }
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(p, rng, &format!("{name}.q"), d, d),
            k: Linear::new(p, rng, &format!("{name}.k"), d, d),
            v: Linear::new(p, rng, &format!("{name}.v"), d, d),
            o: Linear::new(p, rng, &format!("{name}.o"), d, d),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, xq: Var, xkv: Var, spec: AttnSpec) -> Var {
        let q = self.q.forward(g, b, xq);
        let k = self.k.forward(g, b, xkv);
        let v = self.v.forward(g, b, xkv);
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, b, a)
    }

    fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d)
    }
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, name: &str, d: usize, h: usize) -> Self {
        Self {
            up: Linear::new(p, rng, &format!("{name}.up"), d, h),
            down: Linear::new(p, rng, &format!("{name}.down"), h, d),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let h = self.up.forward(g, b, x);
        let h = g.relu(h);
        self.down.forward(g, b, h)
    }

    fn param_count(d: usize, h: usize) -> usize {
        Linear::param_count(d, h) + Linear::param_count(h, d)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

/// `x + sublayer` followed by layer normalisation.
fn residual_norm<T: Scalar>(g: &mut Graph<T>, b: &Bound, ln: &LayerNorm, x: Var, y: Var, drop: &mut Dropout) -> Var {
    let y = drop.apply(g, y);
    let s = g.add(x, y);
    ln.forward(g, b, s)
}

fn position_ids(batch: usize, len: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..len).collect()
}

/// Parameter handles of a frame encoder; the values live in a [`Params`].
#[derive(Clone, Debug)]
pub struct EncoderLayout {
    input: Linear,
    positions: ParamId,
    layers: Vec<EncoderLayer>,
    heads: usize,
}

impl EncoderLayout {
    pub fn new<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let input = Linear::new(p, rng, "input", cfg.feature_dim, d);
        let positions = p.add("positions", normal(rng, vec![cfg.max_seq_len, d], 0.02));
        let layers = (0..cfg.num_layers)
            .map(|i| EncoderLayer {
                attn: Attention::new(p, rng, &format!("layer{i}.attn"), d),
                ln1: LayerNorm::new(p, &format!("layer{i}.ln1"), d),
                ffn: FeedForward::new(p, rng, &format!("layer{i}.ffn"), d, cfg.hidden_dim),
                ln2: LayerNorm::new(p, &format!("layer{i}.ln2"), d),
            })
            .collect();
        Self { input, positions, layers, heads: cfg.num_heads }
    }

    /// `x` is `[batch * len, feature_dim]`; returns `[batch * len, embed_dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
        drop: &mut Dropout,
    ) -> Var {
        let h = self.input.forward(g, b, x);
        let pos = g.embedding(b.get(self.positions), &position_ids(batch, len));
        let h = g.add(h, pos);
        let mut h = drop.apply(g, h);
        let spec = AttnSpec {
            heads: self.heads,
            q_lens: vec![len; batch],
            k_lens: vec![len; batch],
            key_mask: mask.to_vec(),
            causal: false,
        };
        for l in &self.layers {
            let a = l.attn.forward(g, b, h, h, spec.clone());
            h = residual_norm(g, b, &l.ln1, h, a, drop);
            let f = l.ffn.forward(g, b, h);
            h = residual_norm(g, b, &l.ln2, h, f, drop);
        }
        h
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let d = cfg.embed_dim;
        let layer = Attention::param_count(d) + FeedForward::param_count(d, cfg.hidden_dim) + 2 * 2 * d;
        Linear::param_count(cfg.feature_dim, d) + cfg.max_seq_len * d + cfg.num_layers * layer
    }
}

/// Parameter handles of a token decoder with causal self-attention and
/// cross-attention to a memory sequence.
#[derive(Clone, Debug)]
pub struct DecoderLayout {
    tokens: ParamId,
    positions: ParamId,
    layers: Vec<DecoderLayer>,
    head: Linear,
    heads: usize,
}

impl DecoderLayout {
    pub fn new<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let tokens = p.add("tokens", normal(rng, vec![cfg.vocab_size, d], 1.0 / (d as f64).sqrt()));
        let positions = p.add("positions", normal(rng, vec![cfg.max_phrase_len, d], 0.02));
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer {
                self_attn: Attention::new(p, rng, &format!("layer{i}.self"), d),
                ln1: LayerNorm::new(p, &format!("layer{i}.ln1"), d),
                cross_attn: Attention::new(p, rng, &format!("layer{i}.cross"), d),
                ln2: LayerNorm::new(p, &format!("layer{i}.ln2"), d),
                ffn: FeedForward::new(p, rng, &format!("layer{i}.ffn"), d, cfg.hidden_dim),
                ln3: LayerNorm::new(p, &format!("layer{i}.ln3"), d),
            })
            .collect();
        let head = Linear::new(p, rng, "head", d, cfg.vocab_size);
        Self { tokens, positions, layers, head, heads: cfg.num_heads }
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    /// `ids` holds `batch` prefixes of length `plen` back to back; `memory` is
    /// `[batch * mem_len, embed_dim]`. Returns logits `[batch * plen, vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        ids: &[usize],
        batch: usize,
        plen: usize,
        memory: Var,
        mem_len: usize,
        mem_mask: &[bool],
        drop: &mut Dropout,
    ) -> Var {
        debug_assert_eq!(ids.len(), batch * plen);
        let t = g.embedding(b.get(self.tokens), ids);
        let pos = g.embedding(b.get(self.positions), &position_ids(batch, plen));
        let h = g.add(t, pos);
        let mut h = drop.apply(g, h);
        let self_spec = AttnSpec {
            heads: self.heads,
            q_lens: vec![plen; batch],
            k_lens: vec![plen; batch],
            key_mask: vec![true; batch * plen],
            causal: true,
        };
        let cross_spec = AttnSpec {
            heads: self.heads,
            q_lens: vec![plen; batch],
            k_lens: vec![mem_len; batch],
            key_mask: mem_mask.to_vec(),
            causal: false,
        };
        for l in &self.layers {
            let a = l.self_attn.forward(g, b, h, h, self_spec.clone());
            h = residual_norm(g, b, &l.ln1, h, a, drop);
            let c = l.cross_attn.forward(g, b, h, memory, cross_spec.clone());
            h = residual_norm(g, b, &l.ln2, h, c, drop);
            let f = l.ffn.forward(g, b, h);
            h = residual_norm(g, b, &l.ln3, h, f, drop);
        }
        self.head.forward(g, b, h)
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let d = cfg.embed_dim;
        let layer = 2 * Attention::param_count(d) + FeedForward::param_count(d, cfg.hidden_dim) + 3 * 2 * d;
        cfg.vocab_size * d
            + cfg.max_phrase_len * d
            + cfg.num_layers * layer
            + Linear::param_count(d, cfg.vocab_size)
    }
}
