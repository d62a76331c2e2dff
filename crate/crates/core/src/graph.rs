//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Grads`] for every
//! node that (transitively) depends on a gradient-requiring leaf. Nodes that do
//! not depend on such a leaf are skipped entirely, which is how frozen
//! components avoid paying for parameter gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Multi-head attention layout for a batch of independent samples packed
/// row-wise.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    /// Query rows per sample; samples are contiguous in `q`.
    pub q_lens: Vec<usize>,
    /// Key/value rows per sample; samples are contiguous in `k` and `v`.
    pub k_lens: Vec<usize>,
    /// Key validity over all packed key rows.
    pub key_mask: Vec<bool>,
    /// Query `i` may only attend to keys `j <= i` within its sample.
    pub causal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, T),
    MulConst { a: Var, factor: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MaskedMaxPool { x: Var, argmax: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Entropy { logits: Var, valid: Vec<bool>, probs: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value as a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = Tensor::matmul(self.value(a), self.value(b), ta, tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let bv = self.value(bias).data();
        let c = x.cols();
        assert_eq!(bv.len(), c, "bias length {} vs {} columns", bv.len(), c);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a fixed factor (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), factor.len());
        let data = x.data().iter().zip(&factor).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::MulConst { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Per-row layer normalisation with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let n = T::of(c as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Scaled dot-product multi-head attention. `q`, `k`, `v` are packed
    /// `[rows, d_model]` matrices; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % spec.heads, 0, "d_model {d} not divisible by {} heads", spec.heads);
        assert_eq!(spec.q_lens.len(), spec.k_lens.len());
        assert_eq!(qv.rows(), spec.q_lens.iter().sum::<usize>());
        assert_eq!(kv.rows(), spec.k_lens.iter().sum::<usize>());
        assert_eq!(spec.key_mask.len(), kv.rows());
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); qv.rows() * d];
        let mut probs = Vec::new();
        let (mut qo, mut ko) = (0usize, 0usize);
        for (&nq, &nk) in spec.q_lens.iter().zip(&spec.k_lens) {
            for h in 0..spec.heads {
                let mut s = vec![T::zero(); nq * nk];
                T::gemm(
                    nq,
                    dh,
                    nk,
                    scale,
                    &qv.data()[qo * d + h * dh..],
                    d as isize,
                    1,
                    &kv.data()[ko * d + h * dh..],
                    1,
                    d as isize,
                    T::zero(),
                    &mut s,
                    nk as isize,
                    1,
                );
                for i in 0..nq {
                    let row = &mut s[i * nk..(i + 1) * nk];
                    let mut mx = T::neg_infinity();
                    for (j, val) in row.iter_mut().enumerate() {
                        if !spec.key_mask[ko + j] || (spec.causal && j > i) {
                            *val = T::neg_infinity();
                        } else if *val > mx {
                            mx = *val;
                        }
                    }
                    if mx == T::neg_infinity() {
                        // No visible key: the row attends to nothing.
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let mut z = T::zero();
                    for val in row.iter_mut() {
                        *val = if *val == T::neg_infinity() { T::zero() } else { (*val - mx).exp() };
                        z += *val;
                    }
                    row.iter_mut().for_each(|v| *v /= z);
                }
                T::gemm(
                    nq,
                    nk,
                    dh,
                    T::one(),
                    &s,
                    nk as isize,
                    1,
                    &vv.data()[ko * d + h * dh..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[qo * d + h * dh..],
                    d as isize,
                    1,
                );
                probs.extend_from_slice(&s);
            }
            qo += nq;
            ko += nk;
        }
        let out = Tensor::matrix(qv.rows(), d, out);
        self.push(out, Op::Attention { q, k, v, spec, probs }, &[q, k, v])
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < t.rows(), "embedding index {i} out of range {}", t.rows());
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), c, data);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data);
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::matrix(rows, c, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Column-wise maximum over the valid rows of each segment.
    ///
    /// `segments` lists `(start_row, len)` per output row. Panics if a segment
    /// has no valid row; callers validate first.
    pub fn masked_max_pool(&mut self, x: Var, segments: &[(usize, usize)], mask: &[bool]) -> Var {
        let t = self.value(x);
        let c = t.cols();
        assert_eq!(mask.len(), t.rows());
        let mut data = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for &(start, len) in segments {
            for j in 0..c {
                let mut best: Option<(usize, T)> = None;
                for r in start..start + len {
                    if !mask[r] {
                        continue;
                    }
                    let v = t.data()[r * c + j];
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                let (r, v) = best.expect("masked_max_pool over a fully masked segment");
                data.push(v);
                argmax.push(r * c + j);
            }
        }
        let out = Tensor::matrix(segments.len(), c, data);
        self.push(out, Op::MaskedMaxPool { x, argmax }, &[x])
    }

    /// Same-padded stride-1 convolution. `x` is `[batch, in_ch, h, w]`, `w` is
    /// `[out_ch, in_ch * k * k]`, `b` is `[out_ch]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let ConvGeom { batch, in_ch, out_ch, height, width, kernel } = geom;
        let xv = self.value(x);
        assert_eq!(xv.len(), batch * in_ch * height * width, "conv2d input shape");
        let wv = self.value(w);
        assert_eq!(wv.shape(), &[out_ch, in_ch * kernel * kernel]);
        let bv = self.value(b).data();
        let hw = height * width;
        let ckk = in_ch * kernel * kernel;
        let mut cols = vec![T::zero(); batch * ckk * hw];
        let mut out = vec![T::zero(); batch * out_ch * hw];
        for n in 0..batch {
            let img = &xv.data()[n * in_ch * hw..(n + 1) * in_ch * hw];
            let col = &mut cols[n * ckk * hw..(n + 1) * ckk * hw];
            im2col(img, in_ch, height, width, kernel, col);
            let o = &mut out[n * out_ch * hw..(n + 1) * out_ch * hw];
            for (oc, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[oc]);
            }
            T::gemm(
                out_ch, ckk, hw, T::one(), wv.data(), ckk as isize, 1, col, hw as isize, 1,
                T::one(), o, hw as isize, 1,
            );
        }
        let out = Tensor::new(vec![batch, out_ch, height, width], out);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// 2x2 max pooling with stride 2 over `[batch, ch, h, w]`; odd edges drop.
    pub fn max_pool2d(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 4, "max_pool2d expects a 4-D tensor");
        let (bt, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(bt * ch * oh * ow);
        let mut argmax = Vec::with_capacity(bt * ch * oh * ow);
        for plane in 0..bt * ch {
            let base = plane * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * x + dx;
                        if xv.data()[i] > xv.data()[best] {
                            best = i;
                        }
                    }
                    data.push(xv.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![bt, ch, oh, ow], data);
        self.push(out, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Mean token cross-entropy from logits over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        let c = t.cols();
        assert_eq!(t.rows(), targets.len(), "one target slot per logit row");
        let probs = softmax_rows(t.data(), c);
        let count = targets.iter().filter(|x| x.is_some()).count();
        let mut loss = T::zero();
        for (r, tgt) in targets.iter().enumerate() {
            if let Some(k) = *tgt {
                assert!(k < c, "target {k} out of {c} classes");
                loss -= log_softmax_at(&t.data()[r * c..(r + 1) * c], k);
            }
        }
        if count > 0 {
            loss /= T::of(count as f64);
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Mean Shannon entropy (nats) of the row softmax distributions over valid rows.
    pub fn entropy(&mut self, logits: Var, valid: &[bool]) -> Var {
        let t = self.value(logits);
        let c = t.cols();
        assert_eq!(t.rows(), valid.len());
        let probs = softmax_rows(t.data(), c);
        let count = valid.iter().filter(|&&v| v).count();
        let mut h = T::zero();
        for (r, &ok) in valid.iter().enumerate() {
            if ok {
                h += row_entropy(&probs[r * c..(r + 1) * c]);
            }
        }
        if count > 0 {
            h /= T::of(count as f64);
        }
        self.push(Tensor::scalar(h), Op::Entropy { logits, valid: valid.to_vec(), probs }, &[logits])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), targets.len());
        let mut loss = T::zero();
        for (&z, &y) in t.data().iter().zip(targets) {
            loss += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        if !targets.is_empty() {
            loss /= T::of(targets.len() as f64);
        }
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec() }, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = if !ta {
                        Tensor::matmul(g, bv, false, !tb)
                    } else {
                        Tensor::matmul(bv, g, *tb, true)
                    };
                    accum(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = if !tb {
                        Tensor::matmul(av, g, !ta, false)
                    } else {
                        Tensor::matmul(g, av, true, *ta)
                    };
                    accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.needs(*b) {
                    accum(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow { a, bias } => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accum(grads, *bias, Tensor::new(shape, gb));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accum(grads, *a, g.map(|v| v * s));
            }
            Op::MulConst { a, factor } => {
                let data = g.data().iter().zip(factor).map(|(&p, &q)| p * q).collect();
                accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                accum(grads, *a, Tensor::new(g.shape().to_vec(), data));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let n = T::of(c as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, grow) in g.data().chunks(c).enumerate() {
                        let h = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let m1 = dh.iter().copied().sum::<T>() / n;
                        let m2 = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            gx.push(inv_std[r] * (dh[j] - m1 - h[j] * m2));
                        }
                    }
                    accum(grads, *x, Tensor::new(g.shape().to_vec(), gx));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (r, grow) in g.data().chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += grow[j] * xhat[r * c + j];
                            gb[j] += grow[j];
                        }
                    }
                    if self.needs(*gain) {
                        accum(grads, *gain, Tensor::new(self.value(*gain).shape().to_vec(), gg));
                    }
                    if self.needs(*bias) {
                        accum(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), gb));
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.backprop_attention(*q, *k, *v, spec, probs, g, grads);
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let c = t.cols();
                let mut gt = Tensor::zeros(t.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accum(grads, *table, gt);
            }
            Op::GatherRows { a, idx } => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.shape().to_vec());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[src * c..(src + 1) * c];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accum(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let n = t.len();
                    if self.needs(p) {
                        let part = Tensor::new(t.shape().to_vec(), g.data()[off..off + n].to_vec());
                        accum(grads, p, part);
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accum(grads, *a, g.clone().reshaped(shape));
            }
            Op::MaskedMaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += v;
                }
                accum(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let ConvGeom { batch, in_ch, out_ch, height, width, kernel } = *geom;
                let hw = height * width;
                let ckk = in_ch * kernel * kernel;
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); out_ch * ckk];
                    for n in 0..batch {
                        let go = &g.data()[n * out_ch * hw..(n + 1) * out_ch * hw];
                        let col = &cols[n * ckk * hw..(n + 1) * ckk * hw];
                        T::gemm(
                            out_ch, hw, ckk, T::one(), go, hw as isize, 1, col, 1, hw as isize,
                            T::one(), &mut gw, ckk as isize, 1,
                        );
                    }
                    accum(grads, *w, Tensor::new(vec![out_ch, ckk], gw));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); out_ch];
                    for n in 0..batch {
                        for (oc, o) in gb.iter_mut().enumerate() {
                            let base = (n * out_ch + oc) * hw;
                            *o += g.data()[base..base + hw].iter().copied().sum::<T>();
                        }
                    }
                    accum(grads, *b, Tensor::new(vec![out_ch], gb));
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut gx = vec![T::zero(); batch * in_ch * hw];
                    let mut gcol = vec![T::zero(); ckk * hw];
                    for n in 0..batch {
                        let go = &g.data()[n * out_ch * hw..(n + 1) * out_ch * hw];
                        T::gemm(
                            ckk, out_ch, hw, T::one(), wv, 1, ckk as isize, go, hw as isize, 1,
                            T::zero(), &mut gcol, hw as isize, 1,
                        );
                        col2im(&gcol, in_ch, height, width, kernel, &mut gx[n * in_ch * hw..(n + 1) * in_ch * hw]);
                    }
                    accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), gx));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += v;
                }
                accum(grads, *x, gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let t = self.value(*logits);
                let c = t.cols();
                let count = targets.iter().filter(|x| x.is_some()).count();
                let mut gl = vec![T::zero(); t.len()];
                if count > 0 {
                    let s = g.item() / T::of(count as f64);
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(k) = *tgt {
                            for j in 0..c {
                                let y = if j == k { T::one() } else { T::zero() };
                                gl[r * c + j] = (probs[r * c + j] - y) * s;
                            }
                        }
                    }
                }
                accum(grads, *logits, Tensor::new(t.shape().to_vec(), gl));
            }
            Op::Entropy { logits, valid, probs } => {
                let t = self.value(*logits);
                let c = t.cols();
                let count = valid.iter().filter(|&&v| v).count();
                let mut gl = vec![T::zero(); t.len()];
                if count > 0 {
                    let s = g.item() / T::of(count as f64);
                    for (r, &ok) in valid.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        let p = &probs[r * c..(r + 1) * c];
                        let h = row_entropy(p);
                        for j in 0..c {
                            let lp = if p[j] > T::zero() { p[j].ln() } else { T::zero() };
                            gl[r * c + j] = -p[j] * (lp + h) * s;
                        }
                    }
                }
                accum(grads, *logits, Tensor::new(t.shape().to_vec(), gl));
            }
            Op::BceLogits { logits, targets } => {
                let t = self.value(*logits);
                let s = g.item() / T::of(targets.len().max(1) as f64);
                let data = t
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * s)
                    .collect();
                accum(grads, *logits, Tensor::new(t.shape().to_vec(), data));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accum(grads, *a, Tensor::full(shape, g.item()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / spec.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let (mut qo, mut ko, mut po) = (0usize, 0usize, 0usize);
        for (&nq, &nk) in spec.q_lens.iter().zip(&spec.k_lens) {
            for h in 0..spec.heads {
                let p = &probs[po..po + nq * nk];
                po += nq * nk;
                let go = &g.data()[qo * d + h * dh..];
                // dP = dO V^T
                let mut dp = vec![T::zero(); nq * nk];
                T::gemm(
                    nq, dh, nk, T::one(), go, d as isize, 1, &vv.data()[ko * d + h * dh..], 1,
                    d as isize, T::zero(), &mut dp, nk as isize, 1,
                );
                // dV += P^T dO
                T::gemm(
                    nk, nq, dh, T::one(), p, 1, nk as isize, go, d as isize, 1, T::one(),
                    &mut gv[ko * d + h * dh..], d as isize, 1,
                );
                // dS = P * (dP - rowdot(dP, P)) * scale
                for i in 0..nq {
                    let pr = &p[i * nk..(i + 1) * nk];
                    let dr = &mut dp[i * nk..(i + 1) * nk];
                    let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                T::gemm(
                    nq, nk, dh, T::one(), &dp, nk as isize, 1, &kv.data()[ko * d + h * dh..],
                    d as isize, 1, T::one(), &mut gq[qo * d + h * dh..], d as isize, 1,
                );
                T::gemm(
                    nk, nq, dh, T::one(), &dp, 1, nk as isize, &qv.data()[qo * d + h * dh..],
                    d as isize, 1, T::one(), &mut gk[ko * d + h * dh..], d as isize, 1,
                );
            }
            qo += nq;
            ko += nk;
        }
        for (var, data) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                let shape = self.value(var).shape().to_vec();
                accum(grads, var, Tensor::new(shape, data));
            }
        }
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p * q).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over a packed `[rows, cols]` buffer.
pub fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - mx).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub fn log_softmax_at<T: Scalar>(row: &[T], k: usize) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    row[k] - lse
}

pub fn row_entropy<T: Scalar>(p: &[T]) -> T {
    p.iter().filter(|&&v| v > T::zero()).map(|&v| -v * v.ln()).sum()
}

fn im2col<T: Scalar>(img: &[T], ch: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ch {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut col[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ki as isize - pad;
                    for x in 0..w {
                        let ix = x as isize + kj as isize - pad;
                        dst[y * w + x] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            img[c * hw + iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], ch: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ch {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &col[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let ix = x as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            img[c * hw + iy as usize * w + ix as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}
