//! Parameterised building blocks shared by the feature extractor and the
//! sequence networks.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{glorot, Bound, ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, name: &str, input: usize, output: usize) -> Self {
        let w = p.add(format!("{name}.w"), glorot(rng, input, output));
        let b = p.add(format!("{name}.b"), Tensor::zeros(vec![output]));
        Self { w, b, input, output }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        let h = g.matmul(x, bound.get(self.w));
        g.add_row(h, bound.get(self.b))
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, dim: usize) -> Self {
        let gain = p.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one()));
        let bias = p.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Var {
        g.layer_norm(x, bound.get(self.gain), bound.get(self.bias), T::of(Self::EPS))
    }
}
