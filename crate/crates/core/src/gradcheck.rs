//! Central finite-difference gradient checks against the tape.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric gradients over all inputs.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Builds the scalar `f(inputs)` on fresh graphs, differentiates it once with
/// the tape and once by central differences with step `h`.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for ti in 0..work.len() {
        for j in 0..work[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn).max(1e-12);
    GradCheck { rel_error: diff / denom, analytic_norm: na }
}
