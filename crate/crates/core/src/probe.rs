//! Linear domain probes: L2-regularised logistic regression scored by
//! k-fold cross-validation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeOptions {
    pub folds: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Per-dimension standardisation; when off a single global scale is used,
    /// so near-constant dimensions are not magnified.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { folds: 5, iterations: 300, lr: 0.1, l2: 1e-3, standardize: true, seed: 0 }
    }
}

/// Logistic regression on standardised inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    /// Full-batch Adam on the mean log-loss; rows of `x` are samples.
    pub fn fit(x: &[Vec<f64>], y: &[bool], opts: &ProbeOptions) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::InvalidArgument(format!("{n} samples with {} labels", y.len())));
        }
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for r in x {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        if opts.standardize {
            for s in scale.iter_mut() {
                *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
            }
        } else {
            let total: f64 = scale.iter().sum();
            let s = if total > 1e-12 { 1.0 / total.sqrt() } else { 0.0 };
            scale.iter_mut().for_each(|v| *v = s);
        }
        let z: Vec<Vec<f64>> =
            x.iter().map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect()).collect();
        let mut w = vec![0.0; d + 1];
        let (mut m1, mut m2) = (vec![0.0; d + 1], vec![0.0; d + 1]);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for t in 1..=opts.iterations {
            let mut grad = vec![0.0; d + 1];
            for (r, &label) in z.iter().zip(y) {
                let p = sigmoid(r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d]);
                let e = p - if label { 1.0 } else { 0.0 };
                for (g, v) in grad.iter_mut().zip(r) {
                    *g += e * v / n as f64;
                }
                grad[d] += e / n as f64;
            }
            for j in 0..d {
                grad[j] += opts.l2 * w[j];
            }
            for j in 0..=d {
                m1[j] = b1 * m1[j] + (1.0 - b1) * grad[j];
                m2[j] = b2 * m2[j] + (1.0 - b2) * grad[j] * grad[j];
                let mh = m1[j] / (1.0 - b1.powi(t as i32));
                let vh = m2[j] / (1.0 - b2.powi(t as i32));
                w[j] -= opts.lr * mh / (vh.sqrt() + eps);
            }
        }
        let b = w.pop().expect("bias slot");
        Ok(Self { mean, scale, w, b })
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        let z: f64 = x.iter().zip(&self.mean).zip(&self.scale).zip(&self.w).map(|(((v, m), s), w)| (v - m) * s * w).sum();
        z + self.b > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Mean held-out accuracy over stratified folds.
pub fn cross_validated_accuracy(x: &[Vec<f64>], y: &[bool], opts: &ProbeOptions) -> Result<f64> {
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("probe needs samples from both classes".into()));
    }
    let k = opts.folds.max(2);
    if pos.len() < k || neg.len() < k {
        return Err(Error::InvalidArgument(format!("each class needs at least {k} samples")));
    }
    let mut rng = stream(opts.seed, "probe-folds");
    let mut fold_of = vec![0usize; y.len()];
    for mut group in [pos, neg] {
        group.shuffle(&mut rng);
        for (j, i) in group.into_iter().enumerate() {
            fold_of[i] = j % k;
        }
    }
    let mut total = 0.0;
    for f in 0..k {
        let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
        for i in 0..y.len() {
            if fold_of[i] == f {
                vx.push(x[i].clone());
                vy.push(y[i]);
            } else {
                tx.push(x[i].clone());
                ty.push(y[i]);
            }
        }
        let probe = LogisticProbe::fit(&tx, &ty, opts)?;
        total += probe.accuracy(&vx, &vy);
    }
    Ok(total / k as f64)
}
