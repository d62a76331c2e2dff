//! Named parameter collections, graph binding and the Adam optimizer.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Parameters of one learnable component, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every tensor on the tape, as gradient leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &Params<T>) -> Result<()> {
        self.check_compatible(other)?;
        self.tensors = other.tensors.clone();
        Ok(())
    }

    pub fn check_compatible(&self, other: &Params<T>) -> Result<()> {
        if self.names.len() != other.names.len() {
            return Err(Error::Shape {
                expected: format!("{} tensors", self.names.len()),
                actual: format!("{} tensors", other.names.len()),
            });
        }
        for ((n, t), (m, u)) in self.iter().zip(other.iter()) {
            if t.shape() != u.shape() {
                return Err(Error::Shape {
                    expected: format!("{n} {:?}", t.shape()),
                    actual: format!("{m} {:?}", u.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        binio::write_u32(w, self.tensors.len() as u32)?;
        for (n, t) in self.iter() {
            binio::write_tensor(w, n, t)?;
        }
        Ok(())
    }

    /// Reads tensors and validates them against `self` (the expected layout),
    /// replacing the values in place.
    pub fn read_into(&mut self, r: &mut impl Read) -> Result<()> {
        let n = binio::read_u32(r)? as usize;
        if n != self.tensors.len() {
            return Err(Error::Shape {
                expected: format!("{} tensors", self.tensors.len()),
                actual: format!("{n} tensors"),
            });
        }
        for i in 0..n {
            let (name, t) = binio::read_tensor::<T>(r)?;
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    expected: format!("{} {:?}", self.names[i], self.tensors[i].shape()),
                    actual: format!("{name} {:?}", t.shape()),
                });
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform initialised `[fan_in, fan_out]` matrix.
pub fn glorot<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// He-normal initialised tensor of the given shape.
pub fn he_normal<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| T::of(n.sample(rng))).collect())
}

pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("valid std");
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| T::of(n.sample(rng))).collect())
}

/// Adaptive moment estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, params: &Params<T>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients of `bound`. Parameters without a
    /// gradient (unused in the loss) still advance their moment estimates
    /// with a zero gradient.
    pub fn step(&mut self, params: &mut Params<T>, bound: &Bound, grads: &Grads<T>) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let g = grads.get(bound.vars[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        binio::write_u64(w, self.step)?;
        binio::write_u32(w, self.m.len() as u32)?;
        for (m, v) in self.m.iter().zip(&self.v) {
            binio::write_u32(w, m.len() as u32)?;
            binio::write_f32s(w, m)?;
            binio::write_f32s(w, v)?;
        }
        Ok(())
    }

    pub fn read_from(&mut self, r: &mut impl Read) -> Result<()> {
        self.step = binio::read_u64(r)?;
        let n = binio::read_u32(r)? as usize;
        if n != self.m.len() {
            return Err(Error::Format(format!("optimizer state has {n} slots, expected {}", self.m.len())));
        }
        for i in 0..n {
            let len = binio::read_u32(r)? as usize;
            if len != self.m[i].len() {
                return Err(Error::Format(format!("optimizer slot {i} has {len} values")));
            }
            self.m[i] = binio::read_f32s(r, len)?;
            self.v[i] = binio::read_f32s(r, len)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Params::<f64>::new();
        let id = p.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let x = b.get(id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut p, &b, &grads);
        }
        assert!(p.get(id).data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.get(id));
    }

    #[test]
    fn serialisation_round_trips_and_validates_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::<f32>::new();
        p.add("w", glorot(&mut rng, 3, 4));
        p.add("b", Tensor::zeros(vec![4]));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let mut q = p.clone();
        q.get_mut(ParamId(0)).data_mut()[0] = 99.0;
        q.read_into(&mut buf.as_slice()).unwrap();
        assert_eq!(p.checksum(), q.checksum());

        let mut wrong = Params::<f32>::new();
        wrong.add("w", Tensor::zeros(vec![4, 3]));
        wrong.add("b", Tensor::zeros(vec![4]));
        assert!(wrong.read_into(&mut buf.as_slice()).is_err());
    }
}
