use ksda::gradcheck::check;
use ksda::graph::{AttnSpec, ConvGeom, Graph, Var};
use ksda::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    // Random projection so every output element contributes differently.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = rand_t(&mut rng, shape);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

const TOL: f64 = 1e-6;

#[test]
fn matmul_all_transpose_combinations() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_t(&mut rng, vec![4, 3]) } else { rand_t(&mut rng, vec![3, 4]) };
        let b = if tb { rand_t(&mut rng, vec![5, 4]) } else { rand_t(&mut rng, vec![4, 5]) };
        let r = check(&[a, b], 1e-5, |g, v| {
            let c = g.matmul_t(v[0], v[1], ta, tb);
            weighted_sum(g, c, 1)
        });
        assert!(r.rel_error < TOL, "{ta} {tb}: {r:?}");
    }
}

#[test]
fn elementwise_and_bias_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [rand_t(&mut rng, vec![3, 4]), rand_t(&mut rng, vec![3, 4]), rand_t(&mut rng, vec![4])];
    let r = check(&ins, 1e-5, |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        let b = g.add_row(m, v[2]);
        let r = g.relu(b);
        let sg = g.sigmoid(v[0]);
        let t = g.add(r, sg);
        let t = g.scale(t, 0.7);
        let t = g.mul_const(t, vec![2.0; 12]);
        weighted_sum(g, t, 2)
    });
    assert!(r.rel_error < TOL, "{r:?}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ins = [rand_t(&mut rng, vec![3, 6]), rand_t(&mut rng, vec![6]), rand_t(&mut rng, vec![6])];
    let r = check(&ins, 1e-5, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        weighted_sum(g, y, 3)
    });
    assert!(r.rel_error < TOL, "{r:?}");
}

#[test]
fn attention_gradients_with_masks_and_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for causal in [false, true] {
        let (q_lens, k_lens) = if causal { (vec![3, 4], vec![3, 4]) } else { (vec![2, 3], vec![4, 3]) };
        let nq: usize = q_lens.iter().sum();
        let nk: usize = k_lens.iter().sum();
        let mut key_mask = vec![true; nk];
        if !causal {
            key_mask[3] = false;
        }
        let spec = AttnSpec { heads: 2, q_lens, k_lens, key_mask, causal };
        let ins = [rand_t(&mut rng, vec![nq, 4]), rand_t(&mut rng, vec![nk, 4]), rand_t(&mut rng, vec![nk, 4])];
        let r = check(&ins, 1e-5, |g, v| {
            let o = g.attention(v[0], v[1], v[2], spec.clone());
            weighted_sum(g, o, 4)
        });
        assert!(r.rel_error < TOL, "causal={causal}: {r:?}");
    }
}

#[test]
fn masked_key_values_do_not_reach_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_t(&mut rng, vec![2, 4]);
    let k = rand_t(&mut rng, vec![3, 4]);
    let mut v = rand_t(&mut rng, vec![3, 4]);
    let spec = AttnSpec { heads: 2, q_lens: vec![2], k_lens: vec![3], key_mask: vec![true, true, false], causal: false };
    let run = |v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.attention(a, b, c, spec.clone());
        g.value(o).clone()
    };
    let before = run(&v);
    v.data_mut()[8..12].copy_from_slice(&[50.0, -50.0, 7.0, 1e3]);
    assert_eq!(before, run(&v));
}

#[test]
fn gather_concat_embedding_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ins = [rand_t(&mut rng, vec![5, 3]), rand_t(&mut rng, vec![6, 3])];
    let r = check(&ins, 1e-5, |g, v| {
        let e = g.embedding(v[1], &[0, 2, 2, 5]);
        let s = g.slice_rows(v[0], 1, 3);
        let gr = g.gather_rows(v[0], &[4, 4, 0]);
        let c = g.concat_rows(&[e, s, gr]);
        let p = g.masked_max_pool(c, &[(0, 4), (4, 6)], &[true, false, true, true, true, true, false, true, true, true]);
        let rs = g.reshape(p, vec![6]);
        let r2 = g.reshape(rs, vec![2, 3]);
        weighted_sum(g, r2, 6)
    });
    assert!(r.rel_error < TOL, "{r:?}");
}

#[test]
fn conv_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let geom = ConvGeom { batch: 2, in_ch: 2, out_ch: 3, height: 5, width: 4, kernel: 3 };
    let ins = [rand_t(&mut rng, vec![2, 2, 5, 4]), rand_t(&mut rng, vec![3, 18]), rand_t(&mut rng, vec![3])];
    let r = check(&ins, 1e-5, |g, v| {
        let c = g.conv2d(v[0], v[1], v[2], geom);
        let p = g.max_pool2d(c);
        weighted_sum(g, p, 7)
    });
    assert!(r.rel_error < TOL, "{r:?}");
}

#[test]
fn loss_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ins = [rand_t(&mut rng, vec![4, 5]), rand_t(&mut rng, vec![3, 1])];
    let r = check(&ins, 1e-5, |g, v| {
        let ce = g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)]);
        let h = g.entropy(v[0], &[true, true, false, true]);
        let b = g.bce_logits(v[1], &[1.0, 0.0, 1.0]);
        let s = g.add(ce, h);
        let s = g.add(s, b);
        let m = g.mean(v[0]);
        g.add(s, m)
    });
    assert!(r.rel_error < TOL, "{r:?}");
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(2.0));
    let b = g.leaf(Tensor::scalar(3.0));
    let c = g.mul(a, b);
    let grads = g.backward(c);
    assert!(grads.get(a).is_none());
    assert_eq!(grads.get(b).unwrap().item(), 2.0);
}
