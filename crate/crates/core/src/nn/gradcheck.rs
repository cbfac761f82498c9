//! Central-difference checks for every differentiable op.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::hierarchy::{compute_spirals, SpiralTable};
use crate::mesh::build_adjacency;
use crate::mesh::fixtures::icosahedron;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar readout Σ r⊙y with a fixed random r, so every output entry matters.
fn readout(g: &mut Graph, y: NodeId, seed: u64) -> NodeId {
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = g.reshape(y, &[1, n]).unwrap();
    let r = g.constant(random(&mut rng, n, 1));
    g.matmul(flat, r).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Checks d(readout ∘ f)/dx against central differences for each input.
fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[NodeId]) -> NodeId, tol: f64) {
    let h = 1e-5;
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &ids);
        let l = readout(&mut g, y, 99);
        (g, ids, l)
    };
    let (g, ids, l) = eval(inputs);
    let grads = g.backward_nodes(l).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).unwrap().to_vec();
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (gp, _, lp) = eval(&plus);
            let (gm, _, lm) = eval(&minus);
            numeric[i] = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < tol, "input {k}: relative error {e}");
    }
}

/// Same for the parameters of a layer.
fn check_params(
    store: &ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Graph, &ParamStore, NodeId) -> NodeId,
    tol: f64,
) {
    let h = 1e-5;
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = f(&mut g, s, xi);
        let l = readout(&mut g, y, 7);
        (g, l)
    };
    let (g, l) = eval(store);
    let mut grads = store.zero_grads();
    g.backward(l, &mut grads).unwrap();
    for id in store.ids() {
        let n = store.get(id).len();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let (gp, lp) = eval(&plus);
            let (gm, lm) = eval(&minus);
            numeric[i] = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
        }
        let e = rel_err(grads.get(id).data(), &numeric);
        assert!(e < tol, "{}: relative error {e}", store.name(id));
    }
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    }
}

#[test]
fn dense_identity_and_bias_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let d = Dense::new(&mut store, "d", 3, 3, &mut rng);
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    *store.get_mut(d.weight) = Tensor::matrix(3, 3, eye).unwrap();
    let x = random(&mut rng, 5, 3);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let y = d.forward(&mut g, &store, xi).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let flat = g.reshape(y, &[1, 15]).unwrap();
    let ones = g.constant(Tensor::matrix(15, 1, vec![1.0; 15]).unwrap());
    let s = g.matmul(flat, ones).unwrap();
    let mut grads = store.zero_grads();
    g.backward(s, &mut grads).unwrap();
    assert_eq!(grads.get(d.bias).data(), &[5.0, 5.0, 5.0]);
}

#[test]
fn dense_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let d = Dense::new(&mut store, "d", 4, 3, &mut rng);
    randomize(&mut store, 2);
    let x = random(&mut rng, 6, 4);
    check_params(&store, &x, |g, s, x| d.forward(g, s, x).unwrap(), 1e-4);
    let st = store.clone();
    check_inputs(&[x], |g, xs| d.forward(g, &st, xs[0]).unwrap(), 1e-4);
}

fn ico_spirals(len: usize) -> SpiralTable {
    let m = icosahedron();
    compute_spirals(&m, &build_adjacency(&m).unwrap(), len).unwrap()
}

#[test]
fn spiral_conv_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let conv = SpiralConv::new(&mut store, "c", &ico_spirals(9), 2, 3, &mut rng).unwrap();
    randomize(&mut store, 4);
    let x = random(&mut rng, 12, 2);
    check_params(&store, &x, |g, s, x| conv.forward(g, s, x).unwrap(), 1e-4);
    let st = store.clone();
    check_inputs(&[x], |g, xs| conv.forward(g, &st, xs[0]).unwrap(), 1e-4);
}

#[test]
fn spiral_of_length_one_is_a_dense_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let conv = SpiralConv::new(&mut store, "c", &ico_spirals(1), 3, 4, &mut rng).unwrap();
    randomize(&mut store, 6);
    let x = random(&mut rng, 12, 3);
    let mut g = Graph::new();
    let xi = g.constant(x);
    let a = conv.forward(&mut g, &store, xi).unwrap();
    let b = conv.dense.forward(&mut g, &store, xi).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn constant_field_with_column_summing_weights_stays_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let conv = SpiralConv::new(&mut store, "c", &ico_spirals(6), 2, 1, &mut rng).unwrap();
    *store.get_mut(conv.dense.weight) = Tensor::matrix(12, 1, vec![1.0; 12]).unwrap();
    let x = Tensor::matrix(12, 2, [0.25, -1.5].repeat(12)).unwrap();
    let mut g = Graph::new();
    let xi = g.constant(x);
    let y = conv.forward(&mut g, &store, xi).unwrap();
    for v in g.value(y).data() {
        assert!((v - 6.0 * (0.25 - 1.5)).abs() < 1e-12);
    }
}

#[test]
fn activations() {
    assert_eq!(elu(0.0), 0.0);
    assert!((elu(-1e-12) - 0.0).abs() < 1e-11);
    assert!((elu_grad(0.0) - 1.0).abs() < 1e-15);
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
    let t = g.tanh(x);
    assert_eq!(g.scalar(t), 0.0);
    let d = g.backward_nodes(t).unwrap();
    assert_eq!(d.get(x).unwrap(), &[1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    check_inputs(&[x.clone()], |g, xs| g.elu(xs[0]), 1e-6);
    check_inputs(&[x], |g, xs| g.tanh(xs[0]), 1e-6);
}

#[test]
fn structural_ops_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, 4, 3);
    let b = random(&mut rng, 4, 2);
    let c = random(&mut rng, 2, 3);
    check_inputs(&[a.clone(), b.clone()], |g, xs| g.concat_cols(xs).unwrap(), 1e-6);
    check_inputs(&[a.clone(), c.clone()], |g, xs| g.concat_rows(xs).unwrap(), 1e-6);
    check_inputs(&[a.clone(), a.clone()], |g, xs| g.add(xs[0], xs[1]).unwrap(), 1e-6);
    check_inputs(&[a.clone()], |g, xs| g.scale(xs[0], -2.5), 1e-6);
    check_inputs(&[a.clone(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()], |g, xs| {
        g.add_bias(xs[0], xs[1]).unwrap()
    }, 1e-6);
    check_inputs(&[a.clone(), random(&mut rng, 3, 5)], |g, xs| g.matmul(xs[0], xs[1]).unwrap(), 1e-6);
    let index: Arc<[usize]> = vec![0, 2, 2, 3, 1, 0].into();
    check_inputs(&[a.clone()], |g, xs| g.gather(xs[0], index.clone(), 2).unwrap(), 1e-6);
    let map = Arc::new(
        SparseRows::new(4, vec![vec![(0, 0.5), (3, 0.5)], vec![(2, 1.0)], vec![], vec![(1, -2.0), (1, 1.0)]]).unwrap(),
    );
    check_inputs(&[a.clone()], |g, xs| g.mix(xs[0], map.clone()).unwrap(), 1e-6);
    let target = Arc::new(random(&mut rng, 4, 3));
    check_inputs(&[a.clone()], |g, xs| g.mean_abs_diff(xs[0], target.clone()).unwrap(), 1e-6);
    let edges: Arc<[(usize, usize)]> = vec![(0, 1), (1, 2), (2, 0), (2, 3)].into();
    check_inputs(&[a], |g, xs| g.edge_sq(xs[0], edges.clone()).unwrap(), 1e-6);
}

#[test]
fn gather_backward_conserves_gradient_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let x = g.input(random(&mut rng, 12, 2));
    let spir = ico_spirals(7);
    let index: Arc<[usize]> = spir.sequences.concat().into();
    let y = g.gather(x, index, 7).unwrap();
    let l = readout(&mut g, y, 3);
    let grads = g.backward_nodes(l).unwrap();
    let into: f64 = grads.get(y).unwrap().iter().sum();
    let out: f64 = grads.get(x).unwrap().iter().sum();
    assert!((into - out).abs() < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let d = Dense::new(&mut store, "d", 3, 2, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 4, 3));
    let y = d.forward(&mut g, &store, x).unwrap();
    let l = readout(&mut g, y, 1);
    let grads = g.backward_nodes(l).unwrap();
    assert!(grads.get(x).is_none());
}

#[test]
fn forward_is_bit_stable() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let conv = SpiralConv::new(&mut store, "c", &ico_spirals(9), 3, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, 12, 3));
        let y = conv.forward(&mut g, &store, x).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    assert!(g.concat_rows(&[a, b]).is_ok());
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, c).is_err());
    assert!(g.concat_cols(&[a, c]).is_err());
    assert!(g.backward_nodes(a).is_err());
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(vec![1], vec![1.0]).unwrap());
    let mut adam = AdamState::new(&store, 0.01);
    let mut grads = store.zero_grads();
    adam.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(p).data(), &[1.0]);

    let gval = 0.37;
    grads.get_mut(p).data_mut()[0] = gval;
    let mut fresh = AdamState::new(&store, 0.01);
    fresh.step(&mut store, &grads).unwrap();
    let delta = (1.0 - store.get(p).data()[0]).abs();
    assert!((delta - 0.01 * gval / (gval + 1e-8)).abs() < 1e-6);
}

#[test]
fn adam_two_steps_match_hand_computation() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(vec![1], vec![0.0]).unwrap());
    let mut adam = AdamState::new(&store, 0.1);
    let mut grads = store.zero_grads();
    grads.get_mut(p).data_mut()[0] = 1.0;
    // Step 1: m = 0.1, v = 0.001, m̂ = v̂ = 1, Δ = 0.1/(1 + 1e-8).
    adam.step(&mut store, &grads).unwrap();
    let x1 = -0.1 / (1.0 + 1e-8);
    assert!((store.get(p).data()[0] - x1).abs() < 1e-15);
    // Step 2: m = 0.19, v = 0.001999, m̂ = 0.19/0.19, v̂ = 0.001999/0.001999.
    adam.step(&mut store, &grads).unwrap();
    assert!((store.get(p).data()[0] - 2.0 * x1).abs() < 1e-15);
}

#[test]
fn adam_rejects_nan_without_updating() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut adam = AdamState::new(&store, 0.1);
    let mut grads = store.zero_grads();
    grads.get_mut(p).data_mut()[1] = f64::NAN;
    assert!(matches!(adam.step(&mut store, &grads), Err(Error::NonFinite(_))));
    assert_eq!(store.get(p).data(), &[1.0, 2.0]);
    assert_eq!(adam.step, 0);
}

#[test]
fn learning_rate_schedule() {
    assert_eq!(lr_schedule(0), 5e-3);
    assert!((lr_schedule(1) - 4.5e-3).abs() < 1e-18);
    assert!((lr_schedule(2) - 4.05e-3).abs() < 1e-18);
}
