//! Finite-difference checks for every differentiable op and layer.

use gridplan_autodiff::gradcheck::{central_difference, relative_error};
use gridplan_autodiff::layers::{attention, bilstm_encode, GruCell, LstmCell};
use gridplan_autodiff::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Var;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Contracts the op output with fixed random weights so every output
/// coordinate contributes to the scalar loss.
fn eval(inputs: &[Tensor], weights: &Tensor, build: &Build, with_grad: bool) -> (f64, u64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if with_grad { g.input_with_grad(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let out = build(&mut g, &vars);
    let w = g.input(weights.clone().reshaped(g.shape(out)));
    let prod = g.mul(out, w);
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    let sig = g.kink_signature();
    let grads = if with_grad {
        let gr = g.backward(loss).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| gr.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    } else {
        Vec::new()
    };
    (value, sig, grads)
}

fn check_op(name: &str, inputs: Vec<Tensor>, build: &Build, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let o = build(&mut g, &vars);
        g.value(o).len()
    };
    let weights = random_tensor(&mut rng, &[out_len], -1.0, 1.0);
    let (_, _, analytic) = eval(&inputs, &weights, build, true);
    for (ti, t) in inputs.iter().enumerate() {
        let mut flat = t.data().to_vec();
        for i in 0..flat.len() {
            let probe = central_difference(&mut flat, i, EPS, 3, |x| {
                let mut perturbed = inputs.clone();
                perturbed[ti] = Tensor::new(t.shape().to_vec(), x.to_vec());
                let (v, s, _) = eval(&perturbed, &weights, build, false);
                (v, s)
            });
            let a = analytic[ti].data()[i];
            let err = relative_error(a, probe.numeric, FLOOR);
            assert!(
                err < TOL,
                "{name}: input {ti} coord {i}: analytic {a} numeric {} (rel err {err})",
                probe.numeric
            );
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = random_tensor(&mut r, &[3, 4], 0.5, 2.0);
    check_op("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]), 1);
    check_op("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]), 2);
    check_op("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]), 3);
    check_op("div", vec![a, b], &|g, v| g.div(v[0], v[1]), 4);
}

#[test]
fn pointwise_nonlinearities() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[2, 5], -2.0, 2.0);
    let pos = random_tensor(&mut r, &[2, 5], 0.2, 3.0);
    check_op("relu", vec![a.clone()], &|g, v| g.relu(v[0]), 5);
    check_op("tanh", vec![a.clone()], &|g, v| g.tanh(v[0]), 6);
    check_op("sigmoid", vec![a.clone()], &|g, v| g.sigmoid(v[0]), 7);
    check_op("exp", vec![a.clone()], &|g, v| g.exp(v[0]), 8);
    check_op("ln", vec![pos], &|g, v| g.ln(v[0]), 9);
    check_op("square", vec![a.clone()], &|g, v| g.square(v[0]), 10);
    check_op("scale", vec![a.clone()], &|g, v| g.scale(v[0], -1.7), 11);
    check_op("add_scalar", vec![a], &|g, v| g.add_scalar(v[0], 0.3), 12);
}

#[test]
fn shape_ops() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
    check_op("transpose", vec![a.clone()], &|g, v| g.transpose_last2(v[0]), 13);
    check_op("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], &[6, 4]), 14);
    check_op("concat", vec![a.clone(), b], &|g, v| g.concat(&[v[0], v[1], v[0]]), 15);
    check_op("slice", vec![a.clone()], &|g, v| g.slice_last(v[0], 1, 2), 16);
    check_op("repeat_rows", vec![a.clone()], &|g, v| g.repeat_rows(v[0], 3), 17);
    check_op("sum_last", vec![a.clone()], &|g, v| g.sum_last(v[0]), 18);
    check_op("mean", vec![a], &|g, v| g.mean(v[0]), 19);
}

#[test]
fn linear_algebra_ops() {
    let mut r = rng(4);
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4, 2], -1.0, 1.0);
    let bias = random_tensor(&mut r, &[2], -1.0, 1.0);
    check_op("matmul", vec![a.clone(), b.clone()], &|g, v| g.matmul(v[0], v[1]), 20);
    check_op(
        "dense",
        vec![a, b, bias],
        &|g, v| {
            let m = g.matmul(v[0], v[1]);
            g.add_bias(m, v[2])
        },
        21,
    );
    let x = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let y = random_tensor(&mut r, &[2, 4, 5], -1.0, 1.0);
    check_op("batch_matmul", vec![x, y], &|g, v| g.batch_matmul(v[0], v[1]), 22);
}

#[test]
fn softmax_family() {
    let mut r = rng(5);
    let a = random_tensor(&mut r, &[3, 6], -3.0, 3.0);
    check_op("softmax", vec![a.clone()], &|g, v| g.softmax(v[0]), 23);
    check_op("log_softmax", vec![a], &|g, v| g.log_softmax(v[0]), 24);
}

#[test]
fn convolution_and_pooling() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[2, 2, 7, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut r, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
        check_op(
            "conv2d",
            vec![x.clone(), w.clone(), b.clone()],
            &move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
            30 + stride as u64 * 2 + pad as u64,
        );
    }
    check_op("max_pool", vec![x.clone()], &|g, v| g.max_pool2d(v[0], 2), 40);
    check_op("avg_pool", vec![x], &|g, v| g.avg_pool2d(v[0], 2), 41);
}

#[test]
fn attention_gradients() {
    let mut r = rng(7);
    let m = random_tensor(&mut r, &[2, 5, 3], -2.0, 2.0);
    let ws: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[3, 3], -1.0, 1.0)).collect();
    check_op(
        "attention",
        vec![m, ws[0].clone(), ws[1].clone(), ws[2].clone()],
        &|g, v| attention(g, v[0], v[1], v[2], v[3]),
        50,
    );
}

/// Parameter gradients of a recurrent cell, perturbing every parameter entry.
fn check_params(name: &str, store: &ParamStore, build: &dyn Fn(&mut Graph<'_>) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_len = {
        let mut g = Graph::with_params(store);
        let o = build(&mut g);
        g.value(o).len()
    };
    let weights = random_tensor(&mut rng, &[out_len], -1.0, 1.0);
    let loss_of = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let o = build(&mut g);
        let w = g.input(weights.clone().reshaped(g.shape(o)));
        let p = g.mul(o, w);
        let l = g.sum(p);
        (g.value(l).item(), g.kink_signature())
    };
    let grads = {
        let mut g = Graph::with_params(store);
        let o = build(&mut g);
        let w = g.input(weights.clone().reshaped(g.shape(o)));
        let p = g.mul(o, w);
        let l = g.sum(p);
        g.backward(l).unwrap().into_param_grads()
    };
    for id in store.ids() {
        let t = store.get(id);
        let mut flat = t.data().to_vec();
        for i in 0..flat.len() {
            let probe = central_difference(&mut flat, i, EPS, 3, |x| {
                let mut s = store.clone();
                s.get_mut(id).data_mut().copy_from_slice(x);
                loss_of(&s)
            });
            let a = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, probe.numeric, FLOOR);
            assert!(
                err < TOL,
                "{name}: {} [{i}] analytic {a} numeric {} err {err}",
                store.name(id),
                probe.numeric
            );
        }
    }
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

#[test]
fn gru_parameter_and_state_gradients() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 2, 3, &mut r);
    randomize(&mut store, &mut r, 0.8);
    let h = random_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let x = random_tensor(&mut r, &[2, 2], -1.0, 1.0);
    check_params("gru", &store, &|g| {
        let hv = g.input(h.clone());
        let xv = g.input(x.clone());
        let h1 = gru.step(g, hv, xv);
        gru.step(g, h1, xv)
    });
    // state/input gradients with parameters held fixed
    let mut g = Graph::with_params(&store);
    let hv = g.input_with_grad(h.clone());
    let xv = g.input_with_grad(x.clone());
    let out = gru.step(&mut g, hv, xv);
    let loss = g.sum(out);
    let grads = g.backward(loss).unwrap();
    let f = |hh: &[f64], xx: &[f64]| {
        let mut g = Graph::with_params(&store);
        let hv = g.input(Tensor::new(vec![2, 3], hh.to_vec()));
        let xv = g.input(Tensor::new(vec![2, 2], xx.to_vec()));
        let o = gru.step(&mut g, hv, xv);
        g.value(o).sum()
    };
    let mut hf = h.data().to_vec();
    for i in 0..hf.len() {
        let p = central_difference(&mut hf, i, EPS, 0, |v| (f(v, x.data()), 0));
        assert!(relative_error(grads.wrt(hv).unwrap().data()[i], p.numeric, FLOOR) < TOL);
    }
    let mut xf = x.data().to_vec();
    for i in 0..xf.len() {
        let p = central_difference(&mut xf, i, EPS, 0, |v| (f(h.data(), v), 0));
        assert!(relative_error(grads.wrt(xv).unwrap().data()[i], p.numeric, FLOOR) < TOL);
    }
}

#[test]
fn bilstm_gradients() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let fwd = LstmCell::new(&mut store, "f", 2, 3, &mut r);
    let bwd = LstmCell::new(&mut store, "b", 2, 3, &mut r);
    randomize(&mut store, &mut r, 0.7);
    let seq = random_tensor(&mut r, &[2, 4, 2], -1.5, 1.5);
    check_params("bilstm", &store, &|g| {
        let s = g.input(seq.clone());
        bilstm_encode(g, &fwd, &bwd, s)
    });
    // wrt the sequence
    let run = |sv: &[f64]| {
        let mut g = Graph::with_params(&store);
        let s = g.input(Tensor::new(vec![2, 4, 2], sv.to_vec()));
        let o = bilstm_encode(&mut g, &fwd, &bwd, s);
        let sq = g.square(o);
        g.value(sq).sum()
    };
    let mut g = Graph::with_params(&store);
    let s = g.input_with_grad(seq.clone());
    let o = bilstm_encode(&mut g, &fwd, &bwd, s);
    let sq = g.square(o);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let mut flat = seq.data().to_vec();
    for i in 0..flat.len() {
        let p = central_difference(&mut flat, i, EPS, 0, |v| (run(v), 0));
        let a = grads.wrt(s).unwrap().data()[i];
        assert!(relative_error(a, p.numeric, FLOOR) < TOL, "seq[{i}]: {a} vs {}", p.numeric);
    }
}

#[test]
fn backward_does_not_mutate_forward_values() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 2, 4, &mut r);
    let mut g = Graph::with_params(&store);
    let h = g.input(random_tensor(&mut r, &[3, 4], -1.0, 1.0));
    let x = g.input(random_tensor(&mut r, &[3, 2], -1.0, 1.0));
    let out = gru.step(&mut g, h, x);
    let sm = g.softmax(out);
    let loss = g.sum(sm);
    let before = g.value_checksum();
    let _ = g.backward(loss).unwrap();
    assert_eq!(before, g.value_checksum());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.input(random_tensor(&mut r, &[rows, cols], -20.0, 20.0));
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_gradient_random_shapes(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[m, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[k, n], -1.0, 1.0);
        check_op("matmul", vec![a, b], &|g, v| {
            let p = g.matmul(v[0], v[1]);
            g.tanh(p)
        }, seed);
    }

    #[test]
    fn conv_gradient_random_shapes(
        c in 1usize..3, o in 1usize..3, h in 3usize..7, w in 3usize..7,
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, c, h, w], -1.0, 1.0);
        let k = random_tensor(&mut r, &[o, c, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[o], -1.0, 1.0);
        check_op("conv2d", vec![x, k, b], &move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad), seed);
    }

    #[test]
    fn attention_with_zero_values_is_identity(n in 1usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let m = random_tensor(&mut r, &[1, n, 3], -50.0, 50.0);
        let mut g = Graph::new();
        let mv = g.input(m.clone());
        let wq = g.input(random_tensor(&mut r, &[3, 3], -1.0, 1.0));
        let wk = g.input(random_tensor(&mut r, &[3, 3], -1.0, 1.0));
        let wv = g.input(Tensor::zeros(&[3, 3]));
        let out = attention(&mut g, mv, wq, wk, wv);
        prop_assert_eq!(g.value(out), &m);
    }

    #[test]
    fn softmax_and_log_softmax_gradients(rows in 1usize..4, cols in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[rows, cols], -3.0, 3.0);
        check_op("softmax", vec![a.clone()], &|g, v| g.softmax(v[0]), seed);
        check_op("log_softmax", vec![a], &|g, v| g.log_softmax(v[0]), seed + 1);
    }
}
