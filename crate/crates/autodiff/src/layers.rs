//! Layers built from graph primitives.
//!
//! Each layer owns only [`ParamId`]s; the tensors live in a [`ParamStore`].
//! Batched inputs put the batch on the first axis.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{he_uniform, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            xavier_uniform(rng, &[inputs, outputs], inputs, outputs),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// He-initialised variant for layers followed by a ReLU.
    pub fn new_relu(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            he_uniform(rng, &[inputs, outputs], inputs),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x: [rows, in] -> [rows, out]`
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

/// 2-D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.insert(
            format!("{name}.weight"),
            he_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Residual single-head self-attention:
/// `m + softmax(Q K^T / sqrt(C)) V` with `Q = m W_q`, `K = m W_k`, `V = m W_v`.
///
/// `m: [B, N, C]`, projections `[C, C]`. No masking.
pub fn attention(g: &mut Graph<'_>, m: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let s = g.shape(m).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let flat = g.reshape(m, &[b * n, c]);
    let project = |g: &mut Graph<'_>, w: Var| {
        let p = g.matmul(flat, w);
        g.reshape(p, &[b, n, c])
    };
    let q = project(g, wq);
    let k = project(g, wk);
    let v = project(g, wv);
    let kt = g.transpose_last2(k);
    let scores = g.batch_matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (c as f64).sqrt());
    let weights = g.softmax(scaled);
    let mixed = g.batch_matmul(weights, v);
    g.add(m, mixed)
}

/// Parameters for [`attention`].
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let mut mk = |suffix: &str| {
            store.insert(
                format!("{name}.{suffix}"),
                xavier_uniform(rng, &[dim, dim], dim, dim),
            )
        };
        let w_q = mk("w_q");
        let w_k = mk("w_k");
        let w_v = mk("w_v");
        Self { w_q, w_k, w_v }
    }

    pub fn forward(&self, g: &mut Graph<'_>, m: Var) -> Var {
        let wq = g.param(self.w_q);
        let wk = g.param(self.w_k);
        let wv = g.param(self.w_v);
        attention(g, m, wq, wk, wv)
    }
}

/// Gated recurrent unit.
///
/// ```text
/// z  = sigmoid([x; h] W_z + b_z)
/// r  = sigmoid([x; h] W_r + b_r)
/// h~ = tanh([x; r*h] W_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan = inputs + hidden;
        let mut w = |s: &str| {
            store.insert(
                format!("{name}.{s}"),
                xavier_uniform(rng, &[fan, hidden], fan, hidden),
            )
        };
        let (w_z, w_r, w_h) = (w("w_z"), w("w_r"), w("w_h"));
        let mut b = |s: &str| store.insert(format!("{name}.{s}"), Tensor::zeros(&[hidden]));
        let (b_z, b_r, b_h) = (b("b_z"), b("b_r"), b("b_h"));
        Self {
            w_z,
            w_r,
            w_h,
            b_z,
            b_r,
            b_h,
            inputs,
            hidden,
        }
    }

    /// `h: [B, hidden]`, `x: [B, inputs]`
    pub fn step(&self, g: &mut Graph<'_>, h: Var, x: Var) -> Var {
        let xh = g.concat(&[x, h]);
        let gate = |g: &mut Graph<'_>, inp: Var, w: ParamId, b: ParamId| {
            let w = g.param(w);
            let b = g.param(b);
            let a = g.matmul(inp, w);
            g.add_bias(a, b)
        };
        let za = gate(g, xh, self.w_z, self.b_z);
        let z = g.sigmoid(za);
        let ra = gate(g, xh, self.w_r, self.b_r);
        let r = g.sigmoid(ra);
        let rh = g.mul(r, h);
        let xrh = g.concat(&[x, rh]);
        let ca = gate(g, xrh, self.w_h, self.b_h);
        let cand = g.tanh(ca);
        let delta = g.sub(cand, h);
        let zd = g.mul(z, delta);
        g.add(h, zd)
    }
}

/// Long short-term memory cell. Gate columns of the fused weight are
/// ordered input, forget, cell candidate, output:
///
/// ```text
/// [i f g o] = [x; h] W + b
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
/// h' = sigmoid(o) * tanh(c')
/// ```
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let fan = inputs + hidden;
        let weight = store.insert(
            format!("{name}.weight"),
            xavier_uniform(rng, &[fan, 4 * hidden], fan, hidden),
        );
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[4 * hidden]));
        Self {
            weight,
            bias,
            inputs,
            hidden,
        }
    }

    /// Returns `(h', c')`.
    pub fn step(&self, g: &mut Graph<'_>, h: Var, c: Var, x: Var) -> (Var, Var) {
        let hd = self.hidden;
        let xh = g.concat(&[x, h]);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let a = g.matmul(xh, w);
        let a = g.add_bias(a, b);
        let i = g.slice_last(a, 0, hd);
        let f = g.slice_last(a, hd, hd);
        let cand = g.slice_last(a, 2 * hd, hd);
        let o = g.slice_last(a, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_next = g.add(fc, ig);
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc);
        (h_next, c_next)
    }

    /// Runs over `steps` (each `[B, inputs]`) from a zero state; returns the
    /// final hidden state.
    pub fn run(&self, g: &mut Graph<'_>, steps: &[Var]) -> Var {
        let batch = g.shape(steps[0])[0];
        let mut h = g.input(Tensor::zeros(&[batch, self.hidden]));
        let mut c = g.input(Tensor::zeros(&[batch, self.hidden]));
        for &x in steps {
            (h, c) = self.step(g, h, c, x);
        }
        h
    }
}

/// Bidirectional LSTM summarising a sequence into `[h_forward; h_backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), inputs, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), inputs, hidden, rng),
        }
    }

    /// `seq: [B, T, inputs] -> [B, 2 * hidden]`
    pub fn encode(&self, g: &mut Graph<'_>, seq: Var) -> Var {
        bilstm_encode(g, &self.forward, &self.backward, seq)
    }
}

/// Concatenation of the final forward and final backward hidden states.
pub fn bilstm_encode(g: &mut Graph<'_>, fwd: &LstmCell, bwd: &LstmCell, seq: Var) -> Var {
    let s = g.shape(seq).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(seq, &[b, t * d]);
    let steps: Vec<Var> = (0..t).map(|i| g.slice_last(flat, i * d, d)).collect();
    let hf = fwd.run(g, &steps);
    let rev: Vec<Var> = steps.iter().rev().copied().collect();
    let hb = bwd.run(g, &rev);
    g.concat(&[hf, hb])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye3() -> Tensor {
        Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    #[test]
    fn single_row_attention_with_identity_projections() {
        let mut g = Graph::new();
        let m = g.input(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]));
        let w = g.input(eye3());
        let out = attention(&mut g, m, w, w, w);
        assert_eq!(g.value(out).data(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut store = ParamStore::new();
        let att = SelfAttention::new(&mut store, "att", 3, &mut rng);
        let run = |rows: &[Vec<f64>]| {
            let mut g = Graph::with_params(&store);
            let m = g.input(Tensor::from_rows(rows).reshaped(&[1, rows.len(), 3]));
            let o = att.forward(&mut g, m);
            g.value(o).clone()
        };
        let base = run(&rows);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let out = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                let a = out.data()[dst * 3 + c];
                let b = base.data()[src * 3 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn zero_gru(hidden: usize, inputs: usize) -> (ParamStore, GruCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "gru", inputs, hidden, &mut rng);
        store.zero_all();
        (store, cell)
    }

    #[test]
    fn gru_zero_params_halves_the_state() {
        let (store, cell) = zero_gru(3, 2);
        let mut g = Graph::with_params(&store);
        let h = g.input(Tensor::new(vec![1, 3], vec![0.4, -2.0, 1.0]));
        let x = g.input(Tensor::new(vec![1, 2], vec![5.0, -1.0]));
        let out = cell.step(&mut g, h, x);
        assert_eq!(g.value(out).data(), &[0.2, -1.0, 0.5]);

        let mut g = Graph::with_params(&store);
        let h = g.input(Tensor::zeros(&[1, 3]));
        let x = g.input(Tensor::zeros(&[1, 2]));
        let out = cell.step(&mut g, h, x);
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_saturated_update_gate_takes_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut rng);
        store.get_mut(cell.b_z).data_mut().fill(50.0);
        let h0 = Tensor::new(vec![1, 3], vec![0.3, -0.6, 0.9]);
        let x0 = Tensor::new(vec![1, 2], vec![0.5, 1.5]);
        let mut g = Graph::with_params(&store);
        let h = g.input(h0.clone());
        let x = g.input(x0.clone());
        let out = cell.step(&mut g, h, x);
        // candidate computed by hand from the same parameters
        let r: Vec<f64> = {
            let mut gg = Graph::with_params(&store);
            let xh = gg.input(Tensor::new(vec![1, 5], vec![0.5, 1.5, 0.3, -0.6, 0.9]));
            let w = gg.param(cell.w_r);
            let b = gg.param(cell.b_r);
            let a = gg.matmul(xh, w);
            let a = gg.add_bias(a, b);
            let s = gg.sigmoid(a);
            gg.value(s).data().to_vec()
        };
        let mut gg = Graph::with_params(&store);
        let rh: Vec<f64> = r.iter().zip(h0.data()).map(|(a, b)| a * b).collect();
        let xrh = gg.input(Tensor::new(vec![1, 5], [x0.data(), &rh[..]].concat()));
        let w = gg.param(cell.w_h);
        let b = gg.param(cell.b_h);
        let a = gg.matmul(xrh, w);
        let a = gg.add_bias(a, b);
        let cand = gg.tanh(a);
        for (o, c) in g.value(out).data().iter().zip(gg.value(cand).data()) {
            assert!((o - c).abs() < 1e-12, "{o} vs {c}");
        }
    }

    #[test]
    fn bilstm_zero_params_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, "traj", 2, 4, &mut rng);
        store.zero_all();
        let mut g = Graph::with_params(&store);
        let seq = g.input(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = bi.encode(&mut g, seq);
        assert_eq!(g.shape(out), &[1, 8]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversing_sequence_swaps_halves_with_tied_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "tied", 2, 3, &mut rng);
        let seq: Vec<f64> = (0..10).map(|i| (f64::from(i) * 0.37).sin()).collect();
        let rev: Vec<f64> = seq.chunks(2).rev().flatten().copied().collect();
        let run = |s: &[f64]| {
            let mut g = Graph::with_params(&store);
            let v = g.input(Tensor::new(vec![1, 5, 2], s.to_vec()));
            let o = bilstm_encode(&mut g, &cell, &cell, v);
            g.value(o).data().to_vec()
        };
        let a = run(&seq);
        let b = run(&rev);
        assert_eq!(&a[..3], &b[3..]);
        assert_eq!(&a[3..], &b[..3]);
    }
}
