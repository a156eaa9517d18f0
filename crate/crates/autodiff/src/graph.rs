//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node indices are
//! assigned in evaluation order, so the tape is already topologically sorted
//! and the backward sweep is a single reverse pass over it.

use std::borrow::Cow;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_abt_acc, gemm_acc, gemm_atb_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    RepeatRows(Var, usize),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumLast(Var),
    Conv2d(Var, Var, Var, Conv2dGeom),
    MaxPool2d(Var, Vec<usize>),
    AvgPool2d(Var, usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one forward/backward step.
///
/// Parameters are borrowed from a [`ParamStore`], never copied.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A graph without parameters; only inputs and constants.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Input, true)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param, true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            panic!(
                "{}",
                AutodiffError::Shape {
                    op,
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec()
                }
            );
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same("add", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same("sub", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same("mul", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same("div", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push_op(v, Op::Div(a, b), &[a, b])
    }

    /// `x[..., n] + bias[n]`, broadcast over every leading index.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            panic!(
                "{}",
                AutodiffError::Shape {
                    op: "add_bias",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(bias).to_vec()
                }
            );
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data();
        for row in v.data_mut().chunks_mut(n) {
            for (r, bb) in row.iter_mut().zip(b) {
                *r += bb;
            }
        }
        self.push_op(v, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            panic!(
                "{}",
                AutodiffError::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec()
                }
            );
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push_op(Tensor::new(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            panic!(
                "{}",
                AutodiffError::Shape {
                    op: "batch_matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec()
                }
            );
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push_op(
            Tensor::new(vec![bsz, m, n], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        )
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let v = transpose_last2(self.value(a));
        self.push_op(v, Op::TransposeLast2(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push_op(v, Op::Reshape(a), &[a])
    }

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead = self.shape(parts[0]);
        let lead = lead[..lead.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                panic!(
                    "{}",
                    AutodiffError::Shape {
                        op: "concat",
                        lhs: self.shape(parts[0]).to_vec(),
                        rhs: s.to_vec()
                    }
                );
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push_op(Tensor::new(shape, out), Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a).to_vec();
        let w = s[s.len() - 1];
        assert!(start + len <= w, "slice {start}+{len} out of range for width {w}");
        let rows = self.value(a).len() / w.max(1);
        let mut out = Vec::with_capacity(rows * len);
        let d = self.value(a).data();
        for r in 0..rows {
            out.extend_from_slice(&d[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push_op(Tensor::new(shape, out), Op::Slice(a, start), &[a])
    }

    /// Repeat every entry of the first dimension `k` times, consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let s = self.shape(a).to_vec();
        let n = s[0];
        let inner = self.value(a).len() / n.max(1);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(n * k * inner);
        for i in 0..n {
            for _ in 0..k {
                out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[0] = n * k;
        self.push_op(Tensor::new(shape, out), Op::RepeatRows(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push_op(v, Op::Ln(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push_op(v, Op::Square(a), &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_last(self.value(a));
        self.push_op(v, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.last_dim();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push_op(out, Op::LogSoftmax(a), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last dimension, which is dropped from the shape.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.last_dim();
        let data: Vec<f64> = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        let s = x.shape();
        let shape = s[..s.len().saturating_sub(1)].to_vec();
        self.push_op(Tensor::new(shape, data), Op::SumLast(a), &[a])
    }

    /// 2-D convolution, NCHW input, OIHW kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.shape(b) != [sw[0]] {
            panic!(
                "{}",
                AutodiffError::Shape {
                    op: "conv2d",
                    lhs: sx.to_vec(),
                    rhs: sw.to_vec()
                }
            );
        }
        let geom = Conv2dGeom { stride, pad };
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), geom);
        self.push_op(out, Op::Conv2d(x, w, b, geom), &[x, w, b])
    }

    /// Non-overlapping `k x k` max pooling (NCHW); trailing rows/cols dropped.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; bn * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let d = t.data();
        for plane in 0..bn * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if d[idx] > best {
                                best = d[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let v = Tensor::new(vec![bn, c, oh, ow], out);
        self.push_op(v, Op::MaxPool2d(x, argmax), &[x])
    }

    /// Non-overlapping `k x k` average pooling (NCHW).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; bn * c * oh * ow];
        let d = t.data();
        for plane in 0..bn * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += d[plane * h * w + (oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        let v = Tensor::new(vec![bn, c, oh, ow], out);
        self.push_op(v, Op::AvgPool2d(x, k), &[x])
    }

    /// Order-sensitive checksum over every recorded value.
    pub fn value_checksum(&self) -> u64 {
        self.nodes
            .iter()
            .fold(0u64, |h, n| h.rotate_left(7) ^ n.value.checksum())
    }

    /// Hash of every piecewise-linear branch decision taken on the tape
    /// (ReLU input signs, max-pool winners). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |bit: u64| h = (h ^ bit).wrapping_mul(0x1000_0000_01b3);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.nodes[a.0].value.data() {
                        mix(u64::from(v > 0.0));
                    }
                }
                Op::MaxPool2d(_, argmax) => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::NoForward);
        }
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, 1.0));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            match &node.op {
                Op::Input | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                op => self.backward_op(op, &node.value, g, &mut grads),
            }
        }
        let params = self
            .param_vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v.0).cloned().flatten()))
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: &Var| self.nodes[v.0].value.as_ref();
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Input | Op::Param => unreachable!(),
            Op::Add(a, b) => {
                if needs(b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if needs(b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |x, y| x * y));
                }
                if needs(b) {
                    self.accumulate(grads, *b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |x, y| x / y));
                }
                if needs(b) {
                    // d(a/b)/db = -out / b
                    let t = out.zip_map(val(b), |o, y| -o / y);
                    self.accumulate(grads, *b, g.zip_map(&t, |x, y| x * y));
                }
            }
            Op::AddBias(x, b) => {
                if needs(b) {
                    let n = val(b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n], gb));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_abt_acc(g.data(), val(b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_atb_acc(val(a).data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let gd = g.data();
                if needs(a) {
                    let mut ga = vec![0.0; bsz * m * k];
                    let bd = val(b).data();
                    for i in 0..bsz {
                        gemm_abt_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![bsz, m, k], ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; bsz * k * n];
                    let ad = val(a).data();
                    for i in 0..bsz {
                        gemm_atb_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![bsz, k, n], gb));
                }
            }
            Op::TransposeLast2(a) => self.accumulate(grads, *a, transpose_last2(&g)),
            Op::Reshape(a) => {
                let s = val(a).shape().to_vec();
                self.accumulate(grads, *a, g.reshaped(&s));
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let w = pv.last_dim();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let start = r * total + offset;
                            gp.extend_from_slice(&g.data()[start..start + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), gp));
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let av = val(a);
                let w = av.last_dim();
                let len = out.last_dim();
                let mut ga = vec![0.0; av.len()];
                for (r, grow) in g.data().chunks(len.max(1)).enumerate() {
                    ga[r * w + start..r * w + start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::RepeatRows(a, k) => {
                let av = val(a);
                let n = av.shape()[0];
                let inner = av.len() / n.max(1);
                let mut ga = vec![0.0; av.len()];
                let gd = g.data();
                for i in 0..n {
                    for j in 0..*k {
                        let src = &gd[(i * k + j) * inner..(i * k + j + 1) * inner];
                        for (acc, v) in ga[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::Relu(a) => {
                let ga = g.zip_map(val(a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, t| x * (1.0 - t * t))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s))),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, e| x * e)),
            Op::Ln(a) => self.accumulate(grads, *a, g.zip_map(val(a), |x, y| x / y)),
            Op::Square(a) => self.accumulate(grads, *a, g.zip_map(val(a), |x, y| 2.0 * x * y)),
            Op::Softmax(a) => {
                let n = out.last_dim();
                let mut ga = g.clone();
                for (grow, srow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, s)| x * s).sum();
                    for (x, s) in grow.iter_mut().zip(srow) {
                        *x = s * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let n = out.last_dim();
                let mut ga = g.clone();
                for (grow, lrow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    for (x, l) in grow.iter_mut().zip(lrow) {
                        *x -= l.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = val(a).shape();
                self.accumulate(grads, *a, Tensor::full(s, g.item()));
            }
            Op::SumLast(a) => {
                let av = val(a);
                let n = av.last_dim();
                let mut ga = Vec::with_capacity(av.len());
                for &gv in g.data() {
                    ga.extend(std::iter::repeat_n(gv, n));
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::Conv2d(x, w, b, geom) => {
                let (gx, gw, gb) = conv2d_backward(val(x), val(w), &g, *geom, needs(x));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::MaxPool2d(x, argmax) => {
                let mut gx = Tensor::zeros(val(x).shape());
                let gxd = gx.data_mut();
                for (&gv, &i) in g.data().iter().zip(argmax) {
                    gxd[i] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool2d(x, k) => {
                let xv = val(x);
                let s = xv.shape();
                let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; xv.len()];
                let gd = g.data();
                for plane in 0..bn * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[plane * oh * ow + oy * ow + ox] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    gx[plane * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), gx));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf (input or parameter).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for parameter `id`; `None` if the parameter did not take
    /// part in the computation.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, indexed like the store.
    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.params
    }

    /// Number of nodes processed by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let nd = s.len();
    let (m, n) = (s[nd - 2], s[nd - 1]);
    let batch = t.len() / (m * n).max(1);
    let mut out = vec![0.0; t.len()];
    let d = t.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out)
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output columns `ox` for which `ox*stride + kx - pad` lands inside `[0, input)`.
fn valid_range(input: usize, out: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_num = input as isize - 1 + pad as isize - kx as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Unfolds one `[c, h, w]` image into `[c*kh*kw, oh*ow]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    (c, h, wd): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    geom: Conv2dGeom,
    cols: &mut [f64],
) {
    let Conv2dGeom { stride, pad } = geom;
    let p = oh * ow;
    cols.fill(0.0);
    for ic in 0..c {
        let plane = &img[ic * h * wd..(ic + 1) * h * wd];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(wd, ow, kx, stride, pad);
                let row = &mut cols[((ic * kh + ky) * kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let irow = &plane[iy * wd..(iy + 1) * wd];
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        orow[ox] = irow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image.
fn col2im(
    cols: &[f64],
    (c, h, wd): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    geom: Conv2dGeom,
    img: &mut [f64],
) {
    let Conv2dGeom { stride, pad } = geom;
    let p = oh * ow;
    for ic in 0..c {
        let plane = &mut img[ic * h * wd..(ic + 1) * h * wd];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(wd, ow, kx, stride, pad);
                let row = &cols[((ic * kh + ky) * kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * stride + ky - pad;
                    let irow = &mut plane[iy * wd..(iy + 1) * wd];
                    let grow = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        irow[ox * stride + kx - pad] += grow[ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, geom: Conv2dGeom) -> Tensor {
    let (sx, sw) = (x.shape(), w.shape());
    let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
    let (oh, ow) = (
        conv_out_dim(h, kh, geom.stride, geom.pad),
        conv_out_dim(wd, kw, geom.stride, geom.pad),
    );
    let (p, ckk) = (oh * ow, c * kh * kw);
    let mut out = vec![0.0; bn * o * p];
    let mut cols = vec![0.0; ckk * p];
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    for bi in 0..bn {
        let img = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
        im2col(img, (c, h, wd), (kh, kw), (oh, ow), geom, &mut cols);
        let ob = &mut out[bi * o * p..(bi + 1) * o * p];
        for (oc, plane) in ob.chunks_mut(p).enumerate() {
            plane.fill(bd[oc]);
        }
        gemm_acc(wdat, &cols, ob, o, ckk, p);
    }
    Tensor::new(vec![bn, o, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: Conv2dGeom,
    want_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (sx, sw) = (x.shape(), w.shape());
    let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (p, ckk) = (oh * ow, c * kh * kw);
    let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    let mut cols = vec![0.0; ckk * p];
    let mut gcols = if want_x { vec![0.0; ckk * p] } else { Vec::new() };
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for bi in 0..bn {
        let gbatch = &gd[bi * o * p..(bi + 1) * o * p];
        for (oc, plane) in gbatch.chunks(p).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
        let img = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
        im2col(img, (c, h, wd), (kh, kw), (oh, ow), geom, &mut cols);
        gemm_abt_acc(gbatch, &cols, &mut gw, o, p, ckk);
        if want_x {
            gcols.fill(0.0);
            gemm_atb_acc(wdat, gbatch, &mut gcols, o, ckk, p);
            let gimg = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
            col2im(&gcols, (c, h, wd), (kh, kw), (oh, ow), geom, gimg);
        }
    }
    (
        want_x.then(|| Tensor::new(sx.to_vec(), gx)),
        Tensor::new(sw.to_vec(), gw),
        Tensor::new(vec![o], gb),
    )
}
