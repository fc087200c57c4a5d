//! A small reverse-mode autodiff tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! bound from a [`ParamStore`] as leaves; [`Tape::backward`] walks the nodes in
//! reverse and returns the gradient of a scalar with respect to every node,
//! from which [`Gradients::accumulate_into`] collects parameter gradients.
//!
//! Tensors are treated as matrices where an op needs it: the last axis is the
//! column axis and leading axes fold into rows (see [`Tensor::as_matrix`]).

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::nn::{GradBuffer, ParamId, ParamStore};
use crate::roi::Sampler;
use crate::tensor::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m, n] * [n]` broadcast over rows.
    MulRow(Var, Var),
    /// `[c, ...] + [c]` broadcast over everything after the first axis.
    AddChannel(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `a * b^T`.
    MatMulNt(Var, Var),
    Transpose(Var),
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    /// `sqrt(x + eps)`.
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    Sample(Var, Rc<Sampler>),
    Concat(Vec<Var>),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    /// Mean cross-entropy of row-wise softmax against class targets.
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a parameter; binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound.push((id, v));
        v
    }

    fn binary_same(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{name}: operand sizes differ ({:?} vs {:?})",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, n) = self.value(a).as_matrix();
        assert_eq!(self.value(bias).len(), n, "add_row: bias width");
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, x) in row.iter_mut().zip(&b) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn mul_row(&mut self, a: Var, gain: Var) -> Var {
        let (_, n) = self.value(a).as_matrix();
        assert_eq!(self.value(gain).len(), n, "mul_row: gain width");
        let mut out = self.value(a).clone();
        let g = self.value(gain).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, x) in row.iter_mut().zip(&g) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRow(a, gain))
    }

    pub fn add_channel(&mut self, a: Var, bias: Var) -> Var {
        let c = self.shape(a)[0];
        assert_eq!(self.value(bias).len(), c, "add_channel: bias length");
        let mut out = self.value(a).clone();
        let per = out.len() / c;
        let b = self.value(bias).data().to_vec();
        for (ch, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
            for o in chunk {
                *o += b[ch];
            }
        }
        self.push(out, Op::AddChannel(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v += s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).as_matrix();
        let (k2, n) = self.value(b).as_matrix();
        assert_eq!(
            k,
            k2,
            "matmul inner dims {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).as_matrix();
        let (n, k2) = self.value(b).as_matrix();
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).as_matrix();
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::Transpose(a))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(out, op)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * math::sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var, eps: f64) -> Var {
        self.map(a, |x| math::sqrt(x + eps), Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `[m, n] -> [n]`, averaging over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).as_matrix();
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks_exact(n) {
            axpy(1.0, row, &mut out);
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        self.push(Tensor::from_vec(&[n], out), Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.value(a).as_matrix();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            math::softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (_, n) = self.value(a).as_matrix();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// 2-D convolution of a `[c, h, w]` input with a `[out_ch, c*k*k]` weight.
    /// Output is `[out_ch, out_h, out_w]` without bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let s = self.shape(input);
        assert_eq!(s.len(), 3, "conv2d expects [c,h,w], got {s:?}");
        let (in_ch, in_h, in_w) = (s[0], s[1], s[2]);
        let (out_ch, kk) = self.value(weight).as_matrix();
        assert_eq!(kk, in_ch * kernel * kernel, "conv2d weight width");
        assert!(
            in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel,
            "conv2d input smaller than kernel"
        );
        let geom = ConvGeom {
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            pad,
        };
        let col = im2col(self.value(input).data(), &geom);
        let n = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; out_ch * n];
        matmul_acc(self.value(weight).data(), &col, &mut out, out_ch, kk, n);
        self.push(
            Tensor::from_vec(&[out_ch, geom.out_h(), geom.out_w()], out),
            Op::Conv2d {
                input,
                weight,
                geom,
                col,
            },
        )
    }

    /// Applies a sparse spatial sampler to a `[c, h, w]` (or `[c, h*w]`) map,
    /// giving `[c, sampler.outputs()]`.
    pub fn sample(&mut self, input: Var, sampler: Rc<Sampler>) -> Var {
        let t = self.value(input);
        let c = t.shape()[0];
        let hw = t.len() / c;
        assert_eq!(hw, sampler.input_len(), "sampler input size");
        let n_out = sampler.outputs();
        let mut out = vec![0.0; c * n_out];
        for ch in 0..c {
            sampler.apply(
                &t.data()[ch * hw..(ch + 1) * hw],
                &mut out[ch * n_out..(ch + 1) * n_out],
            );
        }
        self.push(
            Tensor::from_vec(&[c, n_out], out),
            Op::Sample(input, sampler),
        )
    }

    /// Concatenates along the first axis. Scalars and one-dimensional inputs
    /// concatenate into a vector; `[r_i, n]` inputs stack into `[sum r_i, n]`.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut data = Vec::new();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            if !s.is_empty() {
                assert_eq!(s[1..], first[1..], "concat trailing dims mismatch");
            }
            lead += s.first().copied().unwrap_or(1);
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        if shape.is_empty() {
            shape.push(lead);
        } else {
            shape[0] = lead;
        }
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()))
    }

    /// Stacks same-shaped tensors into a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let inner = self.shape(parts[0]).to_vec();
        let rows: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let mut s = alloc::vec![1];
                s.extend_from_slice(&inner);
                self.reshape(p, &s)
            })
            .collect();
        self.concat(&rows)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).as_matrix();
        assert!(start + len <= m, "slice_rows out of range");
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::from_vec(&[len, n], data), Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let r = self.slice_rows(a, i, 1);
        let n = self.value(r).len();
        self.reshape(r, &[n])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).as_matrix();
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::from_vec(&[m, len], data), Op::SliceCols(a, start))
    }

    /// Mean negative log-likelihood of softmax(`logits` rows) at `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (m, n) = self.value(logits).as_matrix();
        assert_eq!(m, targets.len(), "cross_entropy: one target per row");
        let mut total = 0.0;
        for (row, &t) in self.value(logits).data().chunks_exact(n).zip(targets) {
            assert!(t < n, "cross_entropy: target out of range");
            total += math::log_sum_exp(row) - row[t];
        }
        self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy(logits, targets.to_vec()),
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0).reshaped(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(grads, *a, self, |d| axpy(1.0, gd, d));
                acc(grads, *b, self, |d| axpy(1.0, gd, d));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, self, |d| axpy(1.0, gd, d));
                acc(grads, *b, self, |d| axpy(-1.0, gd, d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, self, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                acc(grads, *b, self, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, self, |d| axpy(1.0, gd, d));
                let n = self.value(*bias).len();
                acc(grads, *bias, self, |d| {
                    for row in gd.chunks_exact(n) {
                        axpy(1.0, row, d);
                    }
                });
            }
            Op::MulRow(a, gain) => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let av = self.value(*a).data();
                acc(grads, *a, self, |d| {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(gd.chunks_exact(n)) {
                        for j in 0..n {
                            drow[j] += grow[j] * gv[j];
                        }
                    }
                });
                acc(grads, *gain, self, |d| {
                    for (arow, grow) in av.chunks_exact(n).zip(gd.chunks_exact(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * arow[j];
                        }
                    }
                });
            }
            Op::AddChannel(a, bias) => {
                acc(grads, *a, self, |d| axpy(1.0, gd, d));
                let c = self.value(*bias).len();
                let per = gd.len() / c;
                acc(grads, *bias, self, |d| {
                    for (ch, chunk) in gd.chunks_exact(per).enumerate() {
                        d[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => acc(grads, *a, self, |d| axpy(*s, gd, d)),
            Op::AddScalar(a) => acc(grads, *a, self, |d| axpy(1.0, gd, d)),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let (_, n) = self.value(*b).as_matrix();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T, dB = A^T G
                acc(grads, *a, self, |d| matmul_nt_acc(gd, bv, d, m, n, k));
                acc(grads, *b, self, |d| matmul_tn_acc(av, gd, d, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let (n, _) = self.value(*b).as_matrix();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A B^T: dA = G B, dB = G^T A
                acc(grads, *a, self, |d| matmul_acc(gd, bv, d, m, n, k));
                acc(grads, *b, self, |d| matmul_tn_acc(gd, av, d, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).as_matrix();
                acc(grads, *a, self, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, self, |d| {
                    for i in 0..d.len() {
                        let s = math::sigmoid(x[i]);
                        d[i] += gd[i] * (s * (1.0 + x[i] * (1.0 - s)));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, self, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, self, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, self, |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * gd[i] * x[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(grads, *a, self, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(grads, *a, self, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(a) => {
                let g0 = gd[0] / self.value(*a).len() as f64;
                acc(grads, *a, self, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).as_matrix();
                let inv = 1.0 / m as f64;
                acc(grads, *a, self, |d| {
                    for row in d.chunks_exact_mut(n) {
                        axpy(inv, gd, row);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = self.value(*a).as_matrix();
                let y = node.value.data();
                acc(grads, *a, self, |d| {
                    for ((drow, yrow), grow) in d
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(gd.chunks_exact(n))
                    {
                        let inner = dot(yrow, grow);
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let (_, n) = self.value(*a).as_matrix();
                let x = self.value(*a).data();
                let xhat = node.value.data();
                acc(grads, *a, self, |d| {
                    for r in 0..d.len() / n {
                        let xr = &x[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / math::sqrt(var + eps);
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let ghmean = dot(gr, hr) / n as f64;
                        for j in 0..n {
                            d[r * n + j] += inv * (gr[j] - gmean - hr[j] * ghmean);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                col,
            } => {
                let n = geom.out_h() * geom.out_w();
                let kk = geom.in_ch * geom.kernel * geom.kernel;
                let wv = self.value(*weight).data();
                acc(grads, *weight, self, |d| {
                    matmul_nt_acc(gd, col, d, geom.out_ch, n, kk)
                });
                acc(grads, *input, self, |d| {
                    let mut dcol = vec![0.0; kk * n];
                    matmul_tn_acc(wv, gd, &mut dcol, geom.out_ch, kk, n);
                    col2im_acc(&dcol, geom, d);
                });
            }
            Op::Sample(input, sampler) => {
                let c = self.shape(*input)[0];
                let hw = sampler.input_len();
                let n_out = sampler.outputs();
                acc(grads, *input, self, |d| {
                    for ch in 0..c {
                        sampler.apply_transpose(
                            &gd[ch * n_out..(ch + 1) * n_out],
                            &mut d[ch * hw..(ch + 1) * hw],
                        );
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, self, |d| axpy(1.0, &gd[offset..offset + len], d));
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(grads, *a, self, |d| axpy(1.0, gd, d)),
            Op::SliceRows(a, start) => {
                let (_, n) = self.value(*a).as_matrix();
                let s = start * n;
                acc(grads, *a, self, |d| axpy(1.0, gd, &mut d[s..s + gd.len()]));
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).as_matrix();
                let len = gd.len() / m.max(1);
                acc(grads, *a, self, |d| {
                    for i in 0..m {
                        axpy(
                            1.0,
                            &gd[i * len..(i + 1) * len],
                            &mut d[i * n + start..i * n + start + len],
                        );
                    }
                });
            }
            Op::CrossEntropy(logits, targets) => {
                let (m, n) = self.value(*logits).as_matrix();
                let lv = self.value(*logits).data();
                let scale = gd[0] / m as f64;
                acc(grads, *logits, self, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let mut p = lv[r * n..(r + 1) * n].to_vec();
                        math::softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        axpy(scale, &p, &mut d[r * n..(r + 1) * n]);
                    }
                });
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, tape: &Tape, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(tape.shape(v)));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let k = g.kernel;
    let mut col = vec![0.0; g.in_ch * k * k * n];
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_acc(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds `scale * dL/dparam` for every bound parameter into `buffer`.
    pub fn accumulate_into(&self, buffer: &mut GradBuffer, scale: f64) {
        for &(id, v) in &self.bound {
            if let Some(g) = self.get(v) {
                buffer.add(id, g, scale);
            }
        }
    }
}
