//! Operation tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in evaluation
//! order. [`Graph::backward`] walks the tape in reverse and accumulates
//! exact gradients; gradients that reach parameter leaves are collected
//! into a [`Gradients`] buffer aligned with the [`ParamStore`].
//!
//! Tensors are treated as `[rows, last_dim]` matrices wherever an op
//! works on the last dimension.

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const NO_TAP: usize = usize::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
    Softplus,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// `taps[i·width + k]` is the input row read by output row `i`, tap `k`.
    Conv { x: NodeId, w: NodeId, b: NodeId, taps: Vec<usize> },
    GatherTime { x: NodeId, idx: Vec<usize> },
    Act { x: NodeId, act: Activation },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    SelectTime { x: NodeId, t: usize },
    SelectCol { x: NodeId, col: usize },
    ScaleRows { x: NodeId, s: NodeId },
    Softmax(NodeId),
    RepeatRows { x: NodeId, times: usize },
    Monotone(NodeId),
    MulConst { x: NodeId, c: Vec<f64> },
    Outer { x: NodeId, c: Vec<f64> },
    Reshape(NodeId),
    Pinball { pred: NodeId, target: Vec<f64>, q: Vec<f64>, weight: Vec<f64> },
    Sum(NodeId),
    Scale { x: NodeId, k: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(op: &str, detail: String) -> Result<T> {
    invalid(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is reported for it).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// `x W + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape.len() != 2 || xv.last_dim() != wv.shape[0] {
            return shape_err("linear", format!("x {:?} vs W {:?}", xv.shape, wv.shape));
        }
        let (n_in, n_out) = (wv.shape[0], wv.shape[1]);
        if let Some(b) = b {
            if self.value(b).numel() != n_out {
                return shape_err("linear", format!("bias {:?} for {n_out} outputs", self.value(b).shape));
            }
        }
        let rows = xv.rows();
        let mut out = vec![0.0; rows * n_out];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for r in 0..rows {
                out[r * n_out..(r + 1) * n_out].copy_from_slice(bv);
            }
        }
        for r in 0..rows {
            let xr = &xv.data[r * n_in..(r + 1) * n_in];
            let yr = &mut out[r * n_out..(r + 1) * n_out];
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wr = &wv.data[i * n_out..(i + 1) * n_out];
                for (y, w) in yr.iter_mut().zip(wr) {
                    *y += xi * w;
                }
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().expect("non-empty shape") = n_out;
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }))
    }

    /// Dilated causal convolution over `[batch, time, c_in]` with kernel
    /// `[width, c_in, c_out]`. Tap `k` reads `x[t - k·dilation]`; taps before
    /// the series start read zero padding.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
        if dilation == 0 {
            return shape_err("conv", "dilation must be >= 1".into());
        }
        let xs = &self.value(x).shape;
        let nt = if xs.len() == 3 { xs[1] } else { 0 };
        let times: Vec<usize> = (0..nt).collect();
        self.conv_at(x, w, b, dilation, &times, &times)
    }

    /// Convolution evaluated only at `out_times`, reading an input whose rows
    /// hold the times `in_times` (ascending). Every non-negative tap of every
    /// output time must be present in `in_times`.
    pub fn conv_at(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
        in_times: &[usize],
        out_times: &[usize],
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape.len() != 3
            || wv.shape.len() != 3
            || wv.shape[1] != xv.shape[2]
            || bv.numel() != wv.shape[2]
            || xv.shape[1] != in_times.len()
        {
            return shape_err("conv", format!("x {:?}, W {:?}, b {:?}", xv.shape, wv.shape, bv.shape));
        }
        if dilation == 0 {
            return shape_err("conv", "dilation must be >= 1".into());
        }
        let kw = wv.shape[0];
        let mut taps = Vec::with_capacity(out_times.len() * kw);
        for &t in out_times {
            for k in 0..kw {
                match t.checked_sub(k * dilation) {
                    None => taps.push(NO_TAP),
                    Some(src) => match in_times.binary_search(&src) {
                        Ok(row) => taps.push(row),
                        Err(_) => return shape_err("conv", format!("time {src} needed by output {t} is not in the input")),
                    },
                }
            }
        }
        let (nb, nt_in, ci) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let (nt, co) = (out_times.len(), wv.shape[2]);
        let mut out = vec![0.0; nb * nt * co];
        for bi in 0..nb {
            for i in 0..nt {
                let yr = &mut out[(bi * nt + i) * co..(bi * nt + i + 1) * co];
                yr.copy_from_slice(&bv.data);
                for k in 0..kw {
                    let src = taps[i * kw + k];
                    if src == NO_TAP {
                        continue;
                    }
                    let xr = &xv.data[(bi * nt_in + src) * ci..(bi * nt_in + src + 1) * ci];
                    for (c, &xc) in xr.iter().enumerate() {
                        if xc == 0.0 {
                            continue;
                        }
                        let wr = &wv.data[(k * ci + c) * co..(k * ci + c + 1) * co];
                        for (y, w) in yr.iter_mut().zip(wr) {
                            *y += xc * w;
                        }
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![nb, nt, co],
            data: out,
        };
        Ok(self.push(value, Op::Conv { x, w, b, taps }))
    }

    /// `[batch, time, c] -> [batch, idx.len(), c]` picking time rows `idx`.
    pub fn gather_time(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || idx.iter().any(|&i| i >= xv.shape[1]) {
            return shape_err("gather_time", format!("{idx:?} from {:?}", xv.shape));
        }
        let (nb, nt, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let mut data = Vec::with_capacity(nb * idx.len() * c);
        for b in 0..nb {
            for &i in &idx {
                data.extend_from_slice(&xv.data[(b * nt + i) * c..(b * nt + i + 1) * c]);
            }
        }
        let value = Tensor {
            shape: vec![nb, idx.len(), c],
            data,
        };
        Ok(self.push(value, Op::GatherTime { x, idx }))
    }

    pub fn act(&mut self, x: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return x;
        }
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| act.apply(v)).collect(),
        };
        self.push(value, Op::Act { x, act })
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).numel() != self.value(b).numel() {
            return shape_err(op, format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Concatenates along the last dimension; all parts must share rows.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no parts".into());
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.shape[..v.shape.len() - 1] != self.value(first).shape[..self.value(first).shape.len() - 1] {
                return shape_err("concat", format!("{:?} vs {:?}", v.shape, self.value(first).shape));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.value(first).shape.clone();
        *shape.last_mut().expect("non-empty shape") = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec())))
    }

    /// `[batch, time, c] -> [batch, c]` at time index `t`.
    pub fn select_time(&mut self, x: NodeId, t: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || t >= xv.shape[1] {
            return shape_err("select_time", format!("t = {t} for {:?}", xv.shape));
        }
        let (nb, nt, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let mut data = Vec::with_capacity(nb * c);
        for b in 0..nb {
            data.extend_from_slice(&xv.data[(b * nt + t) * c..(b * nt + t + 1) * c]);
        }
        Ok(self.push(Tensor { shape: vec![nb, c], data }, Op::SelectTime { x, t }))
    }

    /// Column `col` of a `[rows, cols]` tensor as `[rows, 1]`.
    pub fn select_col(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if col >= c {
            return shape_err("select_col", format!("col {col} of {:?}", xv.shape));
        }
        let rows = xv.rows();
        let data = (0..rows).map(|r| xv.data[r * c + col]).collect();
        Ok(self.push(Tensor { shape: vec![rows, 1], data }, Op::SelectCol { x, col }))
    }

    /// Multiplies every entry of batch item `b` (leading dimension) by `s[b]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.value(x), self.value(s));
        let nb = xv.shape[0];
        if sv.numel() != nb {
            return shape_err("scale_rows", format!("x {:?} vs s {:?}", xv.shape, sv.shape));
        }
        let per = xv.numel() / nb.max(1);
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data[i / per])
            .collect();
        Ok(self.push(Tensor { shape: xv.shape.clone(), data }, Op::ScaleRows { x, s }))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Tensor { shape: xv.shape.clone(), data }, Op::Softmax(x))
    }

    /// `[rows, d] -> [rows · times, d]`, each row repeated `times` times
    /// consecutively.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * times * d);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(&xv.data[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor {
            shape: vec![rows * times, d],
            data,
        };
        self.push(value, Op::RepeatRows { x, times })
    }

    /// Non-crossing quantile head: `y₀ = softplus(x₀)`,
    /// `yₖ = yₖ₋₁ + softplus(xₖ)` along the last dimension.
    pub fn monotone(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = xv.data.clone();
        for row in data.chunks_mut(c) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += softplus(*v);
                *v = acc;
            }
        }
        self.push(Tensor { shape: xv.shape.clone(), data }, Op::Monotone(x))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if c.len() != xv.numel() {
            return shape_err("mul_const", format!("{} constants for {:?}", c.len(), xv.shape));
        }
        let data = xv.data.iter().zip(&c).map(|(a, b)| a * b).collect();
        Ok(self.push(Tensor { shape: xv.shape.clone(), data }, Op::MulConst { x, c }))
    }

    /// `[rows, 1] ⊗ [m] -> [rows, m]`.
    pub fn outer(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.last_dim() != 1 {
            return shape_err("outer", format!("x must be [rows, 1], got {:?}", xv.shape));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * c.len());
        for r in 0..rows {
            data.extend(c.iter().map(|k| xv.data[r] * k));
        }
        let value = Tensor {
            shape: vec![rows, c.len()],
            data,
        };
        Ok(self.push(value, Op::Outer { x, c }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", xv.shape));
        }
        let value = Tensor {
            shape,
            data: xv.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `Σ weight · QL(target, pred; q)` with `q` indexed by column. At a tie
    /// the subgradient of the `pred >= target` branch is used.
    pub fn pinball(&mut self, pred: NodeId, target: Vec<f64>, q: Vec<f64>, weight: Vec<f64>) -> Result<NodeId> {
        let pv = self.value(pred);
        let n = pv.numel();
        if target.len() != n || weight.len() != n || q.is_empty() || pv.last_dim() != q.len() {
            return shape_err(
                "pinball",
                format!("pred {:?}, {} targets, {} quantiles, {} weights", pv.shape, target.len(), q.len(), weight.len()),
            );
        }
        let c = q.len();
        let mut s = 0.0;
        for i in 0..n {
            s += weight[i] * crate::metrics::pinball(target[i], pv.data[i], q[i % c]);
        }
        Ok(self.push(Tensor::scalar(s), Op::Pinball { pred, target, q, weight }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * k).collect(),
        };
        self.push(value, Op::Scale { x, k })
    }

    /// Reverse sweep from scalar `root`; returns parameter gradients.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.numel()]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
            let n = &mut grads[id.0];
            f(n.as_mut().expect("gradient buffer allocated"));
        }

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            // allocate parent buffers lazily
            let ensure = |grads: &mut Vec<Option<Vec<f64>>>, p: NodeId| {
                if grads[p.0].is_none() {
                    grads[p.0] = Some(vec![0.0; self.nodes[p.0].value.numel()]);
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    for (a, g) in out.grads[pid.0].iter_mut().zip(&gy) {
                        *a += g;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n_in, n_out) = (wv.shape[0], wv.shape[1]);
                    let rows = xv.rows();
                    ensure(&mut grads, *x);
                    ensure(&mut grads, *w);
                    acc(&mut grads, *x, |gx| {
                        for r in 0..rows {
                            let gyr = &gy[r * n_out..(r + 1) * n_out];
                            for i in 0..n_in {
                                let wr = &wv.data[i * n_out..(i + 1) * n_out];
                                gx[r * n_in + i] += gyr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    });
                    acc(&mut grads, *w, |gw| {
                        for r in 0..rows {
                            let gyr = &gy[r * n_out..(r + 1) * n_out];
                            for i in 0..n_in {
                                let xi = xv.data[r * n_in + i];
                                if xi == 0.0 {
                                    continue;
                                }
                                for (g, d) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(gyr) {
                                    *g += xi * d;
                                }
                            }
                        }
                    });
                    if let Some(b) = b {
                        ensure(&mut grads, *b);
                        acc(&mut grads, *b, |gb| {
                            for r in 0..rows {
                                for (g, d) in gb.iter_mut().zip(&gy[r * n_out..(r + 1) * n_out]) {
                                    *g += d;
                                }
                            }
                        });
                    }
                }
                Op::Conv { x, w, b, taps } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (nb, nt_in, ci) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                    let (kw, co) = (wv.shape[0], wv.shape[2]);
                    let nt = node.value.shape[1];
                    ensure(&mut grads, *x);
                    ensure(&mut grads, *w);
                    ensure(&mut grads, *b);
                    acc(&mut grads, *b, |gb| {
                        for row in gy.chunks(co) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    });
                    acc(&mut grads, *x, |gx| {
                        for bi in 0..nb {
                            for i in 0..nt {
                                let gyr = &gy[(bi * nt + i) * co..(bi * nt + i + 1) * co];
                                for k in 0..kw {
                                    let src = taps[i * kw + k];
                                    if src == NO_TAP {
                                        continue;
                                    }
                                    let gxr = &mut gx[(bi * nt_in + src) * ci..(bi * nt_in + src + 1) * ci];
                                    for (c, g) in gxr.iter_mut().enumerate() {
                                        let wr = &wv.data[(k * ci + c) * co..(k * ci + c + 1) * co];
                                        *g += gyr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                }
                            }
                        }
                    });
                    acc(&mut grads, *w, |gw| {
                        for bi in 0..nb {
                            for i in 0..nt {
                                let gyr = &gy[(bi * nt + i) * co..(bi * nt + i + 1) * co];
                                for k in 0..kw {
                                    let src = taps[i * kw + k];
                                    if src == NO_TAP {
                                        continue;
                                    }
                                    let xr = &xv.data[(bi * nt_in + src) * ci..(bi * nt_in + src + 1) * ci];
                                    for (c, &xc) in xr.iter().enumerate() {
                                        if xc == 0.0 {
                                            continue;
                                        }
                                        let gwr = &mut gw[(k * ci + c) * co..(k * ci + c + 1) * co];
                                        for (g, d) in gwr.iter_mut().zip(gyr) {
                                            *g += xc * d;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::GatherTime { x, idx } => {
                    let xs = &self.value(*x).shape;
                    let (nb, nt, c) = (xs[0], xs[1], xs[2]);
                    let m = idx.len();
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for b in 0..nb {
                            for (j, &i) in idx.iter().enumerate() {
                                for ch in 0..c {
                                    g[(b * nt + i) * c + ch] += gy[(b * m + j) * c + ch];
                                }
                            }
                        }
                    });
                }
                Op::Act { x, act } => {
                    let xv = self.value(*x);
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |gx| {
                        for i in 0..gy.len() {
                            gx[i] += gy[i] * act.derivative(xv.data[i], node.value.data[i]);
                        }
                    });
                }
                Op::Add(a, b) => {
                    for p in [a, b] {
                        ensure(&mut grads, *p);
                        acc(&mut grads, *p, |g| {
                            for (x, d) in g.iter_mut().zip(&gy) {
                                *x += d;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    ensure(&mut grads, *a);
                    acc(&mut grads, *a, |g| {
                        for i in 0..gy.len() {
                            g[i] += gy[i] * bv[i];
                        }
                    });
                    ensure(&mut grads, *b);
                    acc(&mut grads, *b, |g| {
                        for i in 0..gy.len() {
                            g[i] += gy[i] * av[i];
                        }
                    });
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.last_dim();
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).last_dim();
                        ensure(&mut grads, *p);
                        acc(&mut grads, *p, |g| {
                            for r in 0..rows {
                                for j in 0..w {
                                    g[r * w + j] += gy[r * total + off + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::SelectTime { x, t } => {
                    let xs = &self.value(*x).shape;
                    let (nb, nt, c) = (xs[0], xs[1], xs[2]);
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for b in 0..nb {
                            for j in 0..c {
                                g[(b * nt + t) * c + j] += gy[b * c + j];
                            }
                        }
                    });
                }
                Op::SelectCol { x, col } => {
                    let c = self.value(*x).last_dim();
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for (r, d) in gy.iter().enumerate() {
                            g[r * c + col] += d;
                        }
                    });
                }
                Op::ScaleRows { x, s } => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let nb = xv.shape[0];
                    let per = xv.numel() / nb.max(1);
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for i in 0..gy.len() {
                            g[i] += gy[i] * sv.data[i / per];
                        }
                    });
                    ensure(&mut grads, *s);
                    acc(&mut grads, *s, |g| {
                        for i in 0..gy.len() {
                            g[i / per] += gy[i] * xv.data[i];
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = &node.value.data;
                    let c = node.value.last_dim();
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for r in 0..node.value.rows() {
                            let yr = &y[r * c..(r + 1) * c];
                            let gr = &gy[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                g[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::RepeatRows { x, times } => {
                    let d = self.value(*x).last_dim();
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for (i, row) in gy.chunks(d).enumerate() {
                            let r = i / times;
                            for j in 0..d {
                                g[r * d + j] += row[j];
                            }
                        }
                    });
                }
                Op::Monotone(x) => {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for r in 0..xv.rows() {
                            // dy_j/dx_k = sigmoid(x_k) for j >= k
                            let mut tail = 0.0;
                            for k in (0..c).rev() {
                                tail += gy[r * c + k];
                                g[r * c + k] += tail * sigmoid(xv.data[r * c + k]);
                            }
                        }
                    });
                }
                Op::MulConst { x, c } => {
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for i in 0..gy.len() {
                            g[i] += gy[i] * c[i];
                        }
                    });
                }
                Op::Outer { x, c } => {
                    let m = c.len();
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for (r, gr) in g.iter_mut().enumerate() {
                            *gr += gy[r * m..(r + 1) * m].iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                Op::Reshape(x) => {
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for (a, d) in g.iter_mut().zip(&gy) {
                            *a += d;
                        }
                    });
                }
                Op::Pinball { pred, target, q, weight } => {
                    let pv = self.value(*pred);
                    let c = q.len();
                    ensure(&mut grads, *pred);
                    acc(&mut grads, *pred, |g| {
                        for i in 0..g.len() {
                            let d = if pv.data[i] >= target[i] { 1.0 - q[i % c] } else { -q[i % c] };
                            g[i] += gy[0] * weight[i] * d;
                        }
                    });
                }
                Op::Sum(x) => {
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for a in g.iter_mut() {
                            *a += gy[0];
                        }
                    });
                }
                Op::Scale { x, k } => {
                    ensure(&mut grads, *x);
                    acc(&mut grads, *x, |g| {
                        for (a, d) in g.iter_mut().zip(&gy) {
                            *a += d * k;
                        }
                    });
                }
            }
        }
        out
    }
}
