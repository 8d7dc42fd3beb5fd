//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! list once in reverse and returns gradients for the leaves that asked for them.

use std::cell::RefCell;
use std::rc::Rc;

use super::{exp_nonpositive, gemm, softmax_in_place, Tensor};
use crate::error::{Error, Result};
use crate::ssm::scan::{selective_scan_ref, selective_scan_traced, selective_scan_vjp, ScanTrace};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Max(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulScalar { x: usize, s: usize },
    AddScalar { x: usize, s: usize },
    Exp(usize),
    Sigmoid(usize),
    Silu(usize),
    Gelu(usize),
    Softplus(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    Reshape(usize),
    Transpose(usize),
    MeanAxis { x: usize, axis: usize },
    Sum(usize),
    Mean(usize),
    GatherRows { x: usize, index: Rc<[usize]> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Attention { q: usize, k: usize, v: usize, window: usize, heads: usize },
    CausalConv { x: usize, w: usize, b: usize },
    Scan { u: usize, delta: usize, a: usize, b: usize, c: usize, d: usize, trace: Option<Rc<ScanTrace>> },
    CrossEntropy { logits: usize, label: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Max(a, b) => vec![*a, *b],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Scale(a, _) | Offset(a) | Exp(a) | Sigmoid(a) | Silu(a) | Gelu(a) | Softplus(a)
            | Softmax(a) | Reshape(a) | Transpose(a) | Sum(a) | Mean(a) => vec![*a],
            MulScalar { x, s } | AddScalar { x, s } => vec![*x, *s],
            LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            MeanAxis { x, .. } | GatherRows { x, .. } | SliceCols { x, .. } => vec![*x],
            ConcatCols(ids) => ids.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            CausalConv { x, w, b } => vec![*x, *w, *b],
            Scan { u, delta, a, b, c, d, .. } => vec![*u, *delta, *a, *b, *c, *d],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Rc::new(value), requires_grad)
    }

    /// Records a leaf without copying its storage.
    pub fn leaf_shared(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in vjp(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    fn binary(self, other: Var<'t>, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        a.same_shape(&b, what)?;
        let out = a.zip_map(&b, f)?;
        Ok(self.tape.push(out, op))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    /// Affine map `x·w + b` for `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let mut out = self.value().matmul(&w.value())?;
        if let Some(b) = b {
            let bias = b.value();
            let n = out.shape()[1];
            if bias.shape() != [n] {
                return Err(Error::dim(format!(
                    "linear bias shape {:?} does not match output width {n}",
                    bias.shape()
                )));
            }
            for row in out.data_mut().chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        Ok(self.tape.push(out, Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) }))
    }

    // Fallible shape checks rule out the operator traits for these three.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Max(self.id, other.id), "max", f64::max)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    /// `s · x` where `s` holds a single value.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = scalar_of(&s.value(), "mul_scalar")?;
        let out = self.value().map(|x| x * sv);
        Ok(self.tape.push(out, Op::MulScalar { x: self.id, s: s.id }))
    }

    /// `x + s` where `s` holds a single value.
    pub fn add_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = scalar_of(&s.value(), "add_scalar")?;
        let out = self.value().map(|x| x + sv);
        Ok(self.tape.push(out, Op::AddScalar { x: self.id, s: s.id }))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |x| {
            0.5 * x * (1.0 + tanh(GELU_K * (x + GELU_C * x * x * x)))
        })
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let out = self.value().softmax_rows();
        self.tape.push(out, Op::Softmax(self.id))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::dim(format!(
                "layer_norm over width {n} got gain {:?} and bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let (g, b) = (gain.value(), bias.value());
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mean, inv) = row_stats(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.tape.push(out, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.tape.push(out, Op::Transpose(self.id)))
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.tape.push(out, Op::MeanAxis { x: self.id, axis }))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let m = x.sum() / x.numel() as f64;
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Output row `i` is input row `index[i]`; repeated indices accumulate gradient.
    pub fn gather_rows(self, index: Rc<[usize]>) -> Result<Var<'t>> {
        let out = self.value().gather_rows(&index)?;
        Ok(self.tape.push(out, Op::GatherRows { x: self.id, index }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        if start + len > cols || len == 0 {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for width {cols}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], out)?;
        Ok(self.tape.push(out, Op::SliceCols { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].dims2()?.0;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols row counts differ: {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(first.tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Multi-head scaled dot-product attention over contiguous row blocks.
    ///
    /// `q`, `k`, `v` are `[n, C]` with `n` a multiple of `window`; rows
    /// `[j·window, (j+1)·window)` attend only to each other. Heads split the
    /// columns into `heads` equal slices. The output is the concatenation of
    /// head outputs, before any output projection.
    pub fn block_attention(
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        window: usize,
        heads: usize,
    ) -> Result<Var<'t>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (n, c) = qv.dims2()?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::dim(format!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if window == 0 || n % window != 0 {
            return Err(Error::dim(format!("{n} tokens do not split into windows of {window}")));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim(format!("width {c} does not split into {heads} heads")));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[n, c]);
        let mut probs = Tensor::zeros(&[window, window]);
        for blk in 0..n / window {
            for h in 0..heads {
                let off = blk * window * c + h * d;
                attention_probs(qv.data(), kv.data(), off, window, d, c, scale, probs.data_mut());
                gemm(
                    window, window, d, 1.0,
                    probs.data(), (window, 1),
                    &vv.data()[off..], (c, 1),
                    0.0, &mut out.data_mut()[off..], (c, 1),
                );
            }
        }
        Ok(q.tape.push(out, Op::Attention { q: q.id, k: k.id, v: v.id, window, heads }))
    }

    /// Causal depthwise 1-D convolution along rows.
    ///
    /// `x: [L, E]`, `w: [E, K]`, `b: [E]`;
    /// `y[t,e] = b[e] + Σ_j w[e,j] · x[t-K+1+j, e]` with zero left padding.
    pub fn causal_conv(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (len, e) = x.dims2()?;
        let (we, k) = wv.dims2()?;
        if we != e || bv.shape() != [e] {
            return Err(Error::dim(format!(
                "causal_conv: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        // Output row t sees input rows t+1-k ..= t; tap j multiplies row t+1-k+j.
        let wt = transpose_taps(wv.data(), e, k);
        let (xd, mut od) = (x.data(), Vec::with_capacity(len * e));
        for t in 0..len {
            od.extend_from_slice(bv.data());
            let row = &mut od[t * e..];
            for j in (k - 1).saturating_sub(t)..k {
                let src = &xd[(t + j + 1 - k) * e..][..e];
                for ((o, &w), &v) in row.iter_mut().zip(&wt[j * e..(j + 1) * e]).zip(src) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(&[len, e], od)?;
        Ok(self.tape.push(out, Op::CausalConv { x: self.id, w: w.id, b: b.id }))
    }

    /// Cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t>> {
        let logits = self.value();
        let k = logits.numel();
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes")));
        }
        let mut p = logits.data().to_vec();
        let max = p.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + p.iter_mut().map(|x| (*x - max).exp()).sum::<f64>().ln();
        let loss = lse - logits.data()[label];
        Ok(self.tape.push(Tensor::scalar(loss), Op::CrossEntropy { logits: self.id, label }))
    }
}

/// Selective scan with diagonal state matrix (recorded on the tape).
///
/// `u, delta: [L, E]`, `a: [E, S]`, `b, c: [L, S]`, `d: [E]`. Per channel `e`:
/// `h_t = exp(Δ_t·A) ⊙ h_{t-1} + Δ_t·B_t·u_t`, `y_t = C_t·h_t + D·u_t`.
pub fn selective_scan<'t>(
    u: Var<'t>,
    delta: Var<'t>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let (uv, dv, av, bv, cv, skip) = (u.value(), delta.value(), a.value(), b.value(), c.value(), d.value());
    let any_grad = [u, delta, a, b, c, d].iter().any(|v| v.requires_grad());
    let (out, trace) = if any_grad {
        let (out, trace) = selective_scan_traced(&uv, &dv, &av, &bv, &cv, &skip)?;
        (out, Some(Rc::new(trace)))
    } else {
        (selective_scan_ref(&uv, &dv, &av, &bv, &cv, &skip)?, None)
    };
    let op = Op::Scan { u: u.id, delta: delta.id, a: a.id, b: b.id, c: c.id, d: d.id, trace };
    Ok(u.tape.push(out, op))
}

fn scalar_of(t: &Tensor, what: &str) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::dim(format!("{what}: expected a single value, got shape {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

// The activations below only ever exponentiate `-|x|`, so they can use the
// cheap kernel for non-positive arguments and never overflow.

pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpositive(-x.abs());
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + ln_1p_unit(exp_nonpositive(-x.abs()))
}

/// `ln(1 + y)` for `y` in `[0, 1]` as `2·atanh(s)`. Above `y = √2 - 1` the
/// argument is halved first, which keeps `|s| <= 0.172` so eleven odd terms
/// of the series reach full precision.
fn ln_1p_unit(y: f64) -> f64 {
    const INV_ODD: [f64; 11] = {
        let mut c = [0.0; 11];
        let mut k = 0;
        while k < 11 {
            c[k] = 1.0 / (2 * k + 1) as f64;
            k += 1;
        }
        c
    };
    // Selects rather than branches: the inputs arrive in no useful order.
    let big = y > std::f64::consts::SQRT_2 - 1.0;
    let offset = if big { std::f64::consts::LN_2 } else { 0.0 };
    let shift = if big { 1.0 } else { 0.0 };
    let s = (y - shift) / (y + 2.0 + shift);
    let s2 = s * s;
    offset + 2.0 * s * INV_ODD.iter().rev().fold(0.0, |p, &c| p * s2 + c)
}

fn tanh(z: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * z.abs());
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

/// `[rows, cols]` row-major to `[cols, rows]`.
fn transpose_taps(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols * rows).map(|i| w[(i % rows) * cols + i / rows]).collect()
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Fills `probs` (`window × window`) with the softmax attention weights of one block and head.
#[allow(clippy::too_many_arguments)]
fn attention_probs(
    q: &[f64],
    k: &[f64],
    off: usize,
    window: usize,
    d: usize,
    c: usize,
    scale: f64,
    probs: &mut [f64],
) {
    gemm(window, d, window, scale, &q[off..], (c, 1), &k[off..], (1, c), 0.0, probs, (window, 1));
    for row in probs.chunks_mut(window) {
        softmax_in_place(row);
    }
}

fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let y = &node.value;
    match node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2().unwrap();
            let n = bv.shape()[1];
            let mut da = Tensor::zeros(&[m, k]);
            gemm(m, n, k, 1.0, g.data(), (n, 1), bv.data(), (1, n), 0.0, da.data_mut(), (k, 1));
            let mut db = Tensor::zeros(&[k, n]);
            gemm(k, m, n, 1.0, av.data(), (1, k), g.data(), (n, 1), 0.0, db.data_mut(), (n, 1));
            vec![(a, da), (b, db)]
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (m, k) = xv.dims2().unwrap();
            let n = wv.shape()[1];
            let mut out = Vec::with_capacity(3);
            if nodes[x].requires_grad {
                let mut dx = Tensor::zeros(&[m, k]);
                gemm(m, n, k, 1.0, g.data(), (n, 1), wv.data(), (1, n), 0.0, dx.data_mut(), (k, 1));
                out.push((x, dx));
            }
            if nodes[w].requires_grad {
                let mut dw = Tensor::zeros(&[k, n]);
                gemm(k, m, n, 1.0, xv.data(), (1, k), g.data(), (n, 1), 0.0, dw.data_mut(), (n, 1));
                out.push((w, dw));
            }
            if let Some(b) = b {
                let mut db = Tensor::zeros(&[n]);
                for row in g.data().chunks(n) {
                    for (acc, v) in db.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push((b, db));
            }
            out
        }
        Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (a, g.zip_map(val(b), |gv, bv| gv * bv).unwrap()),
            (b, g.zip_map(val(a), |gv, av| gv * av).unwrap()),
        ],
        Op::Max(a, b) => {
            let (av, bv) = (val(a), val(b));
            let mut da = g.clone();
            let mut db = g.clone();
            for i in 0..g.numel() {
                if av.data()[i] >= bv.data()[i] {
                    db.data_mut()[i] = 0.0;
                } else {
                    da.data_mut()[i] = 0.0;
                }
            }
            vec![(a, da), (b, db)]
        }
        Op::Scale(a, s) => vec![(a, g.map(|v| v * s))],
        Op::Offset(a) => vec![(a, g.clone())],
        Op::MulScalar { x, s } => {
            let sv = val(s).data()[0];
            let ds: f64 = g.data().iter().zip(val(x).data()).map(|(gv, xv)| gv * xv).sum();
            vec![(x, g.map(|v| v * sv)), (s, Tensor::full(val(s).shape(), ds))]
        }
        Op::AddScalar { x, s } => vec![(x, g.clone()), (s, Tensor::full(val(s).shape(), g.sum()))],
        Op::Exp(a) => vec![(a, g.zip_map(y, |gv, yv| gv * yv).unwrap())],
        Op::Sigmoid(a) => vec![(a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)).unwrap())],
        Op::Silu(a) => vec![(
            a,
            g.zip_map(val(a), |gv, xv| {
                let s = sigmoid(xv);
                gv * (s + xv * s * (1.0 - s))
            })
            .unwrap(),
        )],
        Op::Gelu(a) => vec![(
            a,
            g.zip_map(val(a), |gv, xv| {
                let t = tanh(GELU_K * (xv + GELU_C * xv * xv * xv));
                let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * xv * xv);
                gv * (0.5 * (1.0 + t) + 0.5 * xv * dt)
            })
            .unwrap(),
        )],
        Op::Softplus(a) => vec![(a, g.zip_map(val(a), |gv, xv| gv * sigmoid(xv)).unwrap())],
        Op::Softmax(a) => {
            let n = *y.shape().last().unwrap();
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: f64 = drow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                for (dv, yv) in drow.iter_mut().zip(yrow) {
                    *dv = yv * (*dv - dot);
                }
            }
            vec![(a, dx)]
        }
        Op::LayerNorm { x, gain, bias } => {
            let (xv, gv) = (val(x), val(gain));
            let n = gv.numel();
            let nf = n as f64;
            let mut dx = Tensor::zeros(xv.shape());
            let mut dgain = Tensor::zeros(&[n]);
            let mut dbias = Tensor::zeros(&[n]);
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for ((xrow, grow), dxrow) in xv
                .data()
                .chunks(n)
                .zip(g.data().chunks(n))
                .zip(dx.data_mut().chunks_mut(n))
            {
                let (mean, inv) = row_stats(xrow);
                for j in 0..n {
                    xhat[j] = (xrow[j] - mean) * inv;
                    dxhat[j] = grow[j] * gv.data()[j];
                    dgain.data_mut()[j] += grow[j] * xhat[j];
                    dbias.data_mut()[j] += grow[j];
                }
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dxrow[j] = inv / nf * (nf * dxhat[j] - sum_d - xhat[j] * sum_dx);
                }
            }
            vec![(x, dx), (gain, dgain), (bias, dbias)]
        }
        Op::Reshape(a) => vec![(a, g.reshape(val(a).shape()).unwrap())],
        Op::Transpose(a) => vec![(a, g.transpose().unwrap())],
        Op::MeanAxis { x, axis } => {
            let shape = val(x).shape();
            let (outer, len, inner) = axis_split(shape, axis);
            let inv = 1.0 / len as f64;
            let mut dx = Tensor::zeros(shape);
            let dd = dx.data_mut();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        dd[(o * len + l) * inner + i] = g.data()[o * inner + i] * inv;
                    }
                }
            }
            vec![(x, dx)]
        }
        Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.data()[0]))],
        Op::Mean(a) => {
            let n = val(a).numel() as f64;
            vec![(a, Tensor::full(val(a).shape(), g.data()[0] / n))]
        }
        Op::GatherRows { x, ref index } => {
            let xv = val(x);
            let c = xv.shape()[1];
            let mut dx = Tensor::zeros(xv.shape());
            let dd = dx.data_mut();
            for (i, &src) in index.iter().enumerate() {
                for j in 0..c {
                    dd[src * c + j] += g.data()[i * c + j];
                }
            }
            vec![(x, dx)]
        }
        Op::SliceCols { x, start } => {
            let xv = val(x);
            let (rows, cols) = xv.dims2().unwrap();
            let len = g.shape()[1];
            let mut dx = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                dx.data_mut()[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
            }
            vec![(x, dx)]
        }
        Op::ConcatCols(ref ids) => {
            let (rows, total) = g.dims2().unwrap();
            let mut start = 0;
            ids.iter()
                .map(|&id| {
                    let w = val(id).shape()[1];
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    start += w;
                    (id, Tensor::new(&[rows, w], part).unwrap())
                })
                .collect()
        }
        Op::Attention { q, k, v, window, heads } => attention_vjp(val(q), val(k), val(v), g, window, heads, (q, k, v)),
        Op::CausalConv { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (len, e) = xv.dims2().unwrap();
            let k = wv.shape()[1];
            let wt = transpose_taps(wv.data(), e, k);
            let (xd, gd) = (xv.data(), g.data());
            let mut dx = vec![0.0; len * e];
            let mut dwt = vec![0.0; k * e];
            let mut db = vec![0.0; e];
            for t in 0..len {
                let grow = &gd[t * e..][..e];
                db.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                for j in (k - 1).saturating_sub(t)..k {
                    let src = (t + j + 1 - k) * e;
                    let taps = &wt[j * e..(j + 1) * e];
                    for (((dxv, dwv), (&gv, &w)), &xv) in dx[src..src + e]
                        .iter_mut()
                        .zip(&mut dwt[j * e..(j + 1) * e])
                        .zip(grow.iter().zip(taps))
                        .zip(&xd[src..src + e])
                    {
                        *dxv += gv * w;
                        *dwv += gv * xv;
                    }
                }
            }
            let dw = transpose_taps(&dwt, k, e);
            vec![
                (x, Tensor::new(&[len, e], dx).unwrap()),
                (w, Tensor::new(&[e, k], dw).unwrap()),
                (b, Tensor::new(&[e], db).unwrap()),
            ]
        }
        Op::Scan { u, delta, a, b, c, d, ref trace } => {
            let grads = selective_scan_vjp(val(u), val(delta), val(a), val(b), val(c), val(d), g, trace.as_deref())
                .expect("shapes were checked in the forward pass");
            let [du, ddelta, da, db, dc, dd] = grads;
            vec![(u, du), (delta, ddelta), (a, da), (b, db), (c, dc), (d, dd)]
        }
        Op::CrossEntropy { logits, label } => {
            let lv = val(logits);
            let mut p = lv.clone();
            softmax_in_place(p.data_mut());
            p.data_mut()[label] -= 1.0;
            let gv = g.data()[0];
            p.data_mut().iter_mut().for_each(|v| *v *= gv);
            vec![(logits, p)]
        }
    }
}

fn attention_vjp(
    qv: &Tensor,
    kv: &Tensor,
    vv: &Tensor,
    g: &Tensor,
    window: usize,
    heads: usize,
    (q, k, v): (usize, usize, usize),
) -> Vec<(usize, Tensor)> {
    let (n, c) = qv.dims2().unwrap();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Tensor::zeros(&[n, c]);
    let mut dk = Tensor::zeros(&[n, c]);
    let mut dv = Tensor::zeros(&[n, c]);
    let mut probs = vec![0.0; window * window];
    let mut dprobs = vec![0.0; window * window];
    for blk in 0..n / window {
        for h in 0..heads {
            let off = blk * window * c + h * d;
            attention_probs(qv.data(), kv.data(), off, window, d, c, scale, &mut probs);
            // dV = Pᵀ·dO
            gemm(window, window, d, 1.0, &probs, (1, window), &g.data()[off..], (c, 1), 0.0, &mut dv.data_mut()[off..], (c, 1));
            // dP = dO·Vᵀ
            gemm(window, d, window, 1.0, &g.data()[off..], (c, 1), &vv.data()[off..], (1, c), 0.0, &mut dprobs, (window, 1));
            for (prow, drow) in probs.chunks(window).zip(dprobs.chunks_mut(window)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, dp)| p * dp).sum();
                for (dp, p) in drow.iter_mut().zip(prow) {
                    *dp = p * (*dp - dot) * scale;
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q
            gemm(window, window, d, 1.0, &dprobs, (window, 1), &kv.data()[off..], (c, 1), 0.0, &mut dq.data_mut()[off..], (c, 1));
            gemm(window, window, d, 1.0, &dprobs, (1, window), &qv.data()[off..], (c, 1), 0.0, &mut dk.data_mut()[off..], (c, 1));
        }
    }
    vec![(q, dq), (k, dk), (v, dv)]
}
