//! Wengert-style tape: every forward op appends a node holding its value and
//! parent references, and `backward` walks the nodes in reverse.

use crate::error::{GradError, Result};
use crate::tensor::{broadcast_shape, for_each_broadcast, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    SmoothAbs(Var),
    Square(Var),
    Elu(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>),
    Slice { x: Var, axis: usize, start: usize },
    BernoulliSte(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph. A tape is single-owner while it is being
/// built; create a fresh one per optimization step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every leaf created with
/// [`Tape::param`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not a parameter leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; leaves that the output does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant by `backward`.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GradError::UnknownVar {
                index: v.0,
                len: self.nodes.len(),
            })
        }
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- binary

    fn broadcast_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| GradError::ShapeMismatch {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let (da, db) = (va.data(), vb.data());
        if va.shape() == vb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                out[o] = f(da[ia], db[ib]);
            });
        }
        Tensor::new(out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), v, &[a, b])
    }

    /// Elementwise division; a zero anywhere in the divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        if self.value(b).data().contains(&0.0) {
            return Err(GradError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let v = self.broadcast_binary("div", a, b, |x, y| x / y)?;
        self.push("div", Op::Div(a, b), v, &[a, b])
    }

    // ---------------------------------------------------------------- scalar

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn div_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        if c == 0.0 {
            return Err(GradError::Domain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        self.scale(x, 1.0 / c)
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).map(f);
        self.push(name, op, v, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    /// Natural log; non-positive inputs are an error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(GradError::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    /// Square root; negative inputs are an error.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v < 0.0) {
            return Err(GradError::Domain {
                op: "sqrt",
                detail: format!("sqrt of negative value {bad}"),
            });
        }
        self.unary("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), f64::abs)
    }

    /// `sqrt(x^2 + eps)`, a differentiable stand-in for `|x|`.
    pub fn smooth_abs(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(GradError::Domain {
                op: "smooth_abs",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        self.unary("smooth_abs", x, Op::SmoothAbs(x), |v| (v * v + eps).sqrt())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary("elu", x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input lies outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(GradError::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        self.unary("clamp", x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    // -------------------------------------------------------------- last axis

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = row_softmax(self.value(x), "softmax")?;
        self.push("softmax", Op::Softmax(x), v, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = last_dim(xv, "log_softmax")?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&r| (r - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|r| *r -= lse);
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("log_softmax", Op::LogSoftmax(x), v, &[x])
    }

    /// Concatenates along the last axis; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| GradError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        for &x in xs {
            self.check(x)?;
        }
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(GradError::InvalidShape {
                op: "concat",
                shape: lead,
                reason: "cannot concatenate scalars".into(),
            });
        }
        let rank = lead.len();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != rank || s[..rank - 1] != lead[..rank - 1] {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: lead.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[rank - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead[..rank - 1].iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape[rank - 1] = total;
        let v = Tensor::new(shape, out)?;
        self.push("concat", Op::Concat(xs.to_vec()), v, xs)
    }

    // ------------------------------------------------------------ reductions

    /// Sum over `axis`. With `keepdim` the axis is kept with length one.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(GradError::InvalidShape {
                op: "sum_axis",
                shape: xv.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let v = Tensor::new(shape, out)?;
        self.push("sum_axis", Op::SumAxis(x, axis), v, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| GradError::InvalidShape {
            op: "mean_axis",
            shape: self.shape(x).to_vec(),
            reason: format!("axis {axis} out of range"),
        })?;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", Op::SumAll(x), v, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // --------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).reshape(shape).map_err(|_| GradError::ShapeMismatch {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.push("reshape", Op::Reshape(x), v, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 {
            return Err(GradError::InvalidShape {
                op: "transpose",
                shape: xv.shape().to_vec(),
                reason: "need rank >= 2".into(),
            });
        }
        let (m, n) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let out = transpose_last2(xv.data(), m, n);
        let mut shape = xv.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let v = Tensor::new(shape, out)?;
        self.push("transpose", Op::Transpose(x), v, &[x])
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if axis >= xv.rank() || start >= end || end > xv.shape()[axis] {
            return Err(GradError::InvalidShape {
                op: "slice",
                shape: xv.shape().to_vec(),
                reason: format!("bad range {start}..{end} on axis {axis}"),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + width * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = width;
        let v = Tensor::new(shape, out)?;
        self.push("slice", Op::Slice { x, axis, start }, v, &[x])
    }

    // --------------------------------------------------------------- matmul

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared across the leading (batch) axes of `a`, or has exactly the same
    /// batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let dims = matmul_dims(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        if dims.b_batched {
            for i in 0..dims.batch {
                gemm_acc(
                    &va[i * dims.m * dims.k..(i + 1) * dims.m * dims.k],
                    &vb[i * dims.k * dims.n..(i + 1) * dims.k * dims.n],
                    &mut out[i * dims.m * dims.n..(i + 1) * dims.m * dims.n],
                    dims.m,
                    dims.k,
                    dims.n,
                );
            }
        } else {
            gemm_acc(va, vb, &mut out, dims.batch * dims.m, dims.k, dims.n);
        }
        let v = Tensor::new(dims.out_shape, out)?;
        self.push("matmul", Op::MatMul(a, b), v, &[a, b])
    }

    // ------------------------------------------------------------------ STE

    /// Hard Bernoulli mask `1[u < pi]` with identity (straight-through)
    /// backward. `uniforms` must share `pi`'s shape.
    pub fn bernoulli_ste(&mut self, pi: Var, uniforms: &Tensor) -> Result<Var> {
        self.check(pi)?;
        let pv = self.value(pi);
        if pv.shape() != uniforms.shape() {
            return Err(GradError::ShapeMismatch {
                op: "bernoulli_ste",
                lhs: pv.shape().to_vec(),
                rhs: uniforms.shape().to_vec(),
            });
        }
        if let Some(bad) = pv.data().iter().find(|&&p| !(-1e-9..=1.0 + 1e-9).contains(&p)) {
            return Err(GradError::Domain {
                op: "bernoulli_ste",
                detail: format!("probability {bad} outside [0, 1]"),
            });
        }
        let data = pv
            .data()
            .iter()
            .zip(uniforms.data())
            .map(|(&p, &u)| if u < p { 1.0 } else { 0.0 })
            .collect();
        let v = Tensor::new(pv.shape().to_vec(), data)?;
        self.push("bernoulli_ste", Op::BernoulliSte(pi), v, &[pi])
    }

    // ------------------------------------------------------------- backward

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// parameter leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        let out_shape = self.shape(output);
        if self.value(output).numel() != 1 {
            return Err(GradError::NonScalarOutput {
                shape: out_shape.to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut leaves, i)?;
        }
        Ok(Gradients {
            leaves,
            shapes: self
                .nodes
                .iter()
                .map(|n| match n.op {
                    Op::Leaf => n.value.shape().to_vec(),
                    _ => Vec::new(),
                })
                .collect(),
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut [Option<Tensor>],
        index: usize,
    ) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {
                leaves[index] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out = node.value.shape();
                if self.needs(*a) {
                    let sa = self.shape(*a).to_vec();
                    self.acc_broadcast(grads, *a, out, &sa, self.shape(*b), &g, |gi, _, _| gi, true);
                }
                if self.needs(*b) {
                    let sb = self.shape(*b).to_vec();
                    self.acc_broadcast(grads, *b, out, self.shape(*a), &sb, &g, |gi, _, _| sign * gi, false);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let out = node.value.shape();
                if self.needs(*a) {
                    let sa = self.shape(*a).to_vec();
                    self.acc_broadcast(grads, *a, out, &sa, self.shape(*b), &g, |gi, _, ib| gi * vb[ib], true);
                }
                if self.needs(*b) {
                    let sb = self.shape(*b).to_vec();
                    self.acc_broadcast(grads, *b, out, self.shape(*a), &sb, &g, |gi, ia, _| gi * va[ia], false);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let out = node.value.shape();
                if self.needs(*a) {
                    let sa = self.shape(*a).to_vec();
                    self.acc_broadcast(grads, *a, out, &sa, self.shape(*b), &g, |gi, _, ib| gi / vb[ib], true);
                }
                if self.needs(*b) {
                    let sb = self.shape(*b).to_vec();
                    self.acc_broadcast(
                        grads,
                        *b,
                        out,
                        self.shape(*a),
                        &sb,
                        &g,
                        |gi, ia, ib| -gi * va[ia] / (vb[ib] * vb[ib]),
                        false,
                    );
                }
            }
            Op::Neg(x) => self.acc_map(grads, *x, &g, |gi, _| -gi),
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_map(grads, *x, &g, |gi, _| gi * c)
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::BernoulliSte(x) => self.acc_map(grads, *x, &g, |gi, _| gi),
            Op::Sigmoid(x) => self.acc_map(grads, *x, &g, |gi, j| gi * y[j] * (1.0 - y[j])),
            Op::Tanh(x) => self.acc_map(grads, *x, &g, |gi, j| gi * (1.0 - y[j] * y[j])),
            Op::Exp(x) => self.acc_map(grads, *x, &g, |gi, j| gi * y[j]),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, &g, |gi, j| gi / xv[j])
            }
            Op::Sqrt(x) => self.acc_map(grads, *x, &g, |gi, j| gi * 0.5 / y[j]),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, &g, |gi, j| gi * sign(xv[j]))
            }
            Op::SmoothAbs(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, &g, |gi, j| gi * xv[j] / y[j])
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, &g, |gi, j| gi * 2.0 * xv[j])
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, &g, |gi, j| if xv[j] > 0.0 { gi } else { gi * (y[j] + 1.0) })
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, &g, |gi, j| gi * gelu_grad(xv[j]))
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.acc_map(grads, *x, &g, |gi, j| if xv[j] >= lo && xv[j] <= hi { gi } else { 0.0 })
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_map(grads, *x, &dx, |d, _| d)
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.acc_map(grads, *x, &dx, |d, _| d)
            }
            Op::SumAxis(x, axis) => {
                if self.needs(*x) {
                    let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                    let dst = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let d = &mut dst[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (a, &b) in d.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                self.acc_map_fill(grads, *x, g0)
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| *self.shape(x).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if self.needs(x) {
                        let dst = self.grad_buf(grads, x);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (a, &b) in dst[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                    let width = node.value.shape()[*axis];
                    let dst = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        let base = (o * len + start) * inner;
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        for (a, &b) in dst[base..base + width * inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let back = transpose_last2(&g, m, n);
                self.acc_map(grads, *x, &back, |d, _| d)
            }
            Op::MatMul(a, b) => {
                let dims = matmul_dims(self.shape(*a), self.shape(*b))?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if self.needs(*a) {
                    let dst = self.grad_buf(grads, *a);
                    if dims.b_batched {
                        for i in 0..dims.batch {
                            gemm_abt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb[i * k * n..(i + 1) * k * n],
                                &mut dst[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        gemm_abt_acc(&g, vb, dst, dims.batch * m, k, n);
                    }
                }
                if self.needs(*b) {
                    let dst = self.grad_buf(grads, *b);
                    if dims.b_batched {
                        for i in 0..dims.batch {
                            gemm_atb_acc(
                                &va[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut dst[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        gemm_atb_acc(va, &g, dst, dims.batch * m, k, n);
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let numel = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; numel])
    }

    /// `grad[x][j] += f(g[j], j)` for same-shape unary ops.
    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], f: impl Fn(f64, usize) -> f64) {
        if !self.needs(x) {
            return;
        }
        let dst = self.grad_buf(grads, x);
        for (j, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(gi, j);
        }
    }

    fn acc_map_fill(&self, grads: &mut [Option<Vec<f64>>], x: Var, value: f64) {
        if !self.needs(x) {
            return;
        }
        self.grad_buf(grads, x).iter_mut().for_each(|d| *d += value);
    }

    /// Accumulates a broadcast binary op's gradient into one operand, summing
    /// over the axes along which that operand was broadcast.
    #[allow(clippy::too_many_arguments)]
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        out: &[usize],
        sa: &[usize],
        sb: &[usize],
        g: &[f64],
        f: impl Fn(f64, usize, usize) -> f64,
        target_is_a: bool,
    ) {
        let dst = self.grad_buf(grads, target);
        if sa == out && sb == out {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += f(g[j], j, j);
            }
            return;
        }
        for_each_broadcast(out, sa, sb, |o, ia, ib| {
            let t = if target_is_a { ia } else { ib };
            dst[t] += f(g[o], ia, ib);
        });
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn last_dim(t: &Tensor, op: &'static str) -> Result<usize> {
    t.shape().last().copied().ok_or_else(|| GradError::InvalidShape {
        op,
        shape: vec![],
        reason: "needs rank >= 1".into(),
    })
}

pub(crate) fn row_softmax(t: &Tensor, op: &'static str) -> Result<Tensor> {
    let n = last_dim(t, op)?;
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        row.iter_mut().for_each(|r| *r /= total);
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn transpose_last2(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for (src, dst) in d.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatmulDims> {
    let mismatch = || GradError::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch());
    }
    let (ra, rb) = (sa.len(), sb.len());
    let (m, k) = (sa[ra - 2], sa[ra - 1]);
    let (k2, n) = (sb[rb - 2], sb[rb - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let b_batched = rb > 2;
    if b_batched && (ra != rb || sa[..ra - 2] != sb[..rb - 2]) {
        return Err(mismatch());
    }
    let batch = sa[..ra - 2].iter().product();
    let mut out_shape = sa.to_vec();
    out_shape[ra - 1] = n;
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        b_batched,
        out_shape,
    })
}

/// `c += a (m x k) * b (k x n)`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da += g (m x n) * b^T` where `b` is (k x n).
fn gemm_abt_acc(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += a^T * g` where `a` is (m x k) and `g` is (m x n).
fn gemm_atb_acc(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}
