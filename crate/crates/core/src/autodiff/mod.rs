//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; nodes are created in
//! topological order, so [`Tape::backward`] simply walks the tape in reverse
//! creation order. By the time a node is visited, every consumer (created
//! later) has already pushed its contribution, so its gradient is complete.
//!
//! Gradients are only propagated into nodes that transitively depend on a
//! leaf created with `requires_grad = true`. The same engine therefore serves
//! both parameter updates (parameters tracked, images constant) and the
//! input-gradient needed by the attack (image tracked, parameters constant).
//!
//! ```
//! use freespace::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod tensor;

use std::sync::Arc;

pub use tensor::Tensor;
pub(crate) use tensor::{gemm, strides};

use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Gelu,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        // Lengths of the repeating period of each operand (numel when not broadcast).
        lhs_period: usize,
        rhs_period: usize,
    },
    Unary(Unary, Var),
    Scale(Var, f64),
    MatMul {
        lhs: Var,
        rhs: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Reduce {
        input: Var,
        map: Arc<[usize]>,
        scale: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for a single computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), data.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Clears accumulated gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------

    /// Elementwise binary op. Shapes must match, or one operand must be a
    /// scalar or a trailing-suffix of the other's shape (bias broadcast).
    pub fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        let (out_shape, lp, rp) = if ls == rs {
            let n = self.value(lhs).numel();
            (ls, n, n)
        } else if broadcasts_into(&rs, &ls) {
            (ls.clone(), ls.iter().product(), rs.iter().product())
        } else if broadcasts_into(&ls, &rs) {
            (rs.clone(), ls.iter().product(), rs.iter().product())
        } else {
            return Err(Error::dim(binary_name(kind), &ls, &rs));
        };
        let numel: usize = out_shape.iter().product();
        let a = self.value(lhs).data();
        let b = self.value(rhs).data();
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let data: Vec<f64> = if lp == numel && rp == numel {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if lp == numel {
            let mut out = Vec::with_capacity(numel);
            for chunk in a.chunks_exact(rp) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        } else if rp == numel {
            let mut out = Vec::with_capacity(numel);
            for chunk in b.chunks_exact(lp) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            (0..numel).map(|i| f(a[i % lp], b[i % rp])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(
            value,
            Op::Binary {
                kind,
                lhs,
                rhs,
                lhs_period: lp,
                rhs_period: rp,
            },
            &[lhs, rhs],
            binary_name(kind),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let input = self.value(x);
        let value = match kind {
            Unary::Neg => input.map(|v| -v),
            Unary::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Gelu => input.map(gelu),
            Unary::Exp => input.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = input.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                input.map(f64::ln)
            }
        };
        self.push(value, Op::Unary(kind, x), &[x], unary_name(kind))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x], "scale")
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                lhs: a,
                rhs: b,
                m,
                k,
                n,
            },
            &[a, b],
            "matmul",
        )
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// `out[i] = x[index[i]]`, result laid out with `shape`. Indices may
    /// repeat (gradients scatter-add back).
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                bound: src.len(),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(value, Op::Gather(x, index), &[x], "gather")
    }

    /// Axis permutation, e.g. `[1, 0]` for a matrix transpose.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let numel: usize = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..numel {
            index.push(
                coord
                    .iter()
                    .zip(axes)
                    .map(|(&c, &a)| c * in_strides[a])
                    .sum(),
            );
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    // ---- reductions --------------------------------------------------

    /// Reduces over `axes`, dropping them from the shape (a full reduction
    /// yields shape `[1]`).
    pub fn reduce(&mut self, kind: Reduce, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim("reduce", &shape, axes));
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&d| shape[d]).collect()
        };
        let out_strides = strides(&out_shape);
        let numel: usize = shape.iter().product();
        let out_numel: usize = out_shape.iter().product();
        let count = (numel / out_numel) as f64;

        let mut map = Vec::with_capacity(numel);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..numel {
            let o: usize = if kept.is_empty() {
                0
            } else {
                kept.iter()
                    .zip(&out_strides)
                    .map(|(&d, &s)| coord[d] * s)
                    .sum()
            };
            map.push(o);
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }

        let scale = match kind {
            Reduce::Sum => 1.0,
            Reduce::Mean => 1.0 / count,
        };
        let mut out = vec![0.0; out_numel];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::Reduce {
                input: x,
                map: map.into(),
                scale,
            },
            &[x],
            "reduce",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduce::Sum, x, &axes).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduce::Mean, x, &axes).expect("full reduction")
    }

    // ---- losses ------------------------------------------------------

    /// Mean over rows of `-log softmax(logits)[target]` for `logits[N×C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("softmax_cross_entropy", shape, &[targets.len()]));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            total += log_denom - (row[t] - max);
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every
    /// tracked node. Gradients accumulate additively over all uses of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without zero_grad".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let numel = self.nodes[target.0].value.numel();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Temporarily take the op to release the borrow on self.nodes.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Binary {
                kind,
                lhs,
                rhs,
                lhs_period,
                rhs_period,
            } => {
                let numel = g.len();
                match kind {
                    Binary::Add | Binary::Sub => {
                        self.accumulate(lhs, |acc| fold_periodic(acc, g, lhs_period, 1.0));
                        let sign = if kind == Binary::Add { 1.0 } else { -1.0 };
                        self.accumulate(rhs, |acc| fold_periodic(acc, g, rhs_period, sign));
                    }
                    Binary::Mul => {
                        let a = self.nodes[lhs.0].value.data().to_vec();
                        let b = self.nodes[rhs.0].value.data().to_vec();
                        self.accumulate(lhs, |acc| {
                            for i in 0..numel {
                                acc[i % lhs_period] += g[i] * b[i % rhs_period];
                            }
                        });
                        self.accumulate(rhs, |acc| {
                            for i in 0..numel {
                                acc[i % rhs_period] += g[i] * a[i % lhs_period];
                            }
                        });
                    }
                }
            }
            &Op::Unary(kind, x) => {
                let input = &self.nodes[x.0].value;
                let out = &self.nodes[idx].value;
                let local: Vec<f64> = match kind {
                    Unary::Neg => g.iter().map(|v| -v).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(input.data())
                        .map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 })
                        .collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(input.data())
                        .map(|(&gi, &v)| gi * gelu_grad(v))
                        .collect(),
                    Unary::Exp => g.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect(),
                    Unary::Log => g
                        .iter()
                        .zip(input.data())
                        .map(|(&gi, &v)| gi / v)
                        .collect(),
                };
                self.accumulate(x, |acc| {
                    for (a, l) in acc.iter_mut().zip(&local) {
                        *a += l;
                    }
                });
            }
            &Op::Scale(x, factor) => {
                self.accumulate(x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += factor * gi;
                    }
                });
            }
            &Op::MatMul { lhs, rhs, m, k, n } => {
                if self.nodes[lhs.0].requires_grad {
                    let b = std::mem::take(&mut self.nodes[rhs.0].value);
                    self.accumulate(lhs, |acc| tensor::gemm_nt(g, b.data(), acc, m, n, k));
                    self.nodes[rhs.0].value = b;
                }
                if self.nodes[rhs.0].requires_grad {
                    let a = std::mem::take(&mut self.nodes[lhs.0].value);
                    self.accumulate(rhs, |acc| tensor::gemm_tn(a.data(), g, acc, m, k, n));
                    self.nodes[lhs.0].value = a;
                }
            }
            &Op::Reshape(x) => {
                self.accumulate(x, |acc| {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                });
            }
            Op::Gather(x, index) => {
                self.accumulate(*x, |acc| {
                    for (&i, &gi) in index.iter().zip(g) {
                        acc[i] += gi;
                    }
                });
            }
            Op::Reduce { input, map, scale } => {
                self.accumulate(*input, |acc| {
                    for (a, &o) in acc.iter_mut().zip(map.iter()) {
                        *a += scale * g[o];
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let upstream = g[0] / n as f64;
                self.accumulate(*logits, |acc| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            acc[r * c + j] += upstream * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::scalar(0.0)
    }
}

fn broadcasts_into(small: &[usize], big: &[usize]) -> bool {
    let n: usize = small.iter().product();
    if n == 1 {
        return true;
    }
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// `acc[i mod period] += sign·g[i]`, in increasing `i`.
fn fold_periodic(acc: &mut [f64], g: &[f64], period: usize, sign: f64) {
    for chunk in g.chunks_exact(period) {
        for (a, &gi) in acc.iter_mut().zip(chunk) {
            *a += sign * gi;
        }
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    }
}

fn unary_name(kind: Unary) -> &'static str {
    match kind {
        Unary::Neg => "negate",
        Unary::Relu => "relu",
        Unary::Gelu => "gelu",
        Unary::Exp => "exp",
        Unary::Log => "log",
    }
}

/// `tanh` through a single `exp`; a few ulp from libm's and much cheaper.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

/// Exact derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
