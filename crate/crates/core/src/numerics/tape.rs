//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its value and whatever it needs
//! for the backward pass. Node indices are assigned in creation order, so
//! walking them from the loss downward is a valid reverse topological order.
//! Nodes that do not depend on any gradient-requiring leaf keep no saved
//! state.

use crate::error::{Error, Result};

use super::ops::{self, GroupNormStats, Reduction};
use super::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
        reduction: Reduction,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_finite_checks(T::CHECK_FINITE_BY_DEFAULT)
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and its saved state.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. It participates in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        Ok(self.push(tensor, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = ops::scale(self.value(a), c);
        self.record("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = ops::relu(self.value(a));
        self.record("relu", out, Op::Relu(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        self.record("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.record("linear", out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let op = Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        };
        self.record("conv2d", out, op, &[input, kernel])
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::max_pool_2x2(self.value(input))?;
        self.record("max_pool_2x2", out, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        self.record("global_avg_pool", out, Op::GlobalAvgPool(input), &[input])
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let out = ops::flatten(self.value(input))?;
        self.record("flatten", out, Op::Reshape(input), &[input])
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, stats) =
            ops::group_norm(self.value(input), self.value(gamma), self.value(beta), groups)?;
        let op = Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            stats,
        };
        self.record("group_norm", out, op, &[input, gamma, beta])
    }

    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let (out, norms) = ops::l2_normalize(self.value(input))?;
        self.record("l2_normalize", out, Op::L2Normalize { input, norms }, &[input])
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::row_dot(self.value(a), self.value(b))?;
        self.record("row_dot", out, Op::RowDot(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_cols(self.value(a), self.value(b))?;
        self.record("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_rows(self.value(input), start, len)?;
        self.record("slice_rows", out, Op::SliceRows { input, start }, &[input])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), targets, reduction)?;
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
            probs,
            reduction,
        };
        self.record("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Tensor<T>,
        reduction: Reduction,
    ) -> Result<Var> {
        let loss = ops::bce_with_logits(self.value(logits), &targets, reduction)?;
        let op = Op::BceWithLogits {
            logits,
            targets,
            reduction,
        };
        self.record("bce_with_logits", Tensor::scalar(loss), op, &[logits])
    }

    /// Propagates gradients from the scalar `loss` back to every node that
    /// requires them. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contribution) in self.vjp(node, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        if self.check_finite && grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, reduce_to(g, val(*a))));
                }
                if self.wants(*b) {
                    out.push((*b, reduce_to(g, val(*b))));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, reduce_to(&ops::mul(g, val(*b))?, val(*a))));
                }
                if self.wants(*b) {
                    out.push((*b, reduce_to(&ops::mul(g, val(*a))?, val(*b))));
                }
            }
            Op::Scale(a, c) => out.push((*a, ops::scale(g, *c))),
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::new(g.shape(), data)?));
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, ops::matmul_nt(g, val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, ops::matmul_tn(val(*a), g)?));
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                if self.wants(*a) {
                    out.push((*a, ops::matmul(g, val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, ops::matmul_tn(g, val(*a))?));
                }
            }
            Op::Linear { x, w, b } => {
                if self.wants(*x) {
                    out.push((*x, ops::matmul_nt(g, val(*w))?));
                }
                if self.wants(*w) {
                    out.push((*w, ops::matmul_tn(val(*x), g)?));
                }
                if self.wants(*b) {
                    let n = val(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    out.push((*b, Tensor::new(val(*b).shape(), db)?));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (di, dk) = ops::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.wants(*input),
                    self.wants(*kernel),
                )?;
                out.extend(di.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); val(*input).len()];
                for (&idx, &gi) in argmax.iter().zip(g.data()) {
                    d[idx as usize] += gi;
                }
                out.push((*input, Tensor::new(val(*input).shape(), d)?));
            }
            Op::GlobalAvgPool(input) => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let inv = T::of(1.0 / hw as f64);
                let mut d = Vec::with_capacity(val(*input).len());
                for &gi in g.data() {
                    d.extend(std::iter::repeat(gi * inv).take(hw));
                }
                out.push((*input, Tensor::new(s, d)?));
            }
            Op::Reshape(input) => {
                out.push((*input, g.clone().reshape(val(*input).shape())?));
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (di, dg, db) =
                    ops::group_norm_backward(val(*input).shape(), val(*gamma), *groups, stats, g)?;
                out.push((*input, di));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::L2Normalize { input, norms } => {
                // dx = (g - y (y·g)) / |x|
                let y = &node.value;
                let d = y.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.data().chunks(d).zip(g.data().chunks(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / n));
                }
                out.push((*input, Tensor::new(y.shape(), dx)?));
            }
            Op::RowDot(a, b) => {
                let d = val(*a).shape()[1];
                let scaled = |other: &Tensor<T>| -> Result<Tensor<T>> {
                    let mut r = Vec::with_capacity(other.len());
                    for (row, &gi) in other.data().chunks(d).zip(g.data()) {
                        r.extend(row.iter().map(|&x| x * gi));
                    }
                    Tensor::new(other.shape(), r)
                };
                if self.wants(*a) {
                    out.push((*a, scaled(val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, scaled(val(*a))?));
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).shape()[1], val(*b).shape()[1]);
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for row in g.data().chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                if self.wants(*a) {
                    out.push((*a, Tensor::new(val(*a).shape(), da)?));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor::new(val(*b).shape(), db)?));
                }
            }
            Op::SliceRows { input, start } => {
                let x = val(*input);
                let d = x.shape()[1];
                let mut dx = Tensor::zeros_like(x);
                dx.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                out.push((*input, dx));
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let shape = val(*logits).shape();
                let (z, k) = (shape[0], shape[1]);
                let mut scale = g.data()[0];
                if *reduction == Reduction::Mean {
                    scale = scale / T::of(z as f64);
                }
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    d[row * k + t] -= scale;
                }
                out.push((*logits, Tensor::new(shape, d)?));
            }
            Op::BceWithLogits {
                logits,
                targets,
                reduction,
            } => {
                let x = val(*logits);
                let mut scale = g.data()[0];
                if *reduction == Reduction::Mean {
                    scale = scale / T::of(x.len() as f64);
                }
                let d = x
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&xi, &ti)| (ops::sigmoid(xi) - ti) * scale)
                    .collect();
                out.push((*logits, Tensor::new(x.shape(), d)?));
            }
        }
        Ok(out)
    }
}

/// Sums a gradient down to a scalar operand's shape when the forward op
/// broadcast it.
fn reduce_to<T: Real>(g: &Tensor<T>, operand: &Tensor<T>) -> Tensor<T> {
    if g.shape() == operand.shape() {
        g.clone()
    } else {
        Tensor::new(operand.shape(), vec![g.data().iter().copied().sum()]).expect("scalar operand")
    }
}
