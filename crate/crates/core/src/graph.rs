//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so node inputs always
//! precede the node itself and a single reverse sweep is a valid topological
//! traversal. Leaves created from tensors with `requires_grad` receive their
//! gradient in the tensor's own grad buffer; repeated [`Graph::backward`]
//! calls accumulate.

use crate::crosssim::{self, PatchGrid};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, GroupNormSaved};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    NormAxis(Var, usize),
    GlobalAvgPool(Var),
    Dot(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    ChannelBias(Var, Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        group_size: usize,
        saved: GroupNormSaved<T>,
    },
    CrossSim(Var, Var, PatchGrid),
    Upsample(Var, usize),
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
        pos_weight: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) => "binary",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::NormAxis(..) => "l2_norm_axis",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Dot(..) => "dot",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias(..) => "channel_bias",
            Op::GroupNorm { .. } => "group_norm",
            Op::CrossSim(..) => "cross_similarity",
            Op::Upsample(..) => "upsample_bilinear",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Gradient must flow through this node.
    tracked: bool,
}

/// Summary of one reverse sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes whose adjoint was propagated. Each node is visited at most once.
    pub visited: usize,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation kinds in recording order.
    pub fn kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Records `tensor` as a leaf; it is differentiated iff it requires grad.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(Op::Leaf, tensor, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Tracked copy of `tensor` (any gradient it carries is not copied).
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.leaf(tensor.detached().with_requires_grad(true))
    }

    /// Untracked leaf holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.constant(t)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, op: Op<T>, input: Var, value: Tensor<T>) -> Var {
        let tracked = self.tracked(input);
        self.push(op, value, tracked)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            ops::shaped(ta.shape().to_vec(), data)?
        } else {
            let shape = ops::broadcast_shape(ta.shape(), tb.shape())?;
            let ma = ops::broadcast_map(ta.shape(), &shape);
            let mb = ops::broadcast_map(tb.shape(), &shape);
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            ops::shaped(shape, data)?
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Binary(kind, a, b), value, tracked))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.unary(Op::Scale(x, s), x, value)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.unary(Op::AddScalar(x), x, value)
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(Op::Relu(x), x, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.unary(Op::Sigmoid(x), x, value)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sqrt());
        self.unary(Op::Sqrt(x), x, value)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / v);
        self.unary(Op::Recip(x), x, value)
    }

    /// `max(x, lo)` elementwise; passes gradient only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        let value = self.value(x).map(|v| if v > lo { v } else { lo });
        self.unary(Op::ClampMin(x, lo), x, value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(Op::Sum(x), x, value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.unary(Op::Mean(x), x, value)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::sum_axis(self.value(x), axis)?;
        Ok(self.unary(Op::SumAxis(x, axis), x, value))
    }

    /// L2 norm along `axis` (removed from the output shape).
    pub fn l2_norm_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::l2_norm_axis(self.value(x), axis)?;
        Ok(self.unary(Op::NormAxis(x, axis), x, value))
    }

    /// L2 norm of the whole tensor as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.l2_norm_axis(flat, 0)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = ops::global_avg_pool(self.value(x))?;
        Ok(self.unary(Op::GlobalAvgPool(x), x, value))
    }

    /// Inner product of two equally sized tensors (flattened), as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::dim(
                0,
                format!("dot of {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = ops::shaped(shape.clone(), self.value(x).data().to_vec())?;
        if value.numel() != self.value(x).numel() || (shape.is_empty() && value.numel() != 1) {
            return Err(Error::dim(0, "reshape must preserve element count"));
        }
        Ok(self.unary(Op::Reshape(x), x, value))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (value, cols, geom) =
            ops::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let tracked = self.tracked(input) || self.tracked(kernel);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                cols,
                geom,
            },
            value,
            tracked,
        ))
    }

    /// Adds `bias: [C]` to every position of channel `c` in `x: [C,...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 1 || tb.shape() != [tx.shape()[0]] {
            return Err(Error::dim(
                0,
                format!("bias {:?} does not match channels of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let plane = tx.numel() / tx.shape()[0];
        let mut value = tx.detached();
        for (chunk, &b) in value.data_mut().chunks_mut(plane).zip(tb.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Op::ChannelBias(x, bias), value, tracked))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, group_size: usize, eps: T) -> Result<Var> {
        ops::check_group_norm(
            self.shape(x),
            self.shape(gamma),
            self.shape(beta),
            group_size,
        )?;
        let (value, saved) = ops::group_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            group_size,
            eps,
        );
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            Op::GroupNorm {
                input: x,
                gamma,
                beta,
                group_size,
                saved,
            },
            value,
            tracked,
        ))
    }

    /// See [`crate::crosssim::cross_similarity`]; output is `[z, h/α, w/α]`.
    pub fn cross_similarity(&mut self, y: Var, y_prime: Var, alpha: usize) -> Result<Var> {
        let grid = PatchGrid::pair(self.shape(y), self.shape(y_prime), alpha)?;
        let value = crosssim::forward(self.value(y), self.value(y_prime), alpha)?;
        let tracked = self.tracked(y) || self.tracked(y_prime);
        Ok(self.push(Op::CrossSim(y, y_prime, grid), value, tracked))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = ops::upsample_bilinear(self.value(x), factor)?;
        Ok(self.unary(Op::Upsample(x, factor), x, value))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target` in `[0,1]`,
    /// with positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, pos_weight: T) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != target.numel() {
            return Err(Error::dim(
                0,
                format!("logits {:?} vs target {:?}", z.shape(), target.shape()),
            ));
        }
        let n = T::of(z.numel() as f64);
        let loss: T = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                // log(1 + e^-|z|) + max(-z, 0) = -log σ(z)
                let softplus_neg = (-z.abs()).exp().ln_1p() + (-z).max(T::zero());
                let softplus_pos = softplus_neg + z;
                pos_weight * t * softplus_neg + (T::one() - t) * softplus_pos
            })
            .sum::<T>()
            / n;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
                pos_weight,
            },
            Tensor::scalar(loss),
            tracked,
        ))
    }

    /// Propagates `d loss / d node` back to every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.data()[0])));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            visited += 1;
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(BackwardReport { visited })
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let shape = node.value.shape();
                let same = va.shape() == shape && vb.shape() == shape;
                let ma = (!same).then(|| ops::broadcast_map(va.shape(), shape));
                let mb = (!same).then(|| ops::broadcast_map(vb.shape(), shape));
                let ia = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let ib = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                if self.tracked(*a) {
                    let mut ga = vec![T::zero(); va.numel()];
                    for (k, &gk) in g.iter().enumerate() {
                        let y = vb.data()[ib(k)];
                        ga[ia(k)] += match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * y,
                            Binary::Div => gk / y,
                        };
                    }
                    add_into(adj, *a, &ga);
                }
                if self.tracked(*b) {
                    let mut gb = vec![T::zero(); vb.numel()];
                    for (k, &gk) in g.iter().enumerate() {
                        let (x, y) = (va.data()[ia(k)], vb.data()[ib(k)]);
                        gb[ib(k)] += match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * x,
                            Binary::Div => -gk * x / (y * y),
                        };
                    }
                    add_into(adj, *b, &gb);
                }
            }
            Op::Scale(x, s) => {
                let gx: Vec<T> = g.iter().map(|&v| v * *s).collect();
                add_into(adj, *x, &gx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => add_into(adj, *x, g),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gk, &v)| if v > T::zero() { gk } else { T::zero() })
                    .collect();
                add_into(adj, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&gk, &s)| gk * s * (T::one() - s))
                    .collect();
                add_into(adj, *x, &gx);
            }
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                let gx: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&gk, &s)| if s > T::zero() { gk / (two * s) } else { T::zero() })
                    .collect();
                add_into(adj, *x, &gx);
            }
            Op::Recip(x) => {
                let gx: Vec<T> = g.iter().zip(out).map(|(&gk, &r)| -gk * r * r).collect();
                add_into(adj, *x, &gx);
            }
            Op::ClampMin(x, lo) => {
                let xv = self.value(*x).data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gk, &v)| if v > *lo { gk } else { T::zero() })
                    .collect();
                add_into(adj, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).numel()];
                add_into(adj, *x, &gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gx = vec![g[0] / T::of(n as f64); n];
                add_into(adj, *x, &gx);
            }
            Op::SumAxis(x, axis) => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = ops::axis_split(xs, *axis).expect("checked in forward");
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            gx[(o * len + l) * inner + k] = g[o * inner + k];
                        }
                    }
                }
                add_into(adj, *x, &gx);
            }
            Op::NormAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) =
                    ops::axis_split(xv.shape(), *axis).expect("checked in forward");
                let mut gx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    for k in 0..inner {
                        let n = out[o * inner + k];
                        if n > T::zero() {
                            let s = g[o * inner + k] / n;
                            for l in 0..len {
                                let idx = (o * len + l) * inner + k;
                                gx[idx] = s * xv.data()[idx];
                            }
                        }
                    }
                }
                add_into(adj, *x, &gx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let plane = xs[1] * xs[2];
                let n = T::of(plane as f64);
                let mut gx = vec![T::zero(); xs[0] * plane];
                for (c, chunk) in gx.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = g[c] / n);
                }
                add_into(adj, *x, &gx);
            }
            Op::Dot(a, b) => {
                if self.tracked(*a) {
                    let ga: Vec<T> = self.value(*b).data().iter().map(|&v| v * g[0]).collect();
                    add_into(adj, *a, &ga);
                }
                if self.tracked(*b) {
                    let gb: Vec<T> = self.value(*a).data().iter().map(|&v| v * g[0]).collect();
                    add_into(adj, *b, &gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                cols,
                geom,
            } => {
                let (gi, gk) = ops::conv2d_backward(
                    g,
                    self.value(*kernel).data(),
                    cols,
                    geom,
                    self.tracked(*input),
                    self.tracked(*kernel),
                );
                if let Some(gi) = gi {
                    add_into(adj, *input, &gi);
                }
                if let Some(gk) = gk {
                    add_into(adj, *kernel, &gk);
                }
            }
            Op::ChannelBias(x, bias) => {
                if self.tracked(*x) {
                    add_into(adj, *x, g);
                }
                if self.tracked(*bias) {
                    let c = self.value(*bias).numel();
                    let plane = g.len() / c;
                    let gb: Vec<T> = g.chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
                    add_into(adj, *bias, &gb);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                group_size,
                saved,
            } => {
                let (dx, dgamma, dbeta) = ops::group_norm_backward(
                    g,
                    self.shape(*input),
                    self.value(*gamma).data(),
                    saved,
                    *group_size,
                );
                if self.tracked(*input) {
                    add_into(adj, *input, &dx);
                }
                if self.tracked(*gamma) {
                    add_into(adj, *gamma, &dgamma);
                }
                if self.tracked(*beta) {
                    add_into(adj, *beta, &dbeta);
                }
            }
            Op::CrossSim(y, y_prime, grid) => {
                let (gy, gyp) = crosssim::backward(
                    self.value(*y).data(),
                    self.value(*y_prime).data(),
                    grid,
                    g,
                );
                if self.tracked(*y) {
                    add_into(adj, *y, &gy);
                }
                if self.tracked(*y_prime) {
                    add_into(adj, *y_prime, &gyp);
                }
            }
            Op::Upsample(x, factor) => {
                let gx = ops::upsample_bilinear_backward(g, self.shape(*x), *factor);
                add_into(adj, *x, &gx);
            }
            Op::BceWithLogits {
                logits,
                target,
                pos_weight,
            } => {
                let z = self.value(*logits).data();
                let n = T::of(z.len() as f64);
                let gx: Vec<T> = z
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| {
                        let s = sigmoid(z);
                        g[0] * ((T::one() - t) * s - *pos_weight * t * (T::one() - s)) / n
                    })
                    .collect();
                add_into(adj, *logits, &gx);
            }
        }
    }
}

fn add_into<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    match &mut adj[v.0] {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, d)| *b += *d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]).with_requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let data = [1.5, -2.0, 0.25, 4.0];
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[4], &data).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn two_backward_passes_double_the_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[3], &[0.3, -0.7, 1.1]).with_requires_grad(true));
        let y = g.sigmoid(x);
        let y2 = g.mul(y, x).unwrap();
        let s = g.sum(y2);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_violation() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[2], &[1., 2.]).with_requires_grad(true));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[2], &[1., 2.]).with_requires_grad(true));
        let c = g.constant(vec_t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn each_node_is_visited_once() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[2], &[1., 2.]).with_requires_grad(true));
        // diamond: x feeds two branches that rejoin
        let a = g.scale(x, 2.0);
        let b = g.relu(x);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        let report = g.backward(s).unwrap();
        assert_eq!(report.visited, g.len());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec_t(&[3], &[-1., 0., 1.]).with_requires_grad(true));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_division_gradient() {
        // y = sum(v / s) with scalar s
        let mut g = Graph::new();
        let v = g.leaf(vec_t(&[3], &[1., 2., 3.]).with_requires_grad(true));
        let s = g.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let q = g.div(v, s).unwrap();
        let t = g.sum(q);
        g.backward(t).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.5, 0.5, 0.5]);
        assert_eq!(g.grad(s).unwrap(), &[-6.0 / 4.0]);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = [0.3, -1.2, 2.0];
        let t = [1.0, 0.0, 1.0];
        let mut g = Graph::new();
        let zv = g.leaf(vec_t(&[3], &z).with_requires_grad(true));
        let l = g.bce_with_logits(zv, &vec_t(&[3], &t), 1.0).unwrap();
        let want: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let s: f64 = sigmoid(z);
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
        g.backward(l).unwrap();
        for (k, (&z, &t)) in z.iter().zip(&t).enumerate() {
            assert!((g.grad(zv).unwrap()[k] - (sigmoid(z) - t) / 3.0).abs() < 1e-12);
        }
    }
}
