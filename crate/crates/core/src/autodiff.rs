//! A small define-by-run reverse-mode autodiff engine over `f64` tensors.
//!
//! Each forward pass records onto a fresh [`Tape`]; nodes are appended in
//! execution order, so walking the node list backwards is a valid reverse
//! topological order. Parameters live outside the tape in [`Tensor`]s and are
//! brought in with [`Tape::leaf`]; after [`Tape::backward`] their gradients are
//! read back with [`Tape::grad`].
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of letting a poisoned value propagate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], grad: None }
    }

    /// A trainable tensor: same as [`Tensor::new`] with a zeroed gradient.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_grad())
    }

    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator; no-op for non-trainable tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        }
    }

    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    Powf(Var, f64),
    Acos { x: Var, guard: f64 },
    Dropout(Var, Vec<f64>),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    SpatialSum(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var),
    RowDot(Var, Var),
    ChannelDiv(Var, Var),
    View { src: Var, offset: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Record of executed ops, rebuilt for every forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Accumulated gradient of a leaf recorded with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Records a copy of `t`; it is differentiable iff `t` carries a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad())
    }

    /// Records a differentiable input that does not come from a [`Tensor`].
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape, t.data, true))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape, t.data, false))
    }

    /// Same values as `v`, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push_leaf(shape, value, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        self.push(self.shape(a).to_vec(), value, op, name)
    }

    fn unary(&mut self, a: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(self.shape(a).to_vec(), value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, k), "scale", |x| x * k)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), "sqrt", libm::sqrt)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, Op::ClampMin(a, floor), "clamp_min", |x| x.max(floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), "clamp", |x| x.clamp(lo, hi))
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.unary(a, Op::Powf(a, exponent), "powf", |x| libm::pow(x, exponent))
    }

    /// `acos(x)` with `x` clamped to `[-1, 1]`. The derivative is evaluated at
    /// `x` clamped to `[-1 + guard, 1 - guard]`, which keeps it finite at ±1.
    pub fn acos(&mut self, a: Var, guard: f64) -> Result<Var> {
        self.unary(a, Op::Acos { x: a, guard }, "acos", |x| libm::acos(x.clamp(-1.0, 1.0)))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.push(self.shape(a).to_vec(), value, Op::Dropout(a, mask), "dropout")
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[K, C, kh, kw]` weights plus `[K]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)?;
        let value = geom.forward(self.value(input), self.value(weight), self.value(bias));
        self.push(geom.out_shape(), value, Op::Conv2d { input, weight, bias, stride, padding }, "conv2d")
    }

    /// Sums `[N, C, H, W]` over the spatial axes, giving `[N, C]`.
    pub fn spatial_sum(&mut self, a: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(a) else {
            return Err(Error::Shape(format!("spatial_sum expects rank 4, got {:?}", self.shape(a))));
        };
        let value = self.value(a).chunks_exact(h * w).map(|p| p.iter().sum()).collect();
        self.push(vec![n, c], value, Op::SpatialSum(a), "spatial_sum")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::EmptyInput);
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![m], Op::Mean(a), "mean")
    }

    fn rows(&self, a: Var, name: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [n, c] => Ok((n, c)),
            ref s => Err(Error::Shape(format!("{name} expects rank 2, got {s:?}"))),
        }
    }

    /// Scales every row of an `[N, C]` tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.rows(a, "normalize_rows")?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(c) {
            let n = libm::sqrt(row.iter().map(|x| x * x).sum());
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.push(self.shape(a).to_vec(), value, Op::NormalizeRows(a), "normalize_rows")
    }

    /// Row-wise dot product of two `[N, C]` tensors, giving `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.rows(a, "row_dot")?;
        self.same_shape(a, b, "row_dot")?;
        let value = self
            .value(a)
            .chunks_exact(c)
            .zip(self.value(b).chunks_exact(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        self.push(vec![n], value, Op::RowDot(a, b), "row_dot")
    }

    /// Divides channel `c` of sample `n` of an `[N, C, H, W]` image by `e[n, c]`.
    pub fn channel_div(&mut self, image: Var, e: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(image) else {
            return Err(Error::Shape(format!("channel_div expects rank-4 image, got {:?}", self.shape(image))));
        };
        if self.shape(e) != [n, c] {
            return Err(Error::Shape(format!("channel_div divisor {:?} vs image {n}x{c}", self.shape(e))));
        }
        let divisor = self.value(e);
        let value = self
            .value(image)
            .chunks_exact(h * w)
            .zip(divisor)
            .flat_map(|(plane, d)| plane.iter().map(move |x| x / d))
            .collect();
        self.push(vec![n, c, h, w], value, Op::ChannelDiv(image, e), "channel_div")
    }

    /// A contiguous slice of `src` starting at `offset`, reinterpreted with `shape`.
    pub fn view(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let len = self.value(src).len();
        if offset + numel > len {
            return Err(Error::Shape(format!("view of {numel} at {offset} exceeds {len} elements")));
        }
        let value = self.value(src)[offset..offset + numel].to_vec();
        self.push(shape.to_vec(), value, Op::View { src, offset }, "view")
    }

    /// Propagates d`loss`/d(node) to every differentiable leaf reachable from
    /// `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(acc), Some(g)) = (&node.op, node.grad.as_mut(), g) {
                acc.iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                acc(a, &mut |ga| zip3(ga, g, vb, |d, y| d * y));
                acc(b, &mut |gb| zip3(gb, g, va, |d, x| d * x));
            }
            Op::Div(a, b) => {
                let vb = self.value(b);
                acc(a, &mut |ga| zip3(ga, g, vb, |d, y| d / y));
                acc(b, &mut |gb| {
                    for (k, x) in gb.iter_mut().enumerate() {
                        *x -= g[k] * out[k] / vb[k];
                    }
                });
            }
            Op::Scale(a, k) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * k)),
            Op::Square(a) => {
                let va = self.value(a);
                acc(a, &mut |ga| zip3(ga, g, va, |d, x| 2.0 * d * x));
            }
            Op::Sqrt(a) => acc(a, &mut |ga| zip3(ga, g, out, |d, y| 0.5 * d / y)),
            Op::Relu(a) => {
                let va = self.value(a);
                acc(a, &mut |ga| zip3(ga, g, va, |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::ClampMin(a, floor) => {
                let va = self.value(a);
                acc(a, &mut |ga| zip3(ga, g, va, |d, x| if x > floor { d } else { 0.0 }));
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(a);
                acc(a, &mut |ga| zip3(ga, g, va, |d, x| if x > lo && x < hi { d } else { 0.0 }));
            }
            Op::Powf(a, e) => {
                let va = self.value(a);
                acc(a, &mut |ga| zip3(ga, g, va, |d, x| d * e * libm::pow(x, e - 1.0)));
            }
            Op::Acos { x, guard } => {
                let vx = self.value(x);
                acc(x, &mut |gx| {
                    zip3(gx, g, vx, |d, c| {
                        let c = c.clamp(-1.0 + guard, 1.0 - guard);
                        -d / libm::sqrt(1.0 - c * c)
                    })
                });
            }
            Op::Dropout(a, ref mask) => acc(a, &mut |ga| zip3(ga, g, mask, |d, m| d * m)),
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let geom = ConvGeometry::new(self.shape(input), self.shape(weight), self.shape(bias), stride, padding)
                    .expect("validated in forward");
                let (vi, vw) = (self.value(input), self.value(weight));
                acc(input, &mut |gi| geom.backward_input(g, vw, gi));
                acc(weight, &mut |gw| geom.backward_weight(g, vi, gw));
                acc(bias, &mut |gb| geom.backward_bias(g, gb));
            }
            Op::SpatialSum(a) => {
                let hw = self.shape(a)[2] * self.shape(a)[3];
                acc(a, &mut |ga| {
                    for (plane, d) in ga.chunks_exact_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|x| *x += d);
                    }
                });
            }
            Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::NormalizeRows(a) => {
                let c = self.shape(a)[1];
                let va = self.value(a);
                acc(a, &mut |ga| {
                    for ((gx, x), (y, d)) in ga
                        .chunks_exact_mut(c)
                        .zip(va.chunks_exact(c))
                        .zip(out.chunks_exact(c).zip(g.chunks_exact(c)))
                    {
                        let norm = libm::sqrt(x.iter().map(|v| v * v).sum());
                        let yd: f64 = y.iter().zip(d).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            gx[k] += (d[k] - y[k] * yd) / norm;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let c = self.shape(a)[1];
                let (va, vb) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for ((gr, br), d) in ga.chunks_exact_mut(c).zip(vb.chunks_exact(c)).zip(g) {
                        gr.iter_mut().zip(br).for_each(|(x, y)| *x += d * y);
                    }
                });
                acc(b, &mut |gb| {
                    for ((gr, ar), d) in gb.chunks_exact_mut(c).zip(va.chunks_exact(c)).zip(g) {
                        gr.iter_mut().zip(ar).for_each(|(x, y)| *x += d * y);
                    }
                });
            }
            Op::ChannelDiv(image, e) => {
                let hw = self.shape(image)[2] * self.shape(image)[3];
                let ve = self.value(e);
                acc(image, &mut |gi| {
                    for ((gp, dp), d) in gi.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).zip(ve) {
                        gp.iter_mut().zip(dp).for_each(|(x, q)| *x += q / d);
                    }
                });
                acc(e, &mut |ge| {
                    for (k, ((dp, op), d)) in g.chunks_exact(hw).zip(out.chunks_exact(hw)).zip(ve).enumerate() {
                        let s: f64 = dp.iter().zip(op).map(|(q, y)| q * y).sum();
                        ge[k] -= s / d;
                    }
                });
            }
            Op::View { src, offset } => acc(src, &mut |gs| add_into(&mut gs[offset..offset + g.len()], g)),
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::RowDot(a, b) | Op::ChannelDiv(a, b) => {
            vec![a, b]
        }
        Op::Scale(a, _)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Relu(a)
        | Op::ClampMin(a, _)
        | Op::Clamp(a, _, _)
        | Op::Powf(a, _)
        | Op::Acos { x: a, .. }
        | Op::Dropout(a, _)
        | Op::SpatialSum(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::NormalizeRows(a)
        | Op::View { src: a, .. } => vec![a],
        Op::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, d)| *a += d);
}

fn zip3(acc: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((a, d), x) in acc.iter_mut().zip(g).zip(v) {
        *a += f(*d, *x);
    }
}

/// Shapes and index arithmetic shared by the convolution passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[n, c, h, w] = input else {
            return Err(Error::Shape(format!("conv2d input must be rank 4, got {input:?}")));
        };
        let &[k, wc, kh, kw] = weight else {
            return Err(Error::Shape(format!("conv2d weight must be rank 4, got {weight:?}")));
        };
        if wc != c {
            return Err(Error::Shape(format!("conv2d weight expects {wc} input channels, input has {c}")));
        }
        if bias != [k] {
            return Err(Error::Shape(format!("conv2d bias {bias:?} does not match {k} output channels")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c, h, w, k, kh, kw, stride, pad, ho, wo })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.ho, self.wo]
    }

    /// Input row hit by output row `oy` at kernel row `ki`, if inside the image.
    fn in_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }

    /// Output columns whose tap at kernel column `kj` lands inside the image.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        let hi = if self.w - 1 + self.pad >= kj { (self.w - 1 + self.pad - kj) / self.stride + 1 } else { 0 };
        (lo, hi.min(self.wo))
    }

    fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (hw, ohw) = (self.h * self.w, self.ho * self.wo);
        let mut out = vec![0.0; self.n * self.k * ohw];
        for n in 0..self.n {
            for k in 0..self.k {
                let plane = &mut out[(n * self.k + k) * ohw..][..ohw];
                plane.fill(bias[k]);
                for c in 0..self.c {
                    let src = &input[(n * self.c + c) * hw..][..hw];
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = weight[((k * self.c + c) * self.kh + ki) * self.kw + kj];
                            let (lo, hi) = self.col_range(kj);
                            for oy in 0..self.ho {
                                let Some(iy) = self.in_row(oy, ki) else { continue };
                                let row = &src[iy * self.w..][..self.w];
                                let dst = &mut plane[oy * self.wo..][..self.wo];
                                for ox in lo..hi {
                                    dst[ox] += wv * row[ox * self.stride + kj - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, g: &[f64], weight: &[f64], gi: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.ho * self.wo);
        for n in 0..self.n {
            for k in 0..self.k {
                let gplane = &g[(n * self.k + k) * ohw..][..ohw];
                for c in 0..self.c {
                    let dst = &mut gi[(n * self.c + c) * hw..][..hw];
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = weight[((k * self.c + c) * self.kh + ki) * self.kw + kj];
                            let (lo, hi) = self.col_range(kj);
                            for oy in 0..self.ho {
                                let Some(iy) = self.in_row(oy, ki) else { continue };
                                let grow = &gplane[oy * self.wo..][..self.wo];
                                let row = &mut dst[iy * self.w..][..self.w];
                                for ox in lo..hi {
                                    row[ox * self.stride + kj - self.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], input: &[f64], gw: &mut [f64]) {
        let (hw, ohw) = (self.h * self.w, self.ho * self.wo);
        for n in 0..self.n {
            for k in 0..self.k {
                let gplane = &g[(n * self.k + k) * ohw..][..ohw];
                for c in 0..self.c {
                    let src = &input[(n * self.c + c) * hw..][..hw];
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let (lo, hi) = self.col_range(kj);
                            let mut s = 0.0;
                            for oy in 0..self.ho {
                                let Some(iy) = self.in_row(oy, ki) else { continue };
                                let grow = &gplane[oy * self.wo..][..self.wo];
                                let row = &src[iy * self.w..][..self.w];
                                for ox in lo..hi {
                                    s += grow[ox] * row[ox * self.stride + kj - self.pad];
                                }
                            }
                            gw[((k * self.c + c) * self.kh + ki) * self.kw + kj] += s;
                        }
                    }
                }
            }
        }
    }

    fn backward_bias(&self, g: &[f64], gb: &mut [f64]) {
        let ohw = self.ho * self.wo;
        for (i, plane) in g.chunks_exact(ohw).enumerate() {
            gb[i % self.k] += plane.iter().sum::<f64>();
        }
    }
}

/// Tape gradient and central-difference gradient of a scalar function at `x`.
pub fn gradient_pair<F>(mut f: F, x: &Tensor, h: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.shape(), x.data().to_vec())?;
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).expect("input is differentiable").to_vec();

    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(x.shape(), data)?;
        let out = f(&mut t, v)?;
        Ok(t.scalar(out))
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok((analytic, numeric))
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
/// over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let (analytic, numeric) = gradient_pair(f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// `max |a - n| / max |a|` over a block of coordinates, the error relative to
/// the block's gradient scale rather than to each coordinate.
pub fn normwise_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
