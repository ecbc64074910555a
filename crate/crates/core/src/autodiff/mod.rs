//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is already a topological order. [`Graph::backward`] walks that record in
//! reverse and returns a [`Gradients`] table indexed by [`Var`].
//!
//! Only the primitives the segmentation pipeline needs are provided:
//! convolution, pooling, upsampling, channel concatenation, activations, a
//! scalar affine, shape-preserving 3D averaging, the projection geometry and
//! the soft Dice loss.

mod conv;
mod spatial;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::kernels as geo;
use crate::tensor::{Scalar, Shape, Tensor};

pub use conv::Padding;
pub(crate) use spatial::avgpool3d_same_forward as avgpool3d_same_values;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    /// Value copied from another node; backward does not cross it.
    StopGradient,
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Affine {
        input: Var,
        gain: Var,
        shift: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2d(Var),
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Pad2d(Var),
    Crop2d(Var),
    AvgPool3dSame(Var),
    Mip {
        volume: Var,
        angle: f64,
        argmax: Vec<u32>,
    },
    SumProject {
        volume: Var,
        angle: f64,
    },
    Filter1x2 {
        image: Var,
        filter: Var,
    },
    Backproject {
        images: Vec<Var>,
        angles: Vec<f64>,
    },
    Dice {
        target: Vec<T>,
        pred: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor`'s accumulator.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) {
        if let Some(g) = self.get(v) {
            tensor.accumulate_grad(g);
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn record(
        &mut self,
        shape: Shape,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Var {
        self.push(shape, value, op, requires_grad)
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.needs(v))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Copies the value of `v` out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Leaf carrying `t`'s values; tracks gradients iff `t` does.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().clone(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Trainable leaf, regardless of `t`'s own flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().clone(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, shape: impl Into<Shape>, value: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != value.len() {
            return Err(Error::shape("constant", shape.dims(), &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.push(Shape::scalar(), vec![v], Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow back into `v`.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::StopGradient, false)
    }

    pub fn reshape(&mut self, v: Var, dims: &[usize]) -> Result<Var> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.nodes[v.0].value.len() {
            return Err(Error::shape("reshape", self.shape(v), dims));
        }
        let value = self.nodes[v.0].value.clone();
        let rg = self.needs(v);
        Ok(self.push(shape, value, Op::Reshape(v), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(shape, value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, v: Var, k: T) -> Var {
        let value = self.value(v).iter().map(|&x| x * k).collect();
        let shape = self.nodes[v.0].shape.clone();
        let rg = self.needs(v);
        self.push(shape, value, Op::Scale(v, k), rg)
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let s = self.value(v).iter().copied().sum();
        let rg = self.needs(v);
        self.push(Shape::scalar(), vec![s], Op::Sum(v), rg)
    }

    /// Elementwise `max(x, 0)`; NaN passes through so divergence stays visible.
    pub fn relu(&mut self, v: Var) -> Var {
        let value = self
            .value(v)
            .iter()
            .map(|&x| if x < T::zero() { T::zero() } else { x })
            .collect();
        let shape = self.nodes[v.0].shape.clone();
        let rg = self.needs(v);
        self.push(shape, value, Op::Relu(v), rg)
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        let value = self.value(v).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[v.0].shape.clone();
        let rg = self.needs(v);
        self.push(shape, value, Op::Sigmoid(v), rg)
    }

    /// `gain * x + shift` with scalar `gain` and `shift`.
    pub fn affine(&mut self, input: Var, gain: Var, shift: Var) -> Result<Var> {
        for s in [gain, shift] {
            if self.nodes[s.0].value.len() != 1 {
                return Err(Error::invalid(
                    "affine",
                    self.shape(s),
                    "gain and shift must be scalars",
                ));
            }
        }
        let (g, s) = (self.value(gain)[0], self.value(shift)[0]);
        let value = self.value(input).iter().map(|&x| g * x + s).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.any_needs(&[input, gain, shift]);
        Ok(self.push(shape, value, Op::Affine { input, gain, shift }, rg))
    }

    /// Soft Dice loss `1 - (2 sum(y*p) + eps) / (sum(p) + sum(y) + eps)` of the
    /// prediction `pred` against the fixed target `target`.
    pub fn dice_loss(&mut self, target: &[T], pred: Var) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(Error::shape("dice_loss", &[target.len()], self.shape(pred)));
        }
        let loss = dice_value(target, self.value(pred));
        let rg = self.needs(pred);
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            Op::Dice {
                target: target.to_vec(),
                pred,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Only nodes that track gradients report them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Reshape(v) => {
                if let Some(s) = self.slot(grads, *v) {
                    add_into(s, g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(xb) {
                        *d += gi * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(xa) {
                        *d += gi * y;
                    }
                }
            }
            Op::Scale(v, k) => {
                if let Some(s) = self.slot(grads, *v) {
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * *k;
                    }
                }
            }
            Op::Sum(v) => {
                if let Some(s) = self.slot(grads, *v) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Relu(v) => {
                let x = self.value(*v);
                if let Some(s) = self.slot(grads, *v) {
                    for ((d, &gi), &xi) in s.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(v) => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, *v) {
                    for ((d, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Affine { input, gain, shift } => {
                let x = self.value(*input);
                let k = self.value(*gain)[0];
                if let Some(s) = self.slot(grads, *input) {
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * k;
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    s[0] += g.iter().zip(x).map(|(&gi, &xi)| gi * xi).sum::<T>();
                }
                if let Some(s) = self.slot(grads, *shift) {
                    s[0] += g.iter().copied().sum::<T>();
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let geom = conv::ConvGeom::new(self.shape(*input), self.shape(*kernel), *padding)
                    .expect("validated at record time");
                let x = self.value(*input);
                let w = self.value(*kernel);
                if let Some(s) = self.slot(grads, *input) {
                    conv::backward_input(&geom, w, g, s);
                }
                if let Some(s) = self.slot(grads, *kernel) {
                    conv::backward_kernel(&geom, x, g, s);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    conv::backward_bias(&geom, g, s);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(s) = self.slot(grads, *input) {
                    for (&gi, &ix) in g.iter().zip(argmax) {
                        s[ix as usize] += gi;
                    }
                }
            }
            Op::Upsample2d(v) => {
                let d = self.shape(*v);
                let (c, h, w) = (d[0], d[1], d[2]);
                if let Some(s) = self.slot(grads, *v) {
                    spatial::upsample2d_backward(g, c, h, w, s);
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, &g[..na]);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_into(s, &g[na..]);
                }
            }
            Op::SliceChannels { input, start } => {
                let d = self.shape(*input);
                let plane = d[1] * d[2];
                let off = start * plane;
                if let Some(s) = self.slot(grads, *input) {
                    add_into(&mut s[off..off + g.len()], g);
                }
            }
            Op::Pad2d(v) => {
                let src = self.shape(*v).to_vec();
                let dst = node.shape.dims();
                if let Some(s) = self.slot(grads, *v) {
                    spatial::crop2d_add(g, dst, &src, s);
                }
            }
            Op::Crop2d(v) => {
                let src = self.shape(*v).to_vec();
                let dst = node.shape.dims();
                if let Some(s) = self.slot(grads, *v) {
                    spatial::pad2d_add(g, dst, &src, s);
                }
            }
            Op::AvgPool3dSame(v) => {
                let d = self.shape(*v).to_vec();
                if let Some(s) = self.slot(grads, *v) {
                    spatial::avgpool3d_same_backward(g, [d[0], d[1], d[2]], s);
                }
            }
            Op::Mip {
                volume,
                angle,
                argmax,
            } => {
                let d = self.shape(*volume).to_vec();
                let dims = [d[0], d[1], d[2]];
                if let Some(s) = self.slot(grads, *volume) {
                    let taps = geo::RotationTaps::new(dims[0], dims[1], *angle);
                    geo::mip_backward(g, argmax, dims, &taps, s);
                }
            }
            Op::SumProject { volume, angle } => {
                let d = self.shape(*volume).to_vec();
                let dims = [d[0], d[1], d[2]];
                if let Some(s) = self.slot(grads, *volume) {
                    let taps = geo::RotationTaps::new(dims[0], dims[1], *angle);
                    geo::backproject_add(g, dims, &taps, s);
                }
            }
            Op::Filter1x2 { image, filter } => {
                let d = self.shape(*image);
                let (b, c) = (d[0], d[1]);
                let u = self.value(*image);
                let w = self.value(*filter);
                if let Some(s) = self.slot(grads, *image) {
                    geo::filter1x2_backward_image(g, b, c, w[0], w[1], s);
                }
                if let Some(s) = self.slot(grads, *filter) {
                    let (g0, g1) = geo::filter1x2_backward_filter(g, u, b, c);
                    s[0] += g0;
                    s[1] += g1;
                }
            }
            Op::Backproject { images, angles } => {
                let d = node.shape.dims();
                let dims = [d[0], d[1], d[2]];
                for (&img, &angle) in images.iter().zip(angles) {
                    if let Some(s) = self.slot(grads, img) {
                        let taps = geo::RotationTaps::new(dims[0], dims[1], angle);
                        geo::sum_project_add(g, dims, &taps, s);
                    }
                }
            }
            Op::Dice { target, pred } => {
                let p = self.value(*pred);
                if let Some(s) = self.slot(grads, *pred) {
                    dice_grad_add(target, p, g[0], s);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dice_value<T: Scalar>(target: &[T], pred: &[T]) -> T {
    let eps = T::from_f64(DICE_EPS);
    let two = T::from_f64(2.0);
    let (mut inter, mut total) = (T::zero(), T::zero());
    for (&y, &p) in target.iter().zip(pred) {
        inter += y * p;
        total += y + p;
    }
    T::one() - (two * inter + eps) / (total + eps)
}

fn dice_grad_add<T: Scalar>(target: &[T], pred: &[T], upstream: T, out: &mut [T]) {
    let eps = T::from_f64(DICE_EPS);
    let two = T::from_f64(2.0);
    let (mut inter, mut total) = (T::zero(), T::zero());
    for (&y, &p) in target.iter().zip(pred) {
        inter += y * p;
        total += y + p;
    }
    let num = two * inter + eps;
    let den = total + eps;
    let den2 = den * den;
    for (o, &y) in out.iter_mut().zip(target) {
        *o += upstream * -(two * y * den - num) / den2;
    }
}
