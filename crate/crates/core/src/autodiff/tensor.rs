use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::buffer::{Buffer, Element, Labels, Shape};
use crate::error::{Error, Result};

/// A recorded forward operation: its inputs plus whatever it saved for the
/// backward pass.
pub(crate) enum Op<T: Element> {
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    },
    Concat {
        parts: Vec<Tensor<T>>,
    },
    SliceChannels {
        input: Tensor<T>,
        start: usize,
    },
    Crop {
        input: Tensor<T>,
        top: usize,
        left: usize,
    },
    MaxPool2 {
        input: Tensor<T>,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Tensor<T>,
    },
    Relu {
        input: Tensor<T>,
    },
    Abs {
        input: Tensor<T>,
    },
    Scale {
        input: Tensor<T>,
        factor: T,
    },
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Softmax {
        input: Tensor<T>,
    },
    CrossEntropy {
        logits: Tensor<T>,
        target: Labels,
    },
    Sum {
        input: Tensor<T>,
    },
    WeightedSum {
        input: Tensor<T>,
        weights: Vec<T>,
    },
}

impl<T: Element> Op<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias.iter());
                v
            }
            Op::Concat { parts } => parts.iter().collect(),
            Op::SliceChannels { input, .. }
            | Op::Crop { input, .. }
            | Op::MaxPool2 { input, .. }
            | Op::Upsample { input }
            | Op::Relu { input }
            | Op::Abs { input }
            | Op::Scale { input, .. }
            | Op::Softmax { input }
            | Op::Sum { input }
            | Op::WeightedSum { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Crop { .. } => "crop",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Relu { .. } => "relu",
            Op::Abs { .. } => "abs",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Softmax { .. } => "softmax_channels",
            Op::CrossEntropy { .. } => "ce_per_pixel",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

pub(crate) struct Node<T: Element> {
    value: RefCell<Buffer<T>>,
    grad: RefCell<Option<Buffer<T>>>,
    op: RefCell<Option<Op<T>>>,
    requires_grad: bool,
}

/// Handle to a node of the computation graph. Cloning is cheap and shares
/// the node.
///
/// Leaves created with [`Tensor::param`] accumulate gradients across
/// `backward` calls until [`Tensor::zero_grad`]. Intermediate results keep
/// their recorded operation only until the first `backward` through them.
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.borrow().as_ref().map(Op::name))
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn from_parts(value: Buffer<T>, op: Option<Op<T>>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            op: RefCell::new(op),
            requires_grad,
        }))
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Buffer<T>) -> Self {
        Self::from_parts(value, None, false)
    }

    /// A trainable leaf.
    pub fn param(value: Buffer<T>) -> Self {
        Self::from_parts(value, None, true)
    }

    /// Result of a forward op. The op is only recorded when some input is
    /// tracked, so graphs over constants stay empty.
    pub(crate) fn from_op(value: Buffer<T>, op: Op<T>) -> Self {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            let inputs_finite = op.parents().iter().all(|p| p.value().all_finite());
            debug_assert!(
                !inputs_finite,
                "{} produced non-finite output from finite inputs",
                op.name()
            );
        }
        let tracked = op.parents().iter().any(|p| p.is_tracked());
        if tracked {
            Self::from_parts(value, Some(op), false)
        } else {
            Self::from_parts(value, None, false)
        }
    }

    pub fn shape(&self) -> Shape {
        self.0.value.borrow().shape()
    }

    pub fn value(&self) -> Ref<'_, Buffer<T>> {
        self.0.value.borrow()
    }

    /// Mutable access to the stored value, for optimizers and perturbation
    /// probes. Must not be held across a forward pass.
    pub fn value_mut(&self) -> RefMut<'_, Buffer<T>> {
        self.0.value.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value().data().to_vec()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.data().len(), 1, "item() on tensor of shape {}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Whether gradients can flow into this tensor: a trainable leaf, or the
    /// output of a still-recorded operation.
    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad || self.0.op.borrow().is_some()
    }

    pub fn has_graph(&self) -> bool {
        self.0.op.borrow().is_some()
    }

    pub fn grad(&self) -> Option<Ref<'_, Buffer<T>>> {
        Ref::filter_map(self.0.grad.borrow(), Option::as_ref).ok()
    }

    pub fn take_grad(&self) -> Option<Buffer<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Buffer<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from this one-element tensor. Trainable leaves
    /// reachable from it get their gradient accumulated; the recorded graph
    /// is released as it is consumed.
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if shape.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a one-element loss, got shape {shape}"
            )));
        }
        if !self.has_graph() {
            return Err(Error::State(
                "backward called on a tensor with no recorded graph".to_string(),
            ));
        }

        // Post-order DFS over recorded nodes; reversed it is a valid
        // processing order (every node before its parents).
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.0.op.borrow().as_ref() {
                for p in op.parents() {
                    if p.has_graph() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<usize, Buffer<T>> = HashMap::new();
        pending.insert(self.key(), Buffer::scalar(T::one()));
        for node in order.iter().rev() {
            let Some(gout) = pending.remove(&node.key()) else {
                continue;
            };
            let Some(op) = node.0.op.borrow_mut().take() else {
                continue;
            };
            let grads = {
                let out = node.value();
                backward_op(&op, &gout, &out)
            };
            for (parent, g) in op.parents().into_iter().zip(grads) {
                let Some(g) = g else { continue };
                if parent.has_graph() {
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            pending.insert(parent.key(), g);
                        }
                    }
                } else if parent.requires_grad() {
                    parent.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}

fn backward_op<T: Element>(
    op: &Op<T>,
    gout: &Buffer<T>,
    out: &Buffer<T>,
) -> Vec<Option<Buffer<T>>> {
    use super::kernels;
    let wants = |t: &Tensor<T>| t.is_tracked();
    match op {
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let need = [
                wants(input),
                wants(weight),
                bias.as_ref().is_some_and(wants),
            ];
            let g = kernels::conv2d_backward(
                &input.value(),
                &weight.value(),
                gout,
                *stride,
                *padding,
                need,
            );
            let mut v = vec![g.input, g.weight];
            if bias.is_some() {
                v.push(g.bias);
            }
            v
        }
        Op::Concat { parts } => {
            let gs = gout.shape();
            let mut start = 0;
            parts
                .iter()
                .map(|p| {
                    let ps = p.shape();
                    let g = slice_channels_raw(gout, start, ps.c);
                    start += ps.c;
                    debug_assert_eq!(g.shape(), Shape::new(gs.n, ps.c, gs.h, gs.w));
                    Some(g)
                })
                .collect()
        }
        Op::SliceChannels { input, start } => {
            let is = input.shape();
            let gs = gout.shape();
            let mut g = Buffer::zeros(is);
            for n in 0..is.n {
                for c in 0..gs.c {
                    let src = gout.plane(n, c);
                    let dst = is.index(n, start + c, 0, 0);
                    g.data_mut()[dst..dst + is.plane()].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        }
        Op::Crop { input, top, left } => {
            let is = input.shape();
            let gs = gout.shape();
            let mut g = Buffer::zeros(is);
            for n in 0..gs.n {
                for c in 0..gs.c {
                    for y in 0..gs.h {
                        for x in 0..gs.w {
                            g.set(n, c, y + top, x + left, gout.at(n, c, y, x));
                        }
                    }
                }
            }
            vec![Some(g)]
        }
        Op::MaxPool2 { input, argmax } => {
            let mut g = Buffer::zeros(input.shape());
            let gd = g.data_mut();
            for (&i, &go) in argmax.iter().zip(gout.data()) {
                gd[i] += go;
            }
            vec![Some(g)]
        }
        Op::Upsample { input } => vec![Some(kernels::bilinear_backward(gout, input.shape()))],
        Op::Relu { input } => {
            let x = input.value();
            let data = x
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(Buffer::from_vec(x.shape(), data).expect("same shape"))]
        }
        Op::Abs { input } => {
            let x = input.value();
            let data = x
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&xv, &g)| {
                    if xv > T::zero() {
                        g
                    } else if xv < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            vec![Some(Buffer::from_vec(x.shape(), data).expect("same shape"))]
        }
        Op::Scale { factor, .. } => vec![Some(gout.map(|g| g * *factor))],
        Op::Add { a, b } => vec![
            wants(a).then(|| gout.clone()),
            wants(b).then(|| gout.clone()),
        ],
        Op::Mul { a, b } => {
            let ga = wants(a).then(|| elementwise(gout, &b.value(), |g, v| g * v));
            let gb = wants(b).then(|| elementwise(gout, &a.value(), |g, v| g * v));
            vec![ga, gb]
        }
        Op::Softmax { .. } => {
            // dx = y * (g - sum_c g*y)
            let s = out.shape();
            let plane = s.plane();
            let mut g = Buffer::zeros(s);
            let (yd, gd) = (out.data(), gout.data());
            for n in 0..s.n {
                let base = n * s.c * plane;
                for p in 0..plane {
                    let dot: T = (0..s.c)
                        .map(|c| gd[base + c * plane + p] * yd[base + c * plane + p])
                        .sum();
                    for c in 0..s.c {
                        let i = base + c * plane + p;
                        g.data_mut()[i] = yd[i] * (gd[i] - dot);
                    }
                }
            }
            vec![Some(g)]
        }
        Op::CrossEntropy { logits, target } => {
            let mut g = kernels::softmax_channels(&logits.value());
            let s = g.shape();
            let plane = s.plane();
            let gd = g.data_mut();
            for n in 0..s.n {
                for p in 0..plane {
                    let go = gout.data()[n * plane + p];
                    let t = target.data()[n * plane + p];
                    for c in 0..s.c {
                        let i = (n * s.c + c) * plane + p;
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gd[i] = go * (gd[i] - onehot);
                    }
                }
            }
            vec![Some(g)]
        }
        Op::Sum { input } => vec![Some(Buffer::filled(input.shape(), gout.data()[0]))],
        Op::WeightedSum { input, weights } => {
            let go = gout.data()[0];
            let data = weights.iter().map(|&w| w * go).collect();
            vec![Some(
                Buffer::from_vec(input.shape(), data).expect("same shape"),
            )]
        }
    }
}

pub(crate) fn elementwise<T: Element>(
    a: &Buffer<T>,
    b: &Buffer<T>,
    f: impl Fn(T, T) -> T,
) -> Buffer<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Buffer::from_vec(a.shape(), data).expect("same shape")
}

pub(crate) fn slice_channels_raw<T: Element>(x: &Buffer<T>, start: usize, len: usize) -> Buffer<T> {
    let s = x.shape();
    let os = Shape::new(s.n, len, s.h, s.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        let from = s.index(n, start, 0, 0);
        data.extend_from_slice(&x.data()[from..from + len * s.plane()]);
    }
    Buffer::from_vec(os, data).expect("slice shape")
}
