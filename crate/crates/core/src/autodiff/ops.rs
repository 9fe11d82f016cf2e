use rand::Rng;

use super::buffer::{Buffer, Element, Labels, Shape};
use super::kernels;
use super::tensor::{elementwise, slice_channels_raw, Op, Tensor};
use crate::error::{Error, Result};

/// A square convolution filter bank: weights `(out_ch, in_ch, k, k)`,
/// optional bias `(out_ch)`, stride and zero padding.
#[derive(Clone, Debug)]
pub struct ConvKernel<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvKernel<T> {
    /// Uniform init in `±1/sqrt(in_ch·k²)` for weights and bias alike, with
    /// "same" padding `(k-1)/2` and stride 1.
    pub fn init<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_kernel_size(k)?;
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let weight = Buffer::from_fn(Shape::new(out_ch, in_ch, k, k), |_, _, _, _| {
            T::of(rng.gen_range(-bound..bound))
        });
        let bias = bias.then(|| {
            Buffer::from_fn(Shape::new(out_ch, 1, 1, 1), |_, _, _, _| {
                T::of(rng.gen_range(-bound..bound))
            })
        });
        Ok(Self::from_buffers(weight, bias))
    }

    pub fn zeros(in_ch: usize, out_ch: usize, k: usize, bias: bool) -> Result<Self> {
        check_kernel_size(k)?;
        let weight = Buffer::zeros(Shape::new(out_ch, in_ch, k, k));
        let bias = bias.then(|| Buffer::zeros(Shape::new(out_ch, 1, 1, 1)));
        Ok(Self::from_buffers(weight, bias))
    }

    /// Wraps existing buffers as trainable parameters with same padding.
    pub fn from_buffers(weight: Buffer<T>, bias: Option<Buffer<T>>) -> Self {
        let k = weight.shape().h;
        ConvKernel {
            weight: Tensor::param(weight),
            bias: bias.map(Tensor::param),
            stride: 1,
            padding: k.saturating_sub(1) / 2,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape().h
    }

    /// Number of scalar weights, plus biases when asked.
    pub fn num_params(&self, include_bias: bool) -> u64 {
        let w = self.weight.shape().numel() as u64;
        let b = match (&self.bias, include_bias) {
            (Some(b), true) => b.shape().numel() as u64,
            _ => 0,
        };
        w + b
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.iter().cloned());
        v
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self)
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

pub fn conv2d<T: Element>(x: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = kernel.weight.shape();
    if ws.h != ws.w {
        return Err(Error::dim(format!(
            "kernel must be square, got {}x{}",
            ws.h, ws.w
        )));
    }
    if xs.c != ws.c {
        return Err(Error::dim(format!(
            "input channels (axis 1 of x) = {} but kernel in_ch (axis 1 of weight) = {}",
            xs.c, ws.c
        )));
    }
    if let Some(b) = &kernel.bias {
        if b.shape().numel() != ws.n {
            return Err(Error::dim(format!(
                "bias length {} does not match out_ch (axis 0 of weight) = {}",
                b.shape().numel(),
                ws.n
            )));
        }
    }
    let (s, p) = (kernel.stride, kernel.padding);
    if s == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    if kernels::conv_out_len(xs.h, ws.h, s, p).is_none()
        || kernels::conv_out_len(xs.w, ws.w, s, p).is_none()
    {
        return Err(Error::dim(format!(
            "spatial dims (axes 2, 3) = ({}, {}) with padding {p} are smaller than kernel {}",
            xs.h, xs.w, ws.h
        )));
    }
    let out = {
        let bias = kernel.bias.as_ref().map(|b| b.value());
        kernels::conv2d_forward(&x.value(), &kernel.weight.value(), bias.as_deref(), s, p)
    };
    Ok(Tensor::from_op(
        out,
        Op::Conv2d {
            input: x.clone(),
            weight: kernel.weight.clone(),
            bias: kernel.bias.clone(),
            stride: s,
            padding: p,
        },
    ))
}

/// Concatenates along the channel axis, preserving order.
pub fn concat_channels<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat_channels needs at least one part"))?;
    let s0 = first.shape();
    let mut channels = 0;
    for (i, p) in parts.iter().enumerate() {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::dim(format!(
                "part {i} has (n, h, w) = ({}, {}, {}), expected ({}, {}, {})",
                s.n, s.h, s.w, s0.n, s0.h, s0.w
            )));
        }
        channels += s.c;
    }
    let os = Shape::new(s0.n, channels, s0.h, s0.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..s0.n {
        for p in parts {
            let v = p.value();
            let s = v.shape();
            let from = s.index(n, 0, 0, 0);
            data.extend_from_slice(&v.data()[from..from + s.c * s.plane()]);
        }
    }
    let out = Buffer::from_vec(os, data)?;
    Ok(Tensor::from_op(
        out,
        Op::Concat {
            parts: parts.to_vec(),
        },
    ))
}

/// Channels `start..start + len`.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c || len == 0 {
        return Err(Error::dim(format!(
            "channel slice {start}..{} out of range for {} channels",
            start + len,
            s.c
        )));
    }
    let out = slice_channels_raw(&x.value(), start, len);
    Ok(Tensor::from_op(
        out,
        Op::SliceChannels {
            input: x.clone(),
            start,
        },
    ))
}

/// Spatial window `[top, top + h) x [left, left + w)`.
pub fn crop<T: Element>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if top + h > s.h || left + w > s.w {
        return Err(Error::dim(format!(
            "crop window ({top}+{h}, {left}+{w}) exceeds spatial dims ({}, {})",
            s.h, s.w
        )));
    }
    let out = {
        let v = x.value();
        Buffer::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, xx| {
            v.at(n, c, y + top, xx + left)
        })
    };
    Ok(Tensor::from_op(
        out,
        Op::Crop {
            input: x.clone(),
            top,
            left,
        },
    ))
}

/// 2x2 stride-2 max pooling; gradient goes to the first maximal element.
pub fn maxpool2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim(format!("maxpool2 on empty spatial dims {s}")));
    }
    let (out, argmax) = kernels::maxpool2_forward(&x.value());
    Ok(Tensor::from_op(
        out,
        Op::MaxPool2 {
            input: x.clone(),
            argmax,
        },
    ))
}

/// Bilinear resampling by an integer factor with half-pixel centers
/// (align-corners = false).
pub fn bilinear_upsample<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::arg("upsample factor must be at least 1"));
    }
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::dim(format!(
            "bilinear_upsample on empty spatial dims {s}"
        )));
    }
    let out = kernels::bilinear_forward(&x.value(), s.h * factor, s.w * factor);
    Ok(Tensor::from_op(out, Op::Upsample { input: x.clone() }))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    Tensor::from_op(out, Op::Relu { input: x.clone() })
}

pub fn abs<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.value().map(|v| v.abs());
    Tensor::from_op(out, Op::Abs { input: x.clone() })
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    let out = x.value().map(|v| v * factor);
    Tensor::from_op(
        out,
        Op::Scale {
            input: x.clone(),
            factor,
        },
    )
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let out = elementwise(&a.value(), &b.value(), |x, y| x + y);
    Ok(Tensor::from_op(
        out,
        Op::Add {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let out = elementwise(&a.value(), &b.value(), |x, y| x * y);
    Ok(Tensor::from_op(
        out,
        Op::Mul {
            a: a.clone(),
            b: b.clone(),
        },
    ))
}

fn same_shape<T: Element>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-pixel softmax across channels.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let out = kernels::softmax_channels(&x.value());
    Tensor::from_op(out, Op::Softmax { input: x.clone() })
}

/// Per-pixel cross-entropy `-log softmax(logits)[target]`, returned as an
/// `(n, 1, h, w)` loss map.
pub fn ce_per_pixel<T: Element>(logits: &Tensor<T>, target: &Labels) -> Result<Tensor<T>> {
    let s = logits.shape();
    if (target.n, target.h, target.w) != (s.n, s.h, s.w) {
        return Err(Error::dim(format!(
            "target (n, h, w) = ({}, {}, {}) does not match logits {s}",
            target.n, target.h, target.w
        )));
    }
    if let Some(&bad) = target.data().iter().find(|&&t| t >= s.c) {
        return Err(Error::arg(format!(
            "target class id {bad} >= number of channels {}",
            s.c
        )));
    }
    let plane = s.plane();
    let out = {
        let v = logits.value();
        let d = v.data();
        let mut loss = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for c in 0..s.c {
                    mx = mx.max(d[base + c * plane + p]);
                }
                let z: T = (0..s.c).map(|c| (d[base + c * plane + p] - mx).exp()).sum();
                let t = target.data()[n * plane + p];
                loss.push(mx + z.ln() - d[base + t * plane + p]);
            }
        }
        Buffer::from_vec(Shape::new(s.n, 1, s.h, s.w), loss)?
    };
    Ok(Tensor::from_op(
        out,
        Op::CrossEntropy {
            logits: logits.clone(),
            target: target.clone(),
        },
    ))
}

pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let total: T = x.value().data().iter().copied().sum();
    Tensor::from_op(Buffer::scalar(total), Op::Sum { input: x.clone() })
}

/// `Σ weights[i] · x[i]` with constant weights.
pub fn weighted_sum<T: Element>(x: &Tensor<T>, weights: Vec<T>) -> Result<Tensor<T>> {
    let n = x.shape().numel();
    if weights.len() != n {
        return Err(Error::dim(format!(
            "weighted_sum: {} weights for {n} elements",
            weights.len()
        )));
    }
    let total: T = x
        .value()
        .data()
        .iter()
        .zip(&weights)
        .map(|(&a, &b)| a * b)
        .sum();
    Ok(Tensor::from_op(
        Buffer::scalar(total),
        Op::WeightedSum {
            input: x.clone(),
            weights,
        },
    ))
}

impl<T: Element> Tensor<T> {
    pub fn conv2d(&self, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
        conv2d(self, kernel)
    }

    pub fn relu(&self) -> Tensor<T> {
        relu(self)
    }

    pub fn maxpool2(&self) -> Result<Tensor<T>> {
        maxpool2(self)
    }

    pub fn sum(&self) -> Tensor<T> {
        sum(self)
    }
}
