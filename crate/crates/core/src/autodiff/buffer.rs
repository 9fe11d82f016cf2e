use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + AddAssign + MulAssign + Sum + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Rank-4 shape in (batch, channels, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major storage backing a tensor value or gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Buffer<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Buffer {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Buffer { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Buffer { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Buffer {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `(h, w)` plane of image `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.shape.index(n, c, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    pub fn add_assign(&mut self, other: &Buffer<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Buffer<T> {
        Buffer {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Buffer<U> {
        Buffer {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Integer class-id map of shape `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<usize>,
}

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::dim(format!(
                "label length {} does not match (n, h, w) = ({n}, {h}, {w})",
                data.len()
            )));
        }
        Ok(Labels { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, class: usize) -> Self {
        Labels {
            n,
            h,
            w,
            data: vec![class; n * h * w],
        }
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> usize {
        self.data[(n * self.h + y) * self.w + x]
    }

    /// Stacks single-image label maps along the batch axis.
    pub fn stack(parts: &[&Labels]) -> Result<Labels> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("cannot stack zero label maps"))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::dim(format!(
                    "label spatial dims ({}, {}) differ from ({h}, {w})",
                    p.h, p.w
                )));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Labels { n, h, w, data })
    }
}

/// Stacks buffers along the batch axis.
pub fn stack_batch<T: Element>(parts: &[&Buffer<T>]) -> Result<Buffer<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("cannot stack zero buffers"))?;
    let s = first.shape();
    let mut data = Vec::with_capacity(s.numel() * parts.len());
    let mut n = 0;
    for p in parts {
        let ps = p.shape();
        if (ps.c, ps.h, ps.w) != (s.c, s.h, s.w) {
            return Err(Error::dim(format!(
                "cannot stack {ps} onto {s}: channel/height/width differ"
            )));
        }
        data.extend_from_slice(p.data());
        n += ps.n;
    }
    Buffer::from_vec(Shape::new(n, s.c, s.h, s.w), data)
}
