//! Raw numeric kernels on [`Buffer`]s. No graph bookkeeping happens here.

use super::buffer::{Buffer, Element, Shape};

/// Output extent of a convolution along one axis, or `None` if the padded
/// input is smaller than the kernel.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + tap - padding`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(
    out_len: usize,
    len: usize,
    tap: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    // o*s + tap >= padding  and  o*s + tap < len + padding
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    let hi_excl = if len + padding > tap {
        (len + padding - tap).div_ceil(stride)
    } else {
        0
    };
    (lo.min(out_len), hi_excl.min(out_len))
}

/// Cross-correlation of `x (n, ci, h, w)` with `weight (co, ci, k, k)`.
pub fn conv2d_forward<T: Element>(
    x: &Buffer<T>,
    weight: &Buffer<T>,
    bias: Option<&Buffer<T>>,
    stride: usize,
    padding: usize,
) -> Buffer<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let oh = conv_out_len(xs.h, k, stride, padding).expect("validated by caller");
    let ow = conv_out_len(xs.w, k, stride, padding).expect("validated by caller");
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Buffer::zeros(os);
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();

    for n in 0..xs.n {
        for oc in 0..ws.n {
            let obase = os.index(n, oc, 0, 0);
            let oplane = &mut od[obase..obase + oh * ow];
            if let Some(b) = bias {
                oplane.fill(b.data()[oc]);
            }
            for ic in 0..xs.c {
                let xbase = xs.index(n, ic, 0, 0);
                let xplane = &xd[xbase..xbase + xs.h * xs.w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(oh, xs.h, ky, stride, padding);
                    for kx in 0..k {
                        let wv = wd[ws.index(oc, ic, ky, kx)];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(ow, xs.w, kx, stride, padding);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            let xrow = &xplane[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                let len = ox1 - ox0;
                                for (o, &xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + len])
                                {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * stride + kx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Buffer<T>>,
    pub weight: Option<Buffer<T>>,
    pub bias: Option<Buffer<T>>,
}

/// Gradients of `conv2d_forward` given the upstream gradient `gout`.
pub fn conv2d_backward<T: Element>(
    x: &Buffer<T>,
    weight: &Buffer<T>,
    gout: &Buffer<T>,
    stride: usize,
    padding: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let gs = gout.shape();
    let k = ws.h;
    let (oh, ow) = (gs.h, gs.w);
    let xd = x.data();
    let wd = weight.data();
    let gd = gout.data();

    let mut gx = need[0].then(|| Buffer::zeros(xs));
    let mut gw = need[1].then(|| Buffer::zeros(ws));
    let gb = need[2].then(|| {
        let mut b = Buffer::zeros(Shape::new(ws.n, 1, 1, 1));
        for n in 0..gs.n {
            for oc in 0..gs.c {
                let s: T = gout.plane(n, oc).iter().copied().sum();
                b.data_mut()[oc] += s;
            }
        }
        b
    });

    for n in 0..xs.n {
        for oc in 0..ws.n {
            let gbase = gs.index(n, oc, 0, 0);
            let gplane = &gd[gbase..gbase + oh * ow];
            for ic in 0..xs.c {
                let xbase = xs.index(n, ic, 0, 0);
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(oh, xs.h, ky, stride, padding);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(ow, xs.w, kx, stride, padding);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let widx = ws.index(oc, ic, ky, kx);
                        let wv = wd[widx];
                        let mut wacc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - padding;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow_start = xbase + iy * xs.w;
                            if stride == 1 {
                                let ix0 = ox0 + kx - padding;
                                let len = ox1 - ox0;
                                if gw.is_some() {
                                    let xrow = &xd[xrow_start + ix0..xrow_start + ix0 + len];
                                    let mut acc = T::zero();
                                    for (&g, &xv) in grow[ox0..ox1].iter().zip(xrow) {
                                        acc += g * xv;
                                    }
                                    wacc += acc;
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let gxrow = &mut gx.data_mut()
                                        [xrow_start + ix0..xrow_start + ix0 + len];
                                    for (o, &g) in gxrow.iter_mut().zip(&grow[ox0..ox1]) {
                                        *o += wv * g;
                                    }
                                }
                            } else {
                                for (ox, &g) in grow.iter().enumerate().take(ox1).skip(ox0) {
                                    let xi = xrow_start + ox * stride + kx - padding;
                                    wacc += g * xd[xi];
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data_mut()[xi] += wv * g;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw.data_mut()[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// 2x2 stride-2 max pooling. Odd trailing rows/columns are treated as padded
/// with negative infinity. Returns the pooled buffer and, per output element,
/// the flat input index of the first (row-major) maximal element.
pub fn maxpool2_forward<T: Element>(x: &Buffer<T>) -> (Buffer<T>, Vec<usize>) {
    let xs = x.shape();
    let (oh, ow) = (xs.h.div_ceil(2), xs.w.div_ceil(2));
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = Buffer::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dy in 0..2 {
                        let y = 2 * oy + dy;
                        if y >= xs.h {
                            continue;
                        }
                        for dx in 0..2 {
                            let xx = 2 * ox + dx;
                            if xx >= xs.w {
                                continue;
                            }
                            let i = xs.index(n, c, y, xx);
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    od[oi] = best;
                    argmax.push(best_i);
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

/// One axis of a bilinear (align-corners = false) resampling: for each output
/// position, the two source indices and the weight of the second.
#[derive(Clone, Debug)]
pub struct LinearTaps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let mut i0 = Vec::with_capacity(dst_len);
        let mut i1 = Vec::with_capacity(dst_len);
        let mut frac = Vec::with_capacity(dst_len);
        for o in 0..dst_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            i0.push(lo);
            i1.push(hi);
            frac.push(src - lo as f64);
        }
        LinearTaps { i0, i1, frac }
    }
}

pub fn bilinear_forward<T: Element>(x: &Buffer<T>, oh: usize, ow: usize) -> Buffer<T> {
    let xs = x.shape();
    let ty = LinearTaps::new(xs.h, oh);
    let tx = LinearTaps::new(xs.w, ow);
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = Buffer::zeros(os);
    let od = out.data_mut();
    let mut oi = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let p = x.plane(n, c);
            for oy in 0..oh {
                let fy = T::of(ty.frac[oy]);
                let r0 = &p[ty.i0[oy] * xs.w..(ty.i0[oy] + 1) * xs.w];
                let r1 = &p[ty.i1[oy] * xs.w..(ty.i1[oy] + 1) * xs.w];
                for ox in 0..ow {
                    let fx = T::of(tx.frac[ox]);
                    let (a, b) = (tx.i0[ox], tx.i1[ox]);
                    let top = r0[a] + (r0[b] - r0[a]) * fx;
                    let bot = r1[a] + (r1[b] - r1[a]) * fx;
                    od[oi] = top + (bot - top) * fy;
                    oi += 1;
                }
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Element>(gout: &Buffer<T>, input_shape: Shape) -> Buffer<T> {
    let gs = gout.shape();
    let ty = LinearTaps::new(input_shape.h, gs.h);
    let tx = LinearTaps::new(input_shape.w, gs.w);
    let mut gx = Buffer::zeros(input_shape);
    let gd = gout.data();
    let mut gi = 0;
    for n in 0..gs.n {
        for c in 0..gs.c {
            let base = input_shape.index(n, c, 0, 0);
            let gxd = gx.data_mut();
            for oy in 0..gs.h {
                let fy = T::of(ty.frac[oy]);
                let r0 = base + ty.i0[oy] * input_shape.w;
                let r1 = base + ty.i1[oy] * input_shape.w;
                for ox in 0..gs.w {
                    let g = gd[gi];
                    gi += 1;
                    let fx = T::of(tx.frac[ox]);
                    let (a, b) = (tx.i0[ox], tx.i1[ox]);
                    let one = T::one();
                    gxd[r0 + a] += g * (one - fy) * (one - fx);
                    gxd[r0 + b] += g * (one - fy) * fx;
                    gxd[r1 + a] += g * fy * (one - fx);
                    gxd[r1 + b] += g * fy * fx;
                }
            }
        }
    }
    gx
}

/// Per-pixel softmax over the channel axis, stabilized by the channel max.
pub fn softmax_channels<T: Element>(x: &Buffer<T>) -> Buffer<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Buffer::zeros(s);
    let xd = x.data();
    let od = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut mx = T::neg_infinity();
            for c in 0..s.c {
                mx = mx.max(xd[base + c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (xd[base + c * plane + p] - mx).exp();
                od[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..s.c {
                od[base + c * plane + p] = od[base + c * plane + p] / z;
            }
        }
    }
    out
}
