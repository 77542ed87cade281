//! Batched `N x C x H x W` tensors and the layer kernels the UNet is built
//! from. Every forward kernel has a matching backward kernel.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::gemm::{gemm, MatRef};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(
                "tensor",
                format!("{} values for {n}x{c}x{h}x{w}", n * c * h * w),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Stacks equally shaped images into a batch.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut iter = images.into_iter().peekable();
        let first = iter.peek().ok_or(Error::Empty("image batch"))?;
        let (c, h, w) = (first.channels(), first.height(), first.width());
        let mut data = Vec::new();
        let mut n = 0;
        for img in iter {
            if (img.channels(), img.height(), img.width()) != (c, h, w) {
                return Err(Error::shape(
                    "image batch",
                    format!("{c}x{h}x{w}"),
                    format!("{}x{}x{}", img.channels(), img.height(), img.width()),
                ));
            }
            data.extend_from_slice(img.data());
            n += 1;
        }
        Ok(Self { n, c, h, w, data })
    }

    /// `(n, c, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }
}

/// Convolution geometry. Either stride 1 with "same" padding (`pad = k / 2`)
/// or a non-overlapping patch convolution (`stride = k`, `pad = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, pad: k / 2 }
    }

    pub fn patch(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: k, pad: 0 }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Weight slice for kernel tap `(ky, kx)` viewed as a `cout x cin` matrix.
    fn tap<'w>(&self, w: &'w [f64], ky: usize, kx: usize) -> MatRef<'w> {
        let kk = self.k * self.k;
        MatRef::new(&w[ky * self.k + kx..], self.cin * kk, kk)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Copies input pixels seen by tap `(ky, kx)` into a `cin x (oh*ow)` buffer;
/// out-of-bounds taps read zero.
fn gather(x: &[f64], h: usize, w: usize, g: &ConvGeom, ky: usize, kx: usize, oh: usize, ow: usize, buf: &mut [f64]) {
    for c in 0..g.cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut buf[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            if iy < 0 || iy >= h as isize {
                row.fill(0.0);
                continue;
            }
            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
            for (ox, d) in row.iter_mut().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                *d = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
            }
        }
    }
}

/// Adjoint of [`gather`]: accumulates `buf` back onto the input positions.
fn scatter_add(dx: &mut [f64], h: usize, w: usize, g: &ConvGeom, ky: usize, kx: usize, oh: usize, ow: usize, buf: &[f64]) {
    for c in 0..g.cin {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        let src = &buf[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
            for (ox, &s) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                if ix >= 0 && ix < w as isize {
                    drow[ix as usize] += s;
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Tensor {
    debug_assert_eq!(x.c, g.cin);
    debug_assert_eq!(weight.len(), g.weight_len());
    let (oh, ow) = g.out_size(x.h, x.w);
    let plane = oh * ow;
    let mut out = Tensor::zeros(x.n, g.cout, oh, ow);
    let mut buf = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.cin * plane] };
    for i in 0..x.n {
        let xi = x.sample(i);
        let yi = out.sample_mut(i);
        if g.is_pointwise() {
            gemm(g.cout, g.cin, plane, g.tap(weight, 0, 0), MatRef::new(xi, plane, 1), yi, plane, 1, false);
        } else {
            let mut first = true;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    gather(xi, x.h, x.w, g, ky, kx, oh, ow, &mut buf);
                    gemm(g.cout, g.cin, plane, g.tap(weight, ky, kx), MatRef::new(&buf, plane, 1), yi, plane, 1, !first);
                    first = false;
                }
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                yi[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    g: &ConvGeom,
    dy: &Tensor,
    dweight: &mut [f64],
    mut dbias: Option<&mut [f64]>,
) -> Tensor {
    let (oh, ow) = (dy.h, dy.w);
    let plane = oh * ow;
    let kk = g.k * g.k;
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut buf = vec![0.0; g.cin * plane];
    for i in 0..x.n {
        let xi = x.sample(i);
        let dyi = dy.sample(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyi[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        let dxi = dx.sample_mut(i);
        for ky in 0..g.k {
            for kx in 0..g.k {
                let tap_off = ky * g.k + kx;
                // dW_tap += dY * gathered^T
                let gathered: &[f64] = if g.is_pointwise() {
                    xi
                } else {
                    gather(xi, x.h, x.w, g, ky, kx, oh, ow, &mut buf);
                    &buf
                };
                gemm(
                    g.cout,
                    plane,
                    g.cin,
                    MatRef::new(dyi, plane, 1),
                    MatRef::new(gathered, 1, plane),
                    &mut dweight[tap_off..],
                    g.cin * kk,
                    kk,
                    true,
                );
                // dGathered = W_tap^T * dY
                if g.is_pointwise() {
                    gemm(g.cin, g.cout, plane, MatRef::new(&weight[tap_off..], kk, g.cin * kk), MatRef::new(dyi, plane, 1), dxi, plane, 1, true);
                } else {
                    gemm(g.cin, g.cout, plane, MatRef::new(&weight[tap_off..], kk, g.cin * kk), MatRef::new(dyi, plane, 1), &mut buf, plane, 1, false);
                    scatter_add(dxi, x.h, x.w, g, ky, kx, oh, ow, &buf);
                }
            }
        }
    }
    dx
}

pub(crate) const BN_EPSILON: f64 = 1e-5;

pub(crate) struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn per_channel(t: &Tensor, mut f: impl FnMut(usize, &[f64])) {
    let plane = t.h * t.w;
    for i in 0..t.n {
        for c in 0..t.c {
            let off = (i * t.c + c) * plane;
            f(c, &t.data[off..off + plane]);
        }
    }
}

fn per_channel_mut(t: &mut Tensor, mut f: impl FnMut(usize, &mut [f64])) {
    let plane = t.h * t.w;
    let (n, cs) = (t.n, t.c);
    for i in 0..n {
        for c in 0..cs {
            let off = (i * cs + c) * plane;
            f(c, &mut t.data[off..off + plane]);
        }
    }
}

/// Batch normalization using batch statistics. Returns the output, the
/// backward cache, and the biased batch mean and variance per channel.
pub(crate) fn bn_forward_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache, Vec<f64>, Vec<f64>) {
    let count = (x.n * x.h * x.w) as f64;
    let mut mean = vec![0.0; x.c];
    per_channel(x, |c, p| mean[c] += p.iter().sum::<f64>());
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; x.c];
    per_channel(x, |c, p| var[c] += p.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>());
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPSILON)).collect();

    let mut xhat = x.clone();
    per_channel_mut(&mut xhat, |c, p| p.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]));
    let mut y = xhat.clone();
    per_channel_mut(&mut y, |c, p| p.iter_mut().for_each(|v| *v = gamma[c] * *v + beta[c]));
    (y, BnCache { xhat: xhat.data, inv_std }, mean, var)
}

/// Batch normalization with stored running statistics.
pub(crate) fn bn_forward_eval(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Tensor {
    let mut y = x.clone();
    per_channel_mut(&mut y, |c, p| {
        let scale = gamma[c] / libm::sqrt(var[c] + BN_EPSILON);
        let shift = beta[c] - mean[c] * scale;
        p.iter_mut().for_each(|v| *v = *v * scale + shift);
    });
    y
}

pub(crate) fn bn_backward(dy: &Tensor, cache: &BnCache, gamma: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) -> Tensor {
    let count = (dy.n * dy.h * dy.w) as f64;
    let plane = dy.h * dy.w;
    let mut sum_dy = vec![0.0; dy.c];
    let mut sum_dy_xhat = vec![0.0; dy.c];
    for i in 0..dy.n {
        for c in 0..dy.c {
            let off = (i * dy.c + c) * plane;
            for (d, xh) in dy.data[off..off + plane].iter().zip(&cache.xhat[off..off + plane]) {
                sum_dy[c] += d;
                sum_dy_xhat[c] += d * xh;
            }
        }
    }
    for c in 0..dy.c {
        dgamma[c] += sum_dy_xhat[c];
        dbeta[c] += sum_dy[c];
    }
    let mut dx = dy.clone();
    for i in 0..dy.n {
        for c in 0..dy.c {
            let off = (i * dy.c + c) * plane;
            let k = gamma[c] * cache.inv_std[c] / count;
            for (d, xh) in dx.data[off..off + plane].iter_mut().zip(&cache.xhat[off..off + plane]) {
                *d = k * (count * *d - sum_dy[c] - xh * sum_dy_xhat[c]);
            }
        }
    }
    dx
}

pub(crate) fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the rectifier output was not positive.
pub(crate) fn relu_backward(dy: &mut Tensor, out: &Tensor) {
    dy.data.iter_mut().zip(&out.data).for_each(|(d, &o)| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// 2x2 max-pool; also returns the flat argmax index of each output pixel.
pub(crate) fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = Vec::with_capacity(out.data.len());
    let mut k = 0;
    for nc in 0..x.n * x.c {
        let base = nc * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.data[k] = x.data[best];
                arg.push(best as u32);
                k += 1;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dy: &Tensor, arg: &[u32], input_shape: (usize, usize, usize, usize)) -> Tensor {
    let (n, c, h, w) = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (&d, &a) in dy.data.iter().zip(arg) {
        dx.data[a as usize] += d;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub(crate) fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    dx
}

/// Concatenates along channels.
pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let (la, lb) = (a.sample_len(), b.sample_len());
    for i in 0..a.n {
        let dst = out.sample_mut(i);
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..la + lb].copy_from_slice(b.sample(i));
    }
    out
}

/// Splits a channel concatenation back into its `first` leading channels and the rest.
pub(crate) fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(t.n, first, t.h, t.w);
    let mut b = Tensor::zeros(t.n, t.c - first, t.h, t.w);
    let la = a.sample_len();
    for i in 0..t.n {
        let src = t.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

pub(crate) fn add_inplace(a: &mut Tensor, b: &Tensor) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}
