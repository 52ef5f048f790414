//! Forward and backward kernels for every layer the two architectures use.
//!
//! Kernels are pure functions of their inputs. Convolutions use "same"
//! padding with `ceil(in / stride)` outputs; when the total padding is odd
//! the extra row/column goes to the bottom/right.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::scalar::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Error, Result, Scalar, Shape4, Tensor4};

/// Upper bound on im2col buffer elements before the batch is chunked.
const COL_BUDGET: usize = 1 << 22;
/// Stride-1 convolutions with at most this many output channels skip im2col;
/// packing the column matrix dominates a GEMM with so few rows.
const DIRECT_MAX_CO: usize = 4;

/// Static description of a square "same"-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, stride: usize, has_bias: bool) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!("stride must be 1 or 2, got {stride}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(Self { kernel, in_channels, out_channels, stride, has_bias })
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::of(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }
}

/// Output extent and `(before, after)` padding for one axis under "same" padding.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2, total - total / 2)
}

fn conv_geometry<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, stride: usize) -> Result<ConvGeom> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::Shape(format!("conv weight {ws} must have a square odd kernel")));
    }
    if ws.c != xs.c {
        return Err(Error::Shape(format!("conv expects {} input channels, got {}", ws.c, xs.c)));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArgument(format!("stride must be 1 or 2, got {stride}")));
    }
    let k = ws.h;
    let (ho, pt, _) = same_padding(xs.h, k, stride);
    let (wo, pl, _) = same_padding(xs.w, k, stride);
    Ok(ConvGeom { n: xs.n, ci: xs.c, h: xs.h, w: xs.w, co: ws.n, k, stride, ho, wo, pt, pl })
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn direct(&self) -> bool {
        self.stride == 1 && self.co <= DIRECT_MAX_CO
    }

    /// In-bounds segment of output row `oy` for tap `(ky, kx)` at stride 1:
    /// `(iy, ox0, ix0, len)`.
    #[inline]
    fn segment(&self, oy: usize, ky: usize, kx: usize) -> Option<(usize, usize, usize, usize)> {
        let iy = Self::src(oy, ky, 1, self.pt, self.h)?;
        let lo = self.pl.saturating_sub(kx);
        let hi = (self.w + self.pl).saturating_sub(kx).min(self.wo);
        (hi > lo).then(|| (iy, lo, lo + kx - self.pl, hi - lo))
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.out_plane()).max(1)).clamp(1, self.n)
    }

    /// Input coordinate for output index `o` and tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = o * stride + t;
        if p < pad || p - pad >= extent {
            None
        } else {
            Some(p - pad)
        }
    }

    /// Fills `col` (`ckk x cols`) for samples `s0..s1`.
    fn im2col<T: Scalar>(&self, x: &[T], s0: usize, s1: usize, col: &mut [T]) {
        let cols = (s1 - s0) * self.out_plane();
        let plane = self.h * self.w;
        for ci in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &mut col[r * cols..(r + 1) * cols];
                    for s in s0..s1 {
                        let base = (s * self.ci + ci) * plane;
                        let dst = &mut row[(s - s0) * self.out_plane()..(s - s0 + 1) * self.out_plane()];
                        for oy in 0..self.ho {
                            let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                            match Self::src(oy, ky, self.stride, self.pt, self.h) {
                                None => d.fill(T::zero()),
                                Some(iy) => {
                                    let src_row = &x[base + iy * self.w..base + (iy + 1) * self.w];
                                    for (ox, v) in d.iter_mut().enumerate() {
                                        *v = match Self::src(ox, kx, self.stride, self.pl, self.w) {
                                            Some(ix) => src_row[ix],
                                            None => T::zero(),
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `dx` (adjoint of [`Self::im2col`]).
    fn col2im<T: Scalar>(&self, col: &[T], s0: usize, s1: usize, dx: &mut [T]) {
        let cols = (s1 - s0) * self.out_plane();
        let plane = self.h * self.w;
        for ci in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let row = &col[r * cols..(r + 1) * cols];
                    for s in s0..s1 {
                        let base = (s * self.ci + ci) * plane;
                        let src = &row[(s - s0) * self.out_plane()..(s - s0 + 1) * self.out_plane()];
                        for oy in 0..self.ho {
                            let Some(iy) = Self::src(oy, ky, self.stride, self.pt, self.h) else { continue };
                            let drow = &mut dx[base + iy * self.w..base + (iy + 1) * self.w];
                            for ox in 0..self.wo {
                                if let Some(ix) = Self::src(ox, kx, self.stride, self.pl, self.w) {
                                    drow[ix] += src[oy * self.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// "Same"-padded 2-D convolution. `w` is `(C_o, C_i, K, K)`, `bias` is `(1, C_o, 1, 1)`.
///
/// Adds the multiply–accumulates executed (padding taps included) to `macs`.
pub fn conv2d<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: usize,
    macs: &mut u64,
) -> Result<Tensor4<T>> {
    let g = conv_geometry(x, w, stride)?;
    if let Some(b) = bias {
        if b.shape().sample_len() != g.co {
            return Err(Error::Shape(format!("bias {} does not match {} output channels", b.shape(), g.co)));
        }
    }
    let mut out = Tensor4::zeros(Shape4::of(g.n, g.co, g.ho, g.wo));
    if g.direct() {
        direct_forward(&g, x.data(), w.data(), bias.map(|b| b.data()), out.data_mut(), macs);
        return Ok(out);
    }
    let ckk = g.ckk();
    let op = g.out_plane();
    let chunk = g.chunk();
    let mut col = vec![T::zero(); ckk * chunk * op];
    let mut buf = vec![T::zero(); g.co * chunk * op];
    let mut s0 = 0;
    while s0 < g.n {
        let s1 = (s0 + chunk).min(g.n);
        let cols = (s1 - s0) * op;
        g.im2col(x.data(), s0, s1, &mut col);
        gemm_nn(g.co, ckk, cols, w.data(), &col, T::zero(), &mut buf);
        *macs += (g.co * ckk * cols) as u64;
        let o = out.data_mut();
        for s in s0..s1 {
            for co in 0..g.co {
                let b = bias.map_or(T::zero(), |b| b.data()[co]);
                let src = &buf[co * cols + (s - s0) * op..co * cols + (s - s0 + 1) * op];
                let dst = &mut o[(s * g.co + co) * op..(s * g.co + co + 1) * op];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        s0 = s1;
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    stride: usize,
    dy: &Tensor4<T>,
    has_bias: bool,
) -> Result<(Tensor4<T>, Tensor4<T>, Option<Tensor4<T>>)> {
    let g = conv_geometry(x, w, stride)?;
    if dy.shape() != Shape4::of(g.n, g.co, g.ho, g.wo) {
        return Err(Error::Shape(format!("conv output gradient has shape {}", dy.shape())));
    }
    let op = g.out_plane();
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    if g.direct() {
        direct_backward(&g, x.data(), w.data(), dy.data(), dx.data_mut(), dw.data_mut());
    } else {
        gemm_backward(&g, x, w, dy, &mut dx, &mut dw);
    }
    let db = has_bias.then(|| {
        let mut db = Tensor4::zeros(Shape4::of(1, g.co, 1, 1));
        for s in 0..g.n {
            for co in 0..g.co {
                let plane = &dy.data()[(s * g.co + co) * op..(s * g.co + co + 1) * op];
                db.data_mut()[co] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok((dx, dw, db))
}

fn gemm_backward<T: Scalar>(g: &ConvGeom, x: &Tensor4<T>, w: &Tensor4<T>, dy: &Tensor4<T>, dx: &mut Tensor4<T>, dw: &mut Tensor4<T>) {
    let ckk = g.ckk();
    let op = g.out_plane();
    let chunk = g.chunk();
    let mut col = vec![T::zero(); ckk * chunk * op];
    let mut dcol = vec![T::zero(); ckk * chunk * op];
    let mut dymat = vec![T::zero(); g.co * chunk * op];
    let mut s0 = 0;
    while s0 < g.n {
        let s1 = (s0 + chunk).min(g.n);
        let cols = (s1 - s0) * op;
        g.im2col(x.data(), s0, s1, &mut col);
        for s in s0..s1 {
            for co in 0..g.co {
                let src = &dy.data()[(s * g.co + co) * op..(s * g.co + co + 1) * op];
                dymat[co * cols + (s - s0) * op..co * cols + (s - s0 + 1) * op].copy_from_slice(src);
            }
        }
        let beta = if s0 == 0 { T::zero() } else { T::one() };
        gemm_nt(g.co, cols, ckk, &dymat, &col, beta, dw.data_mut());
        gemm_tn(ckk, g.co, cols, w.data(), &dymat, T::zero(), &mut dcol);
        g.col2im(&dcol, s0, s1, dx.data_mut());
        s0 = s1;
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

/// Dot product with eight independent accumulators.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&p, &q)| p * q).sum();
    for (p, q) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += p[l] * q[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn direct_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T], macs: &mut u64) {
    let (op, plane, kk) = (g.out_plane(), g.h * g.w, g.k * g.k);
    for s in 0..g.n {
        for co in 0..g.co {
            let o = &mut out[(s * g.co + co) * op..(s * g.co + co + 1) * op];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.ci {
                let xin = &x[(s * g.ci + ci) * plane..(s * g.ci + ci + 1) * plane];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[(co * g.ci + ci) * kk + ky * g.k + kx];
                        // every output position costs one MAC per tap, padded or not
                        *macs += op as u64;
                        for oy in 0..g.ho {
                            if let Some((iy, ox0, ix0, len)) = g.segment(oy, ky, kx) {
                                let dst = &mut o[oy * g.wo + ox0..oy * g.wo + ox0 + len];
                                axpy(wv, &xin[iy * g.w + ix0..iy * g.w + ix0 + len], dst);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], dx: &mut [T], dw: &mut [T]) {
    let (op, plane, kk) = (g.out_plane(), g.h * g.w, g.k * g.k);
    for s in 0..g.n {
        for ci in 0..g.ci {
            let xin = &x[(s * g.ci + ci) * plane..(s * g.ci + ci + 1) * plane];
            for co in 0..g.co {
                let dyp = &dy[(s * g.co + co) * op..(s * g.co + co + 1) * op];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wi = (co * g.ci + ci) * kk + ky * g.k + kx;
                        let wv = w[wi];
                        let mut acc = T::zero();
                        for oy in 0..g.ho {
                            if let Some((iy, ox0, ix0, len)) = g.segment(oy, ky, kx) {
                                let d = &dyp[oy * g.wo + ox0..oy * g.wo + ox0 + len];
                                let xi = iy * g.w + ix0;
                                acc += dot(d, &xin[xi..xi + len]);
                                let base = (s * g.ci + ci) * plane + xi;
                                axpy(wv, d, &mut dx[base..base + len]);
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

fn depthwise_geometry<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, stride: usize) -> Result<ConvGeom> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::Shape(format!("depthwise weight {ws} does not match {} channels", xs.c)));
    }
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::Shape(format!("depthwise weight {ws} must have a square odd kernel")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArgument(format!("stride must be 1 or 2, got {stride}")));
    }
    let k = ws.h;
    let (ho, pt, _) = same_padding(xs.h, k, stride);
    let (wo, pl, _) = same_padding(xs.w, k, stride);
    Ok(ConvGeom { n: xs.n, ci: xs.c, h: xs.h, w: xs.w, co: xs.c, k, stride, ho, wo, pt, pl })
}

/// Copies one plane into a zero-padded buffer of `(hp, wp)`.
fn pad_plane<T: Scalar>(src: &[T], g: &ConvGeom, hp: usize, wp: usize, dst: &mut [T]) {
    dst[..hp * wp].fill(T::zero());
    for y in 0..g.h {
        let d = (y + g.pt) * wp + g.pl;
        dst[d..d + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
    }
}

fn padded_extents(g: &ConvGeom) -> (usize, usize) {
    ((g.ho - 1) * g.stride + g.k, (g.wo - 1) * g.stride + g.k)
}

/// Per-channel convolution; `w` is `(C, 1, K, K)`. Output channel `c` reads only input channel `c`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, stride: usize, macs: &mut u64) -> Result<Tensor4<T>> {
    let g = depthwise_geometry(x, w, stride)?;
    let (hp, wp) = padded_extents(&g);
    let mut padded = vec![T::zero(); hp.max(g.h + g.pt) * wp.max(g.w + g.pl)];
    let wp = wp.max(g.w + g.pl);
    let hp = hp.max(g.h + g.pt);
    let mut out = Tensor4::zeros(Shape4::of(g.n, g.ci, g.ho, g.wo));
    let plane = g.h * g.w;
    let op = g.out_plane();
    let kk = g.k * g.k;
    for s in 0..g.n {
        for c in 0..g.ci {
            pad_plane(&x.data()[(s * g.ci + c) * plane..(s * g.ci + c + 1) * plane], &g, hp, wp, &mut padded);
            let kern = &w.data()[c * kk..(c + 1) * kk];
            let dst = &mut out.data_mut()[(s * g.ci + c) * op..(s * g.ci + c + 1) * op];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..g.k {
                        let row = &padded[(oy * g.stride + ky) * wp + ox * g.stride..];
                        for kx in 0..g.k {
                            acc += kern[ky * g.k + kx] * row[kx];
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
            *macs += (op * kk) as u64;
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`]: `(dx, dw)`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    stride: usize,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let g = depthwise_geometry(x, w, stride)?;
    if dy.shape() != Shape4::of(g.n, g.ci, g.ho, g.wo) {
        return Err(Error::Shape(format!("depthwise output gradient has shape {}", dy.shape())));
    }
    let (hp, wp) = padded_extents(&g);
    let wp = wp.max(g.w + g.pl);
    let hp = hp.max(g.h + g.pt);
    let mut padded = vec![T::zero(); hp * wp];
    let mut dpadded = vec![T::zero(); hp * wp];
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    let plane = g.h * g.w;
    let op = g.out_plane();
    let kk = g.k * g.k;
    for s in 0..g.n {
        for c in 0..g.ci {
            pad_plane(&x.data()[(s * g.ci + c) * plane..(s * g.ci + c + 1) * plane], &g, hp, wp, &mut padded);
            dpadded.fill(T::zero());
            let kern = &w.data()[c * kk..(c + 1) * kk];
            let g_out = &dy.data()[(s * g.ci + c) * op..(s * g.ci + c + 1) * op];
            let dk = &mut dw.data_mut()[c * kk..(c + 1) * kk];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = g_out[oy * g.wo + ox];
                    for ky in 0..g.k {
                        let base = (oy * g.stride + ky) * wp + ox * g.stride;
                        for kx in 0..g.k {
                            dk[ky * g.k + kx] += d * padded[base + kx];
                            dpadded[base + kx] += d * kern[ky * g.k + kx];
                        }
                    }
                }
            }
            let dst = &mut dx.data_mut()[(s * g.ci + c) * plane..(s * g.ci + c + 1) * plane];
            for y in 0..g.h {
                let src = (y + g.pt) * wp + g.pl;
                dst[y * g.w..(y + 1) * g.w].copy_from_slice(&dpadded[src..src + g.w]);
            }
        }
    }
    Ok((dx, dw))
}

/// Non-overlapping 2x2 mean pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::Shape(format!("avg_pool2 needs even spatial extents, got {s}")));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor4::zeros(Shape4::of(s.n, s.c, ho, wo));
    let xd = x.data();
    for (p, dst) in out.data_mut().chunks_exact_mut(ho * wo).enumerate() {
        let src = &xd[p * s.h * s.w..(p + 1) * s.h * s.w];
        for oy in 0..ho {
            for ox in 0..wo {
                let a = src[2 * oy * s.w + 2 * ox];
                let b = src[2 * oy * s.w + 2 * ox + 1];
                let c = src[(2 * oy + 1) * s.w + 2 * ox];
                let d = src[(2 * oy + 1) * s.w + 2 * ox + 1];
                dst[oy * wo + ox] = (a + b + c + d) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Scalar>(input_shape: Shape4, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = input_shape;
    let (ho, wo) = (s.h / 2, s.w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = Tensor4::zeros(s);
    for (p, g) in dy.data().chunks_exact(ho * wo).enumerate() {
        let dst = &mut dx.data_mut()[p * s.h * s.w..(p + 1) * s.h * s.w];
        for y in 0..s.h {
            for x in 0..s.w {
                dst[y * s.w + x] = g[(y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for 2x half-pixel bilinear resampling of one axis.
fn upsample_taps<T: Scalar>(extent: usize) -> Vec<(usize, usize, T)> {
    (0..2 * extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, T::from_f64_lossy(src - i0 as f64))
        })
        .collect()
}

/// Doubles height and width by bilinear interpolation with half-pixel centres
/// and edge clamping. Interpolation is evaluated as `a + f * (b - a)`, so
/// constant inputs map to the same constant exactly.
pub fn bilinear_upsample2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let ty = upsample_taps::<T>(s.h);
    let tx = upsample_taps::<T>(s.w);
    let mut out = Tensor4::zeros(Shape4::of(s.n, s.c, ho, wo));
    for (p, dst) in out.data_mut().chunks_exact_mut(ho * wo).enumerate() {
        let src = &x.data()[p * s.h * s.w..(p + 1) * s.h * s.w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let a = src[y0 * s.w + x0];
                let b = src[y0 * s.w + x1];
                let c = src[y1 * s.w + x0];
                let d = src[y1 * s.w + x1];
                let top = a + fx * (b - a);
                let bottom = c + fx * (d - c);
                dst[oy * wo + ox] = top + fy * (bottom - top);
            }
        }
    }
    out
}

pub fn bilinear_upsample2_backward<T: Scalar>(input_shape: Shape4, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = input_shape;
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let ty = upsample_taps::<T>(s.h);
    let tx = upsample_taps::<T>(s.w);
    let mut dx = Tensor4::zeros(s);
    for (p, g) in dy.data().chunks_exact(ho * wo).enumerate() {
        let dst = &mut dx.data_mut()[p * s.h * s.w..(p + 1) * s.h * s.w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let d = g[oy * wo + ox];
                let dtop = d * (T::one() - fy);
                let dbot = d * fy;
                dst[y0 * s.w + x0] += dtop * (T::one() - fx);
                dst[y0 * s.w + x1] += dtop * fx;
                dst[y1 * s.w + x0] += dbot * (T::one() - fx);
                dst[y1 * s.w + x1] += dbot * fx;
            }
        }
    }
    dx
}

/// Batch-norm operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; gradients flow through mean and variance.
    Train,
    /// Running statistics; a frozen per-channel affine map.
    Infer,
}

/// Values a batch-norm forward pass leaves behind for its backward rule.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
    /// Batch mean and biased variance (training mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Per-channel batch normalization. `gamma`/`beta`/`running_*` hold one value per channel.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    mode: Mode,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let s = x.shape();
    for (name, len) in [("gamma", gamma.len()), ("beta", beta.len()), ("running mean", running_mean.len()), ("running var", running_var.len())] {
        if len != s.c {
            return Err(Error::Shape(format!("batch-norm {name} has {len} entries for {} channels", s.c)));
        }
    }
    let plane = s.plane();
    let count = s.n * plane;
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Degenerate(format!(
                    "training-mode batch norm needs batch*h*w >= 2 per channel, got {count}"
                )));
            }
            channel_moments(x)
        }
        Mode::Infer => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for i in o..o + plane {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }
    let (batch_mean, batch_var) = match mode {
        Mode::Train => (mean, var),
        Mode::Infer => (Vec::new(), Vec::new()),
    };
    Ok((y, BnCache { xhat, inv_std, mode, batch_mean, batch_var }))
}

/// Per-channel mean and biased variance, accumulated in `f64`.
fn channel_moments<T: Scalar>(x: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut mean = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, m) in mean.iter_mut().enumerate() {
            let o = (n * s.c + c) * plane;
            *m += x.data()[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, v) in var.iter_mut().enumerate() {
            let o = (n * s.c + c) * plane;
            *v += x.data()[o..o + plane].iter().map(|&e| { let d = e.as_f64() - mean[c]; d * d }).sum::<f64>();
        }
    }
    (
        mean.into_iter().map(T::from_f64_lossy).collect(),
        var.into_iter().map(|v| T::from_f64_lossy(v / count)).collect(),
    )
}

/// Gradients of [`batch_norm`]: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(dy: &Tensor4<T>, gamma: &[T], cache: &BnCache<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = dy.shape();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            for i in o..o + plane {
                let g = dy.data()[i].as_f64();
                dbeta[c] += g;
                dgamma[c] += g * cache.xhat.data()[i].as_f64();
            }
        }
    }
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * plane;
            let k = gamma[c] * cache.inv_std[c];
            match cache.mode {
                Mode::Infer => {
                    for i in o..o + plane {
                        dx.data_mut()[i] = dy.data()[i] * k;
                    }
                }
                Mode::Train => {
                    // dx = gamma*inv_std * (dy - mean(dy) - xhat * mean(dy*xhat))
                    let mean_dy = T::from_f64_lossy(dbeta[c] / count);
                    let mean_dyx = T::from_f64_lossy(dgamma[c] / count);
                    for i in o..o + plane {
                        dx.data_mut()[i] = k * (dy.data()[i] - mean_dy - cache.xhat.data()[i] * mean_dyx);
                    }
                }
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64_lossy).collect(),
        dbeta.into_iter().map(T::from_f64_lossy).collect(),
    )
}

/// Standalone batch-norm state for use outside a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize, momentum: T, eps: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
        }
    }

    /// Runs the layer; in training mode the running statistics move toward the batch statistics.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, BnCache<T>)> {
        let out = batch_norm(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, self.eps, mode)?;
        if mode == Mode::Train {
            update_running(&mut self.running_mean, &out.1.batch_mean, self.momentum);
            update_running(&mut self.running_var, &out.1.batch_var, self.momentum);
        }
        Ok(out)
    }
}

/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[T], momentum: T) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (T::one() - momentum) * b;
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor4<T>, alpha: T) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { alpha * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor4<T>, dy: &Tensor4<T>, alpha: T) -> Tensor4<T> {
    let data = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > T::zero() { g } else { alpha * g }).collect();
    Tensor4::from_vec(x.shape(), data).expect("same shape")
}

/// Logistic function, clamped so every output lies strictly inside `(0, 1)`.
pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let hi = T::one() - T::epsilon() / (T::one() + T::one());
    let lo = T::min_positive_value();
    x.map(|v| {
        let y = if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        y.max(lo).min(hi)
    })
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let data = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (T::one() - s)).collect();
    Tensor4::from_vec(y.shape(), data).expect("same shape")
}

/// Fully connected layer over the flattened `c*h*w` sample. `w` is `(C_o, C_i, 1, 1)`.
pub fn dense<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, bias: Option<&Tensor4<T>>, macs: &mut u64) -> Result<Tensor4<T>> {
    let s = x.shape();
    let ci = s.sample_len();
    let ws = w.shape();
    if ws.sample_len() != ci {
        return Err(Error::Shape(format!("dense weight {ws} expects {} inputs, got {ci}", ws.sample_len())));
    }
    let co = ws.n;
    let mut y = Tensor4::zeros(Shape4::of(s.n, co, 1, 1));
    gemm_nt(s.n, ci, co, x.data(), w.data(), T::zero(), y.data_mut());
    if let Some(b) = bias {
        if b.shape().sample_len() != co {
            return Err(Error::Shape(format!("dense bias {} does not match {co} outputs", b.shape())));
        }
        for row in y.data_mut().chunks_exact_mut(co) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
        }
    }
    *macs += (s.n * ci * co) as u64;
    Ok(y)
}

/// Gradients of [`dense`]: `(dx, dw, dbias)`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    has_bias: bool,
) -> (Tensor4<T>, Tensor4<T>, Option<Tensor4<T>>) {
    let n = x.shape().n;
    let ci = x.shape().sample_len();
    let co = w.shape().n;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    gemm_tn(co, n, ci, dy.data(), x.data(), T::zero(), dw.data_mut());
    gemm_nn(n, co, ci, dy.data(), w.data(), T::zero(), dx.data_mut());
    let db = has_bias.then(|| {
        let mut db = Tensor4::zeros(Shape4::of(1, co, 1, 1));
        for row in dy.data().chunks_exact(co) {
            db.data_mut().iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        db
    });
    (dx, dw, db)
}

/// Joins along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::Shape(format!("cannot concatenate {sa} and {sb}")));
    }
    let (la, lb) = (sa.sample_len(), sb.sample_len());
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor4::from_vec(sa.with_c(sa.c + sb.c), data)
}

/// Channels `[start, end)`.
pub fn channel_slice<T: Scalar>(x: &Tensor4<T>, start: usize, end: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if start >= end || end > s.c {
        return Err(Error::InvalidArgument(format!("channel range {start}..{end} invalid for {s}")));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * (end - start) * plane);
    for n in 0..s.n {
        data.extend_from_slice(&x.data()[(n * s.c + start) * plane..(n * s.c + end) * plane]);
    }
    Tensor4::from_vec(s.with_c(end - start), data)
}

/// Splits into channels `[0, at)` and `[at, c)`.
pub fn channel_split<T: Scalar>(x: &Tensor4<T>, at: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let c = x.shape().c;
    if at == 0 || at >= c {
        return Err(Error::InvalidArgument(format!("split index {at} must lie in 1..{c}")));
    }
    Ok((channel_slice(x, 0, at)?, channel_slice(x, at, c)?))
}

/// Scatters a channel-slice gradient back into a zero tensor of the input shape.
pub fn channel_slice_backward<T: Scalar>(input_shape: Shape4, start: usize, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = input_shape;
    let plane = s.plane();
    let width = dy.shape().c;
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        let src = &dy.data()[n * width * plane..(n + 1) * width * plane];
        dx.data_mut()[(n * s.c + start) * plane..(n * s.c + start + width) * plane].copy_from_slice(src);
    }
    dx
}

/// Source channel for output channel `j * groups + k` is `k * (C / groups) + j`.
pub fn shuffle_source(channels: usize, groups: usize, out_channel: usize) -> usize {
    let per = channels / groups;
    let (j, k) = (out_channel / groups, out_channel % groups);
    k * per + j
}

fn permute_channels<T: Scalar>(x: &Tensor4<T>, src_of: impl Fn(usize) -> usize) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for oc in 0..s.c {
            let ic = src_of(oc);
            let src = &x.data()[(n * s.c + ic) * plane..(n * s.c + ic + 1) * plane];
            out.data_mut()[(n * s.c + oc) * plane..(n * s.c + oc + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Group-transpose channel permutation (reshape `(g, C/g)`, transpose, flatten).
pub fn channel_shuffle<T: Scalar>(x: &Tensor4<T>, groups: usize) -> Result<Tensor4<T>> {
    let c = x.shape().c;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels are not divisible into {groups} shuffle groups")));
    }
    Ok(permute_channels(x, |oc| shuffle_source(c, groups, oc)))
}

/// Inverse permutation of [`channel_shuffle`].
pub fn channel_shuffle_backward<T: Scalar>(dy: &Tensor4<T>, groups: usize) -> Tensor4<T> {
    let c = dy.shape().c;
    let mut inverse = vec![0; c];
    for oc in 0..c {
        inverse[shuffle_source(c, groups, oc)] = oc;
    }
    permute_channels(dy, |ic| inverse[ic])
}

/// Weight initializers.
pub mod init {
    use super::*;

    /// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn he_uniform<T: Scalar, R: Rng>(shape: Shape4, fan_in: usize, rng: &mut R) -> Tensor4<T> {
        uniform(shape, libm::sqrt(6.0 / fan_in as f64), rng)
    }

    /// Glorot-uniform: `U(-sqrt(6 / (fan_in + fan_out)), ...)`.
    pub fn glorot_uniform<T: Scalar, R: Rng>(shape: Shape4, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor4<T> {
        uniform(shape, libm::sqrt(6.0 / (fan_in + fan_out) as f64), rng)
    }

    fn uniform<T: Scalar, R: Rng>(shape: Shape4, limit: f64, rng: &mut R) -> Tensor4<T> {
        let data = (0..shape.numel()).map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit))).collect();
        Tensor4::from_vec(shape, data).expect("valid shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::of(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    /// Direct nested-loop convolution that skips out-of-image taps.
    fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize) -> Tensor4<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let (ho, pt, _) = same_padding(xs.h, k, stride);
        let (wo, pl, _) = same_padding(xs.w, k, stride);
        let mut out = Tensor4::zeros(Shape4::of(xs.n, ws.n, ho, wo));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..xs.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pt as isize;
                                    let ix = (ox * stride + kx) as isize - pl as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.get(co, ci, ky, kx) * x.get(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..shape.numel())
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn same_padding_geometry() {
        assert_eq!(same_padding(32, 3, 1), (32, 1, 1));
        assert_eq!(same_padding(4, 3, 2), (2, 0, 1));
        assert_eq!(same_padding(32, 3, 2), (16, 0, 1));
        assert_eq!(same_padding(5, 3, 2), (3, 1, 1));
        assert_eq!(same_padding(7, 1, 1), (7, 0, 0));
    }

    #[test]
    fn conv_single_pixel_sees_only_centre_tap() {
        let x = t((1, 1, 1, 1), vec![2.5]);
        let w = Tensor4::new(Shape4::of(1, 1, 3, 3), 1.0).unwrap();
        let mut macs = 0;
        assert_eq!(conv2d(&x, &w, None, 1, &mut macs).unwrap().data(), &[2.5]);
        assert_eq!(macs, 9);
    }

    #[test]
    fn conv_ones_counts_overlaps() {
        let x = Tensor4::new(Shape4::of(1, 1, 3, 3), 1.0f64).unwrap();
        let w = Tensor4::new(Shape4::of(1, 1, 3, 3), 1.0).unwrap();
        let y = conv2d(&x, &w, None, 1, &mut 0).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let x = pseudo(Shape4::of(2, 3, 5, 4), 1);
        let w = Tensor4::zeros(Shape4::of(4, 3, 3, 3));
        assert!(conv2d(&x, &w, None, 2, &mut 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (stride, k, h, w) in [(1, 3, 6, 5), (2, 3, 7, 6), (1, 1, 4, 4), (2, 5, 9, 8), (2, 1, 5, 5)] {
            let x = pseudo(Shape4::of(3, 2, h, w), 7);
            let wt = pseudo(Shape4::of(4, 2, k, k), 9);
            let got = conv2d(&x, &wt, None, stride, &mut 0).unwrap();
            let want = naive_conv(&x, &wt, stride);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn narrow_direct_path_matches_gemm_path() {
        // 2 output channels take the direct kernel; padding them to 8 with zero
        // filters forces the im2col GEMM path on the same arithmetic
        let x = pseudo(Shape4::of(2, 3, 6, 5), 11);
        let narrow = pseudo(Shape4::of(2, 3, 3, 3), 12);
        let mut wide = Tensor4::zeros(Shape4::of(8, 3, 3, 3));
        wide.data_mut()[..narrow.data().len()].copy_from_slice(narrow.data());
        let (mut m1, mut m2) = (0, 0);
        let a = conv2d(&x, &narrow, None, 1, &mut m1).unwrap();
        let b = conv2d(&x, &wide, None, 1, &mut m2).unwrap();
        assert_eq!(m1 * 4, m2);
        let b2 = channel_slice(&b, 0, 2).unwrap();
        for (p, q) in a.data().iter().zip(b2.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let dy = pseudo(a.shape(), 13);
        let mut dy_wide = Tensor4::zeros(b.shape());
        for s in 0..2 {
            let n = dy.shape().sample_len();
            dy_wide.data_mut()[s * 4 * n..s * 4 * n + n].copy_from_slice(dy.sample(s));
        }
        let (dxa, dwa, _) = conv2d_backward(&x, &narrow, 1, &dy, false).unwrap();
        let (dxb, dwb, _) = conv2d_backward(&x, &wide, 1, &dy_wide, false).unwrap();
        for (p, q) in dxa.data().iter().zip(dxb.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for (p, q) in dwa.data().iter().zip(dwb.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = pseudo(Shape4::of(1, 3, 4, 4), 1);
        let w = pseudo(Shape4::of(2, 2, 3, 3), 1);
        assert!(matches!(conv2d(&x, &w, None, 1, &mut 0), Err(Error::Shape(_))));
        let even = pseudo(Shape4::of(2, 3, 2, 2), 1);
        assert!(conv2d(&x, &even, None, 1, &mut 0).is_err());
    }

    #[test]
    fn depthwise_centre_delta_samples_odd_positions() {
        let x = t((1, 1, 4, 4), (0..16).map(f64::from).collect());
        let mut w = Tensor4::zeros(Shape4::of(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let y = depthwise_conv2d(&x, &w, 2, &mut 0).unwrap();
        assert_eq!(y.shape(), Shape4::of(1, 1, 2, 2));
        // pad_top = 0, so output (i, j) reads input (2i + 1, 2j + 1).
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn depthwise_averaging_kernel_keeps_interior_constant() {
        let x = Tensor4::new(Shape4::of(1, 2, 8, 8), 3.0f64).unwrap();
        let w = Tensor4::new(Shape4::of(2, 1, 3, 3), 1.0 / 9.0).unwrap();
        let y = depthwise_conv2d(&x, &w, 1, &mut 0).unwrap();
        for c in 0..2 {
            for i in 1..7 {
                for j in 1..7 {
                    assert!((y.get(0, c, i, j) - 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_never_mixes_channels() {
        let x = pseudo(Shape4::of(1, 2, 6, 6), 3);
        let w = pseudo(Shape4::of(2, 1, 3, 3), 4);
        let base = depthwise_conv2d(&x, &w, 2, &mut 0).unwrap();
        let mut bumped = x.clone();
        for i in 0..36 {
            bumped.data_mut()[i] += 10.0;
        }
        let moved = depthwise_conv2d(&bumped, &w, 2, &mut 0).unwrap();
        assert_eq!(channel_slice(&base, 1, 2).unwrap(), channel_slice(&moved, 1, 2).unwrap());
        assert_ne!(channel_slice(&base, 0, 1).unwrap(), channel_slice(&moved, 0, 1).unwrap());
    }

    #[test]
    fn depthwise_matches_naive_per_channel() {
        let x = pseudo(Shape4::of(2, 3, 7, 6), 11);
        let w = pseudo(Shape4::of(3, 1, 3, 3), 12);
        let y = depthwise_conv2d(&x, &w, 2, &mut 0).unwrap();
        for c in 0..3 {
            let xc = channel_slice(&x, c, c + 1).unwrap();
            let wc = channel_slice(&w.clone().reshape(Shape4::of(1, 3, 3, 3)).unwrap(), c, c + 1).unwrap();
            let want = naive_conv(&xc, &wc, 2);
            let got = channel_slice(&y, c, c + 1).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avg_pool_cases() {
        let x = t((1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor4::new(Shape4::of(2, 3, 4, 6), -1.5f64).unwrap();
        assert!(avg_pool2(&c).unwrap().data().iter().all(|&v| v == -1.5));
        let r = pseudo(Shape4::of(2, 3, 4, 6), 5);
        assert!((avg_pool2(&r).unwrap().mean() - r.mean()).abs() < 1e-12);
        assert!(matches!(avg_pool2(&pseudo(Shape4::of(1, 1, 3, 2), 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_cases() {
        let one = t((1, 1, 1, 1), vec![1.25]);
        assert_eq!(bilinear_upsample2(&one).data(), &[1.25; 4]);
        let row = t((1, 1, 1, 2), vec![0.0, 2.0]);
        let up = bilinear_upsample2(&row);
        assert_eq!(up.shape(), Shape4::of(1, 1, 2, 4));
        assert_eq!(&up.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(&up.data()[4..], &[0.0, 0.5, 1.5, 2.0]);
        let c = Tensor4::new(Shape4::of(1, 2, 3, 5), 0.1f32).unwrap();
        assert!(bilinear_upsample2(&c).data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn batch_norm_cases() {
        let x = t((1, 1, 1, 2), vec![1.0, 3.0]);
        let (y, _) = batch_norm(&x, &[1.0], &[0.0], &[0.0], &[1.0], 1e-12, Mode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        let c = Tensor4::new(Shape4::of(2, 1, 2, 2), 4.0f64).unwrap();
        let (y, _) = batch_norm(&c, &[2.0], &[0.7], &[0.0], &[1.0], 1e-3, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let r = pseudo(Shape4::of(2, 1, 3, 3), 2);
        let (y, _) = batch_norm(&r, &[1.0], &[0.0], &[0.0], &[1.0], 1e-3, Mode::Infer).unwrap();
        let k = 1.0 / (1.0f64 + 1e-3).sqrt();
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }

        let single = t((1, 1, 1, 1), vec![1.0]);
        assert!(matches!(
            batch_norm(&single, &[1.0], &[0.0], &[0.0], &[1.0], 1e-3, Mode::Train),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bn_state_tracks_running_statistics() {
        let mut bn = BnState::new(1, 0.5, 1e-3);
        let x = t((1, 1, 1, 2), vec![1.0, 3.0]);
        bn.forward(&x, Mode::Train).unwrap();
        assert_eq!(bn.running_mean, vec![1.0]);
        assert_eq!(bn.running_var, vec![1.0]);
        bn.forward(&x, Mode::Infer).unwrap();
        assert_eq!(bn.running_mean, vec![1.0]);
    }

    #[test]
    fn activation_cases() {
        let x = t((1, 1, 1, 3), vec![-1.0, 2.0, 0.0]);
        assert_eq!(leaky_relu(&x, 0.3).data(), &[-0.3, 2.0, 0.0]);
        assert_eq!(sigmoid(&t((1, 1, 1, 1), vec![0.0])).data(), &[0.5]);
        let extreme = Tensor4::from_vec(Shape4::of(1, 1, 1, 4), vec![-1e4f32, -100.0, 100.0, 1e4]).unwrap();
        assert!(sigmoid(&extreme).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dense_cases() {
        let x = t((1, 2, 1, 1), vec![1.0, 2.0]);
        let eye = t((2, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0]);
        let zero_b = t((1, 2, 1, 1), vec![0.0, 0.0]);
        assert_eq!(dense(&x, &eye, Some(&zero_b), &mut 0).unwrap().data(), &[1.0, 2.0]);
        let b = t((1, 2, 1, 1), vec![0.5, -0.5]);
        assert_eq!(dense(&x, &Tensor4::zeros(eye.shape()), Some(&b), &mut 0).unwrap().data(), &[0.5, -0.5]);
        let row = t((1, 2, 1, 1), vec![1.0, 1.0]);
        assert_eq!(dense(&x, &row, Some(&t((1, 1, 1, 1), vec![0.0])), &mut 0).unwrap().data(), &[3.0]);
        assert!(dense(&x, &t((1, 3, 1, 1), vec![1.0; 3]), None, &mut 0).is_err());
    }

    #[test]
    fn concat_split_and_shuffle() {
        let a = pseudo(Shape4::of(1, 2, 4, 4), 1);
        let b = pseudo(Shape4::of(1, 2, 4, 4), 2);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), Shape4::of(1, 4, 4, 4));
        let (a2, b2) = channel_split(&cat, 2).unwrap();
        assert_eq!((a2, b2), (a.clone(), b.clone()));
        let z = concat_channels(&a, &Tensor4::zeros(a.shape())).unwrap();
        assert_eq!(channel_slice(&z, 0, 2).unwrap(), a);
        assert!(concat_channels(&a, &pseudo(Shape4::of(1, 2, 4, 2), 1)).is_err());

        let (p, q) = channel_split(&pseudo(Shape4::of(1, 2, 2, 2), 3), 1).unwrap();
        assert_eq!((p.shape().c, q.shape().c), (1, 1));
        assert!(channel_split(&a, 0).is_err() && channel_split(&a, 2).is_err());

        let x = t((1, 4, 1, 1), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(channel_shuffle(&x, 2).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        assert_eq!(channel_shuffle(&x, 4).unwrap(), x);
        assert!(channel_shuffle(&x, 3).is_err());
    }

    #[test]
    fn shuffle_then_complementary_shuffle_is_identity() {
        let x = pseudo(Shape4::of(2, 24, 2, 3), 8);
        for g in [1, 2, 3, 4, 6, 8, 12, 24] {
            let y = channel_shuffle(&channel_shuffle(&x, g).unwrap(), 24 / g).unwrap();
            assert_eq!(y, x);
            assert_eq!(channel_shuffle_backward(&channel_shuffle(&x, g).unwrap(), g), x);
        }
    }

    #[test]
    fn convolutions_are_linear() {
        let x = pseudo(Shape4::of(1, 3, 6, 6), 21);
        let y = pseudo(Shape4::of(1, 3, 6, 6), 22);
        let w = pseudo(Shape4::of(2, 3, 3, 3), 23);
        let dw = pseudo(Shape4::of(3, 1, 3, 3), 24);
        let (al, be) = (0.7, -1.3);
        let mix = x.scale(al).add(&y.scale(be)).unwrap();
        for stride in [1, 2] {
            let lhs = conv2d(&mix, &w, None, stride, &mut 0).unwrap();
            let rhs = conv2d(&x, &w, None, stride, &mut 0).unwrap().scale(al)
                .add(&conv2d(&y, &w, None, stride, &mut 0).unwrap().scale(be)).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
            let lhs = depthwise_conv2d(&mix, &dw, stride, &mut 0).unwrap();
            let rhs = depthwise_conv2d(&x, &dw, stride, &mut 0).unwrap().scale(al)
                .add(&depthwise_conv2d(&y, &dw, stride, &mut 0).unwrap().scale(be)).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn he_uniform_respects_limit() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w: Tensor4<f32> = init::he_uniform(Shape4::of(8, 4, 3, 3), 36, &mut rng);
        let limit = (6.0f32 / 36.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(w.max_abs() > 0.5 * limit);
    }
}
