//! Forward/backward kernels for the built-in graph ops.

use crate::scalar::{gemm, Mat};
use crate::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self { c, h, w, kh, kw, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Range of output columns whose tap `k` lands inside an input of width `w`.
fn valid_span(g: &ConvGeom, k: usize, w: usize, out: usize) -> (usize, usize) {
    let lo = if g.pad > k { (g.pad - k).div_ceil(g.stride) } else { 0 };
    if w + g.pad <= k {
        return (0, 0);
    }
    let hi = ((w - 1 + g.pad - k) / g.stride + 1).min(out);
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in drow[first..first + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in srow.iter().enumerate() {
                            drow[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output of a 2-D convolution: x `[N,C,H,W]`, w `[O,C,kh,kw]`, bias `[O]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, kh, kw) = w.dims4();
    assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
    let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    let wmat = Mat::new(w.data(), o, rows);
    for s in 0..n {
        let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
        let colref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        let dst = &mut out[s * o * p..(s + 1) * o * p];
        gemm(T::one(), wmat, Mat::new(colref, rows, p), T::zero(), dst);
        if let Some(b) = b {
            for (oc, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[oc * p..(oc + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to (input, weight, bias).
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, kh, kw) = w.dims4();
    let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * p }];
    let mut dcols = vec![T::zero(); if need[0] { rows * p } else { 0 }];
    let wmat = Mat::new(w.data(), o, rows);
    for s in 0..n {
        let dy = Mat::new(&grad.data()[s * o * p..(s + 1) * o * p], o, p);
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let colref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            gemm(T::one(), dy, Mat::new(colref, rows, p).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
            if g.is_pointwise() {
                gemm(T::one(), wmat.t(), dy, T::zero(), dxs);
            } else {
                gemm(T::one(), wmat.t(), dy, T::zero(), &mut dcols);
                col2im(&dcols, &g, dxs);
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); o];
        for s in 0..n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let base = (s * o + oc) * p;
                *acc += grad.data()[base..base + p].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(&[o], db)
    });
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
        db,
    )
}

/// Per-(sample, channel) normalisation without affine parameters.
/// Returns the output and the per-plane inverse standard deviations.
pub fn instance_norm_forward<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let cnt = T::of(hw as f64);
    let mut out = x.data().to_vec();
    let mut inv = Vec::with_capacity(n * c);
    for plane in out.chunks_mut(hw) {
        let mean = plane.iter().copied().sum::<T>() / cnt;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
        let is = T::one() / (var + eps).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (Tensor::from_vec(&[n, c, h, w], out), inv)
}

pub fn instance_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], grad: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = y.dims4();
    let hw = h * w;
    let cnt = T::of(hw as f64);
    let mut dx = vec![T::zero(); y.len()];
    for (p, ((dxp, yp), gp)) in dx.chunks_mut(hw).zip(y.data().chunks(hw)).zip(grad.data().chunks(hw)).enumerate() {
        let mg = gp.iter().copied().sum::<T>() / cnt;
        let mgy = gp.iter().zip(yp).map(|(&g, &y)| g * y).sum::<T>() / cnt;
        for ((d, &g), &yv) in dxp.iter_mut().zip(gp).zip(yp) {
            *d = inv_std[p] * (g - mg - yv * mgy);
        }
    }
    Tensor::from_vec(y.shape(), dx)
}

/// Linear interpolation taps for resizing `src` samples to `dst` samples with
/// half-pixel centres and edge clamping.
pub fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear_forward<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = resize_taps(h, ho);
    let tx = resize_taps(w, wo);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub fn resize_bilinear_backward<T: Real>(shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (shape[2], shape[3]);
    let (_, _, ho, wo) = grad.dims4();
    let ty = resize_taps(h, ho);
    let tx = resize_taps(w, wo);
    let mut dx = vec![T::zero(); shape.iter().product()];
    for (dst, g) in dx.chunks_mut(h * w).zip(grad.data().chunks(ho * wo)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let gv = g[oy * wo + ox];
                dst[y0 * w + x0] += gv * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += gv * (T::one() - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (T::one() - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

/// 2x2 mean over the last two axes of a tensor of any rank >= 2.
pub fn avg_pool2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.rank();
    assert!(r >= 2);
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even trailing dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(x.len() / 4);
    for src in x.data().chunks(h * w) {
        for oy in 0..ho {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..wo {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_vec(&shape, out)
}

pub fn avg_pool2_backward<T: Real>(shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); shape.iter().product()];
    for (dst, g) in dx.chunks_mut(h * w).zip(grad.data().chunks(ho * wo)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

/// Concatenation along axis 1 of NCHW-like tensors (any rank >= 2).
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let n = parts[0].dim(0);
    let tail: Vec<usize> = parts[0].shape()[2..].to_vec();
    let inner: usize = tail.iter().product();
    let total_c: usize = parts.iter().map(|p| p.dim(1)).sum();
    for p in parts {
        assert_eq!(p.dim(0), n, "concat batch mismatch");
        assert_eq!(&p.shape()[2..], &tail[..], "concat spatial mismatch");
    }
    let mut out = Vec::with_capacity(n * total_c * inner);
    for s in 0..n {
        for p in parts {
            let block = p.dim(1) * inner;
            out.extend_from_slice(&p.data()[s * block..(s + 1) * block]);
        }
    }
    let mut shape = vec![n, total_c];
    shape.extend(tail);
    Tensor::from_vec(&shape, out)
}

/// Channels `[start, start + len)` of an NCHW-like tensor.
pub fn narrow_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let n = x.dim(0);
    let c = x.dim(1);
    assert!(start + len <= c, "narrow out of range");
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(n * len * inner);
    for s in 0..n {
        let base = (s * c + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::from_vec(&shape, out)
}
