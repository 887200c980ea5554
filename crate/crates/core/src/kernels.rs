//! Raw array kernels behind the differentiable ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits `out_shape` in row-major order, yielding for every run along the
/// last axis the output offset and the offset of a broadcast operand
/// described by `b_strides` (0 on broadcast axes).
pub fn for_each_run(out_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_b = b_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut b_off = 0usize;
    for o in 0..outer {
        f(o * inner, b_off, inner, inner_b);
        // advance odometer over the leading axes
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            b_off += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            b_off -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Strides of `b_shape` when broadcast (right-aligned) against `out_shape`.
pub fn broadcast_strides(out_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return None;
    }
    let pad = out_shape.len() - b_shape.len();
    let bs = strides(b_shape);
    let mut out = vec![0usize; out_shape.len()];
    for (i, &d) in b_shape.iter().enumerate() {
        let o = out_shape[pad + i];
        if d == o {
            out[pad + i] = bs[i];
        } else if d == 1 {
            out[pad + i] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

pub fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.len()];
    for_each_run(&out_shape, &src_strides, |o, s, n, st| {
        let dst = &mut out[o..o + n];
        if st == 1 {
            dst.copy_from_slice(&x[s..s + n]);
        } else {
            for (i, v) in dst.iter_mut().enumerate() {
                *v = x[s + i * st];
            }
        }
    });
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output extent of a convolution along one axis.
pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize, dil: usize) -> usize {
    (n + 2 * pad - dil * (k - 1) - 1) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out(self.h, self.k, self.stride, self.pad, self.dil),
            conv_out(self.w, self.k, self.stride, self.pad, self.dil),
        )
    }
}

/// Unfolds `x [cin, h, w]` into `[cin*k*k, ho*wo]` columns (zero padding).
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx * g.dil) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid index range `[lo, hi)` of outputs whose input `i + off` is inside `0..n`.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 { n.saturating_sub(off as usize) } else { n };
    (lo.min(n), hi.max(lo.min(n)))
}

/// Depthwise 3x3 convolution with zero padding 1: `x, out [c, h, w]`, `w [c, 9]`.
pub fn dwconv3<T: Real>(x: &[T], w: &[T], c: usize, h: usize, wd: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * wd];
    for ch in 0..c {
        let xp = &x[ch * h * wd..(ch + 1) * h * wd];
        let op = &mut out[ch * h * wd..(ch + 1) * h * wd];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let wv = w[ch * 9 + ky * 3 + kx];
                let (xlo, xhi) = valid_range(wd, dx);
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let src = &xp[sy * wd + (xlo as isize + dx) as usize..sy * wd + (xhi as isize + dx) as usize];
                    let dst = &mut op[y * wd + xlo..y * wd + xhi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * *s;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`dwconv3`] with respect to input and weights.
pub fn dwconv3_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    c: usize,
    h: usize,
    wd: usize,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    if let Some(gx) = gx {
        for ch in 0..c {
            let gp = &gout[ch * h * wd..(ch + 1) * h * wd];
            let gxp = &mut gx[ch * h * wd..(ch + 1) * h * wd];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = w[ch * 9 + ky * 3 + kx];
                    let (xlo, xhi) = valid_range(wd, dx);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut gxp
                            [sy * wd + (xlo as isize + dx) as usize..sy * wd + (xhi as isize + dx) as usize];
                        let src = &gp[y * wd + xlo..y * wd + xhi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for ch in 0..c {
            let xp = &x[ch * h * wd..(ch + 1) * h * wd];
            let gp = &gout[ch * h * wd..(ch + 1) * h * wd];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (ylo, yhi) = valid_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (xlo, xhi) = valid_range(wd, dx);
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let a = &xp[sy * wd + (xlo as isize + dx) as usize..sy * wd + (xhi as isize + dx) as usize];
                        let b = &gp[y * wd + xlo..y * wd + xhi];
                        acc += crate::real::dot(a, b);
                    }
                    gw[ch * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Two-tap linear interpolation plan for one axis (half-pixel centers,
/// edge clamped), matching the common `align_corners = false` convention.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPlan<T> {
    pub src: usize,
    pub dst: usize,
    pub taps: Vec<(usize, usize, T)>,
}

impl<T: Real> LinearPlan<T> {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let taps = (0..dst)
            .map(|i| {
                let mut pos = (i as f64 + 0.5) * scale - 0.5;
                if pos < 0.0 {
                    pos = 0.0;
                }
                let i0 = (libm::floor(pos) as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let lam = pos - i0 as f64;
                (i0, i1, T::c(lam))
            })
            .collect();
        Self { src, dst, taps }
    }
}

/// Bilinear resize of `x [c, h, w]` to `[c, oh, ow]`.
pub fn resize<T: Real>(x: &[T], c: usize, ph: &LinearPlan<T>, pw: &LinearPlan<T>) -> Vec<T> {
    let (h, w, oh, ow) = (ph.src, pw.src, ph.dst, pw.dst);
    let mut tmp = vec![T::zero(); c * h * ow];
    for r in 0..c * h {
        let src = &x[r * w..(r + 1) * w];
        let dst = &mut tmp[r * ow..(r + 1) * ow];
        for (j, &(a, b, l)) in pw.taps.iter().enumerate() {
            dst[j] = src[a] * (T::one() - l) + src[b] * l;
        }
    }
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let tp = &tmp[ch * h * ow..(ch + 1) * h * ow];
        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(a, b, l)) in ph.taps.iter().enumerate() {
            let ra = &tp[a * ow..(a + 1) * ow];
            let rb = &tp[b * ow..(b + 1) * ow];
            let dst = &mut op[i * ow..(i + 1) * ow];
            let la = T::one() - l;
            for j in 0..ow {
                dst[j] = ra[j] * la + rb[j] * l;
            }
        }
    }
    out
}

/// Adjoint of [`resize`].
pub fn resize_backward<T: Real>(g: &[T], c: usize, ph: &LinearPlan<T>, pw: &LinearPlan<T>) -> Vec<T> {
    let (h, w, oh, ow) = (ph.src, pw.src, ph.dst, pw.dst);
    let mut tmp = vec![T::zero(); c * h * ow];
    for ch in 0..c {
        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let tp = &mut tmp[ch * h * ow..(ch + 1) * h * ow];
        for (i, &(a, b, l)) in ph.taps.iter().enumerate() {
            let la = T::one() - l;
            for j in 0..ow {
                let v = gp[i * ow + j];
                tp[a * ow + j] += v * la;
                tp[b * ow + j] += v * l;
            }
        }
    }
    let mut gx = vec![T::zero(); c * h * w];
    for r in 0..c * h {
        let src = &tmp[r * ow..(r + 1) * ow];
        let dst = &mut gx[r * w..(r + 1) * w];
        for (j, &(a, b, l)) in pw.taps.iter().enumerate() {
            dst[a] += src[j] * (T::one() - l);
            dst[b] += src[j] * l;
        }
    }
    gx
}

/// Source index for each padded position along one axis (`None` = zero).
pub fn pad_map(n: usize, before: usize, after: usize, reflect: bool) -> Vec<Option<usize>> {
    (0..n + before + after)
        .map(|i| {
            let p = i as isize - before as isize;
            if p >= 0 && (p as usize) < n {
                Some(p as usize)
            } else if !reflect {
                None
            } else {
                Some(reflect_index(p, n))
            }
        })
        .collect()
}

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n-2`).
pub fn reflect_index(mut p: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    p = p.rem_euclid(period);
    if p >= n {
        p = period - p;
    }
    p as usize
}
