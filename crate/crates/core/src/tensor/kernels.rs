//! Direct-loop convolution kernels and their adjoints.
//!
//! All spatial convolutions are stride-1 "same" cross-correlations. Inputs are
//! padded into a scratch plane once, so the inner loops run over contiguous
//! rows. Batch samples are processed in parallel; per-sample weight gradients
//! are summed in sample order, which keeps results bit-reproducible.

use rayon::prelude::*;

use super::{Real, Shape};

/// Boundary extension used by spatial convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Mirror without repeating the edge sample: `[c b | a b c d | c b]`.
    #[default]
    Reflect,
    Zero,
}

/// Source index for padded coordinate `i` (may be negative), or `None` for zero padding.
#[inline]
pub(crate) fn source_index(i: isize, n: usize, mode: Padding) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        Padding::Zero => None,
        Padding::Reflect => {
            let mut j = i;
            // Single reflection suffices because pad < n.
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * n - 2 - j;
            }
            debug_assert!((0..n).contains(&j));
            Some(j as usize)
        }
    }
}

pub(crate) fn pad_plane<T: Real>(src: &[T], h: usize, w: usize, p: usize, mode: Padding, dst: &mut [T]) {
    let pw = w + 2 * p;
    for py in 0..h + 2 * p {
        let row = &mut dst[py * pw..(py + 1) * pw];
        match source_index(py as isize - p as isize, h, mode) {
            None => row.fill(T::zero()),
            Some(sy) => {
                let srow = &src[sy * w..(sy + 1) * w];
                row[p..p + w].copy_from_slice(srow);
                for px in (0..p).chain(p + w..pw) {
                    row[px] = match source_index(px as isize - p as isize, w, mode) {
                        Some(sx) => srow[sx],
                        None => T::zero(),
                    };
                }
            }
        }
    }
}

/// Adjoint of [`pad_plane`]: folds a padded-plane gradient back onto the source plane (accumulating).
pub(crate) fn unpad_plane_adjoint<T: Real>(
    gpad: &[T],
    h: usize,
    w: usize,
    p: usize,
    mode: Padding,
    gsrc: &mut [T],
) {
    let pw = w + 2 * p;
    for py in 0..h + 2 * p {
        let Some(sy) = source_index(py as isize - p as isize, h, mode) else {
            continue;
        };
        let grow = &gpad[py * pw..(py + 1) * pw];
        let srow = &mut gsrc[sy * w..(sy + 1) * w];
        for (d, &g) in srow.iter_mut().zip(&grow[p..p + w]) {
            *d += g;
        }
        for px in (0..p).chain(p + w..pw) {
            if let Some(sx) = source_index(px as isize - p as isize, w, mode) {
                srow[sx] += grow[px];
            }
        }
    }
}

/// `out += kernel ⋆ padded` for one plane.
fn correlate_acc<T: Real>(padded: &[T], kernel: &[T], k: usize, h: usize, w: usize, out: &mut [T]) {
    let pw = w + k - 1;
    for ky in 0..k {
        for kx in 0..k {
            let kv = kernel[ky * k + kx];
            if kv == T::zero() {
                continue;
            }
            for y in 0..h {
                let src = &padded[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                let dst = &mut out[y * w..(y + 1) * w];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += kv * s;
                }
            }
        }
    }
}

/// `gkernel += Σ gout · shifted(padded)` for one plane pair.
fn correlate_grad_kernel<T: Real>(padded: &[T], gout: &[T], k: usize, h: usize, w: usize, gkernel: &mut [T]) {
    let pw = w + k - 1;
    for ky in 0..k {
        for kx in 0..k {
            // Eight independent lanes let the compiler vectorize without
            // reassociating; the final fold order is fixed.
            let mut lanes = [T::zero(); 8];
            for y in 0..h {
                let src = &padded[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                let g = &gout[y * w..(y + 1) * w];
                let mut gc = g.chunks_exact(8);
                let mut sc = src.chunks_exact(8);
                for (ga, sa) in (&mut gc).zip(&mut sc) {
                    for l in 0..8 {
                        lanes[l] += ga[l] * sa[l];
                    }
                }
                for (&a, &b) in gc.remainder().iter().zip(sc.remainder()) {
                    lanes[0] += a * b;
                }
            }
            gkernel[ky * k + kx] += lanes.iter().fold(T::zero(), |a, &b| a + b);
        }
    }
}

/// `gpadded += kernel-weighted scatter of gout` for one plane pair.
fn correlate_grad_input<T: Real>(kernel: &[T], gout: &[T], k: usize, h: usize, w: usize, gpadded: &mut [T]) {
    let pw = w + k - 1;
    for ky in 0..k {
        for kx in 0..k {
            let kv = kernel[ky * k + kx];
            if kv == T::zero() {
                continue;
            }
            for y in 0..h {
                let g = &gout[y * w..(y + 1) * w];
                let dst = &mut gpadded[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += kv * s;
                }
            }
        }
    }
}

fn padded_sample<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize, mode: Padding) -> Vec<T> {
    let pp = (h + 2 * p) * (w + 2 * p);
    let mut out = vec![T::zero(); c * pp];
    for ci in 0..c {
        pad_plane(&x[ci * h * w..(ci + 1) * h * w], h, w, p, mode, &mut out[ci * pp..(ci + 1) * pp]);
    }
    out
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    acc
}

/// Geometry of a dense `co×ci×k×k` convolution, or a depthwise `c×1×k×k` one.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub shape: Shape,
    pub co: usize,
    pub k: usize,
    pub depthwise: bool,
    pub padding: Padding,
}

impl ConvGeom {
    fn in_channels_for(&self, co: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            co..co + 1
        } else {
            0..self.shape.c
        }
    }

    fn kernel_offset(&self, co: usize, ci: usize) -> usize {
        let kk = self.k * self.k;
        if self.depthwise {
            co * kk
        } else {
            (co * self.shape.c + ci) * kk
        }
    }

    fn kernel_len(&self) -> usize {
        let per = if self.depthwise { 1 } else { self.shape.c };
        self.co * per * self.k * self.k
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let Shape { n, c, h, w } = g.shape;
    let p = g.k / 2;
    let plane = h * w;
    let pp = (h + 2 * p) * (w + 2 * p);
    let mut out = vec![T::zero(); n * g.co * plane];
    out.par_chunks_mut(g.co * plane).enumerate().for_each(|(ni, out_n)| {
        let padded = padded_sample(&x[ni * c * plane..(ni + 1) * c * plane], c, h, w, p, g.padding);
        for co in 0..g.co {
            let dst = &mut out_n[co * plane..(co + 1) * plane];
            dst.fill(bias[co]);
            for ci in g.in_channels_for(co) {
                let off = g.kernel_offset(co, ci);
                correlate_acc(
                    &padded[ci * pp..(ci + 1) * pp],
                    &kernel[off..off + g.k * g.k],
                    g.k,
                    h,
                    w,
                    dst,
                );
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    gout: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let Shape { n, c, h, w } = g.shape;
    let p = g.k / 2;
    let plane = h * w;
    let pp = (h + 2 * p) * (w + 2 * p);
    let klen = g.kernel_len();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xs = &x[ni * c * plane..(ni + 1) * c * plane];
            let gs = &gout[ni * g.co * plane..(ni + 1) * g.co * plane];
            let mut gk = Vec::new();
            if want[1] {
                gk = vec![T::zero(); klen];
                let padded = padded_sample(xs, c, h, w, p, g.padding);
                for co in 0..g.co {
                    for ci in g.in_channels_for(co) {
                        let off = g.kernel_offset(co, ci);
                        correlate_grad_kernel(
                            &padded[ci * pp..(ci + 1) * pp],
                            &gs[co * plane..(co + 1) * plane],
                            g.k,
                            h,
                            w,
                            &mut gk[off..off + g.k * g.k],
                        );
                    }
                }
            }
            let mut gx = Vec::new();
            if want[0] {
                let mut gpad = vec![T::zero(); c * pp];
                for co in 0..g.co {
                    for ci in g.in_channels_for(co) {
                        let off = g.kernel_offset(co, ci);
                        correlate_grad_input(
                            &kernel[off..off + g.k * g.k],
                            &gs[co * plane..(co + 1) * plane],
                            g.k,
                            h,
                            w,
                            &mut gpad[ci * pp..(ci + 1) * pp],
                        );
                    }
                }
                gx = vec![T::zero(); c * plane];
                for ci in 0..c {
                    unpad_plane_adjoint(
                        &gpad[ci * pp..(ci + 1) * pp],
                        h,
                        w,
                        p,
                        g.padding,
                        &mut gx[ci * plane..(ci + 1) * plane],
                    );
                }
            }
            (gx, gk)
        })
        .collect();

    let bias = want[2].then(|| {
        let mut gb = vec![T::zero(); g.co];
        for ni in 0..n {
            for (co, b) in gb.iter_mut().enumerate() {
                let start = (ni * g.co + co) * plane;
                *b += gout[start..start + plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    let (gxs, gks): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    ConvGrads {
        input: want[0].then(|| gxs.concat()),
        kernel: want[1].then(|| sum_in_order(gks, klen)),
        bias,
    }
}

/// Per-pixel channel mixing: `out[n] = W · x[n] + b` with `W` of shape `co×ci`.
pub(crate) fn pointwise_forward<T: Real>(shape: Shape, co: usize, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let Shape { n, c, h, w } = shape;
    let plane = h * w;
    let mut out = vec![T::zero(); n * co * plane];
    out.par_chunks_mut(co * plane).enumerate().for_each(|(ni, out_n)| {
        for (o, row) in out_n.chunks_mut(plane).enumerate() {
            row.fill(bias[o]);
        }
        T::gemm(
            co,
            c,
            plane,
            weight,
            c as isize,
            1,
            &x[ni * c * plane..(ni + 1) * c * plane],
            plane as isize,
            1,
            T::one(),
            out_n,
            plane as isize,
            1,
        );
    });
    out
}

pub(crate) fn pointwise_backward<T: Real>(
    shape: Shape,
    co: usize,
    x: &[T],
    weight: &[T],
    gout: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let Shape { n, c, h, w } = shape;
    let plane = h * w;
    let input = want[0].then(|| {
        let mut gx = vec![T::zero(); n * c * plane];
        gx.par_chunks_mut(c * plane).enumerate().for_each(|(ni, gx_n)| {
            // gx = Wᵀ · gout
            T::gemm(
                c,
                co,
                plane,
                weight,
                1,
                c as isize,
                &gout[ni * co * plane..(ni + 1) * co * plane],
                plane as isize,
                1,
                T::zero(),
                gx_n,
                plane as isize,
                1,
            );
        });
        gx
    });
    let kernel = want[1].then(|| {
        let parts: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let mut gw = vec![T::zero(); co * c];
                // gW = gout · xᵀ
                T::gemm(
                    co,
                    plane,
                    c,
                    &gout[ni * co * plane..(ni + 1) * co * plane],
                    plane as isize,
                    1,
                    &x[ni * c * plane..(ni + 1) * c * plane],
                    1,
                    plane as isize,
                    T::zero(),
                    &mut gw,
                    c as isize,
                    1,
                );
                gw
            })
            .collect();
        sum_in_order(parts, co * c)
    });
    let bias = want[2].then(|| {
        let mut gb = vec![T::zero(); co];
        for ni in 0..n {
            for (o, b) in gb.iter_mut().enumerate() {
                let start = (ni * co + o) * plane;
                *b += gout[start..start + plane].iter().copied().sum::<T>();
            }
        }
        gb
    });
    ConvGrads { input, kernel, bias }
}

/// Channel layer norm forward. Returns `(out, normalized, rstd)`; the last two feed the backward pass.
pub(crate) fn layer_norm_forward<T: Real>(
    shape: Shape,
    x: &[T],
    scale: &[T],
    shift: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let Shape { n, c, h, w } = shape;
    let plane = h * w;
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * plane];
    out.par_chunks_mut(c * plane)
        .zip(xhat.par_chunks_mut(c * plane))
        .zip(rstd.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(ni, ((out_n, xhat_n), rstd_n))| {
            let xs = &x[ni * c * plane..(ni + 1) * c * plane];
            let mut mean = vec![T::zero(); plane];
            for row in xs.chunks(plane) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            let mut var = vec![T::zero(); plane];
            for row in xs.chunks(plane) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            for (r, s) in rstd_n.iter_mut().zip(&var) {
                *r = T::one() / (*s * inv_c + eps).sqrt();
            }
            for ci in 0..c {
                let row = &xs[ci * plane..(ci + 1) * plane];
                let xh = &mut xhat_n[ci * plane..(ci + 1) * plane];
                let o = &mut out_n[ci * plane..(ci + 1) * plane];
                for i in 0..plane {
                    let v = (row[i] - mean[i]) * rstd_n[i];
                    xh[i] = v;
                    o[i] = v * scale[ci] + shift[ci];
                }
            }
        });
    (out, xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Real>(
    shape: Shape,
    xhat: &[T],
    rstd: &[T],
    scale: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let Shape { n, c, h, w } = shape;
    let plane = h * w;
    let inv_c = T::one() / T::lit(c as f64);
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let start = (ni * c + ci) * plane;
            let g = &gout[start..start + plane];
            let xh = &xhat[start..start + plane];
            gscale[ci] += g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            gshift[ci] += g.iter().copied().sum::<T>();
        }
    }
    let mut gx = vec![T::zero(); gout.len()];
    gx.par_chunks_mut(c * plane).enumerate().for_each(|(ni, gx_n)| {
        let base = ni * c * plane;
        let mut mean_g = vec![T::zero(); plane];
        let mut mean_gx = vec![T::zero(); plane];
        for ci in 0..c {
            let g = &gout[base + ci * plane..base + (ci + 1) * plane];
            let xh = &xhat[base + ci * plane..base + (ci + 1) * plane];
            for i in 0..plane {
                let gh = g[i] * scale[ci];
                mean_g[i] += gh;
                mean_gx[i] += gh * xh[i];
            }
        }
        let rs = &rstd[ni * plane..(ni + 1) * plane];
        for ci in 0..c {
            let g = &gout[base + ci * plane..base + (ci + 1) * plane];
            let xh = &xhat[base + ci * plane..base + (ci + 1) * plane];
            let dst = &mut gx_n[ci * plane..(ci + 1) * plane];
            for i in 0..plane {
                let gh = g[i] * scale[ci];
                dst[i] = rs[i] * (gh - mean_g[i] * inv_c - xh[i] * mean_gx[i] * inv_c);
            }
        }
    });
    (gx, gscale, gshift)
}
