// Raw forward/backward kernels over flat buffers. Shape validation happens
// in the tape layer; these assume consistent arguments.

use super::element::{gemm, Element};
use crate::error::{Error, Result};

/// Splits `[.., H, W]` into (product of leading dims, H, W).
pub(crate) fn split_spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "expected at least 2 spatial axes, got {shape:?}"
        )));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Output columns `x` whose source `x + d - pad` lies inside `0..w`.
fn valid_range(d: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (w + pad).saturating_sub(d).min(w);
    (lo, hi.max(lo))
}

/// Unfolds one `(Cin,H,W)` image into a `(Cin·kh·kw, H·W)` column matrix with
/// zero same-padding.
fn im2col<T: Element>(x: &[T], g: ConvGeom, cols: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(dx, pw, w);
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let sy = sy - ph;
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let s0 = sy * w + lo + dx - pw;
                    out_row[lo..hi].copy_from_slice(&plane[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im<T: Element>(cols: &[T], g: ConvGeom, dx_out: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(dx, pw, w);
                if lo == hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let s0 = (sy - ph) * w + lo + dx - pw;
                    let dst = &mut plane[s0..s0 + (hi - lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1
}

/// Batched same-padded convolution: `x` holds `batch` images.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    g: ConvGeom,
) -> Vec<T> {
    let hw = g.hw();
    let in_sz = g.cin * hw;
    let out_sz = g.cout * hw;
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * hw]
    };
    for n in 0..batch {
        let xin = &x[n * in_sz..(n + 1) * in_sz];
        let dst = &mut out[n * out_sz..(n + 1) * out_sz];
        for (co, row) in dst.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        let rhs: &[T] = if is_pointwise(g) {
            xin
        } else {
            im2col(xin, g, &mut cols);
            &cols
        };
        gemm(weight, false, rhs, false, dst, g.cout, g.patch(), hw, true);
    }
    out
}

/// Accumulates gradients of a batched convolution into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    batch: usize,
    g: ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = g.hw();
    let in_sz = g.cin * hw;
    let out_sz = g.cout * hw;
    let pointwise = is_pointwise(g);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * hw]
    };
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { g.patch() * hw }];
    for n in 0..batch {
        let xin = &x[n * in_sz..(n + 1) * in_sz];
        let g_out = &dy[n * out_sz..(n + 1) * out_sz];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in g_out.chunks(hw).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let rhs: &[T] = if pointwise {
                xin
            } else {
                im2col(xin, g, &mut cols);
                &cols
            };
            // dW (Cout × P) += dY (Cout × HW) · colsᵀ (HW × P)
            gemm(g_out, false, rhs, true, dw, g.cout, hw, g.patch(), true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dst = &mut dx[n * in_sz..(n + 1) * in_sz];
            if pointwise {
                gemm(weight, true, g_out, false, dst, g.cin, g.cout, hw, true);
            } else {
                gemm(weight, true, g_out, false, &mut dcols, g.patch(), g.cout, hw, false);
                col2im(&dcols, g, dst);
            }
        }
    }
}

/// Source taps for one output coordinate of an align-corners=false resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Element>(
    x: &[T],
    lead: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(lead * oh * ow);
    for c in 0..lead {
        let p = &x[c * h * w..(c + 1) * h * w];
        for a in &ty {
            let fy = T::of(a.frac);
            let gy = T::one() - fy;
            for b in &tx {
                let fx = T::of(b.frac);
                let gx = T::one() - fx;
                let v = gy * (gx * p[a.i0 * w + b.i0] + fx * p[a.i0 * w + b.i1])
                    + fy * (gx * p[a.i1 * w + b.i0] + fx * p[a.i1 * w + b.i1]);
                out.push(v);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward<T: Element>(
    dy: &[T],
    lead: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for c in 0..lead {
        let p = &mut dx[c * h * w..(c + 1) * h * w];
        let g = &dy[c * oh * ow..(c + 1) * oh * ow];
        for (yo, a) in ty.iter().enumerate() {
            let fy = T::of(a.frac);
            let gy = T::one() - fy;
            for (xo, b) in tx.iter().enumerate() {
                let fx = T::of(b.frac);
                let gx = T::one() - fx;
                let d = g[yo * ow + xo];
                p[a.i0 * w + b.i0] = p[a.i0 * w + b.i0] + d * gy * gx;
                p[a.i0 * w + b.i1] = p[a.i0 * w + b.i1] + d * gy * fx;
                p[a.i1 * w + b.i0] = p[a.i1 * w + b.i0] + d * fy * gx;
                p[a.i1 * w + b.i1] = p[a.i1 * w + b.i1] + d * fy * fx;
            }
        }
    }
}

/// (outer, axis length, inner) decomposition for axis-wise reductions.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Subnormal results are flushed to zero; they carry no usable precision
/// and make downstream GEMMs crawl.
#[inline]
fn flush<T: Element>(v: T) -> T {
    if v < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

#[inline]
fn flush_signed<T: Element>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

pub(crate) fn softmax_forward<T: Element>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 {
        for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = flush((v - max).exp());
                sum = sum + *o;
            }
            let inv = T::one() / sum;
            dst.iter_mut().for_each(|o| *o = flush(*o * inv));
        }
        return out;
    }
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = flush((x[at(j)] - max).exp());
                out[at(j)] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..n {
                out[at(j)] = flush(out[at(j)] * inv);
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(
    y: &[T],
    dy: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    dx: &mut [T],
) {
    if inner == 1 {
        for ((y, dy), dx) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
            let dot = y.iter().zip(dy).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for ((d, &a), &b) in dx.iter_mut().zip(y).zip(dy) {
                *d = flush_signed(*d + a * (b - dot));
            }
        }
        return;
    }
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let dot: T = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] = dx[at(j)] + y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}
