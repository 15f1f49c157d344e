//! Raw computational kernels behind the tape operations.
//!
//! Convolutions go through an im2col buffer so the inner loops are
//! unit-stride; they parallelize over the batch dimension with per-sample
//! partial results reduced in index order, which keeps outputs bit-identical
//! regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Real;

/// Which squash nonlinearity to apply to capsule vectors.
///
/// `Standard` compresses a row s to (|s|^2/(1+|s|^2))*(s/|s|), keeping norms
/// in [0,1). `PaperPrinted` uses the denominator (1+|s|)^2 instead of
/// 1+|s|^2; its norms are unbounded and it exists only for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashKind {
    Standard,
    PaperPrinted,
}

const NORM_GUARD: f64 = 1e-30;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ---------------------------------------------------------------------------
// Dense matmul
// ---------------------------------------------------------------------------

pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation convention, NCHW)
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Gathers conv input patches into a [c*kh*kw, oh*ow] buffer.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ohw = oh * ow;
    let mut col = vec![T::zero(); c * kh * kw * ohw];
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let p = (ci * kh + u) * kw + v;
                let row = &mut col[p * ohw..(p + 1) * ohw];
                for oi in 0..oh {
                    let ii = (oi * sh + u) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * sw + v) as isize - pw as isize;
                        if jj >= 0 && jj < w as isize {
                            row[oi * ow + oj] = xrow[jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column entries back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ohw = oh * ow;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let p = (ci * kh + u) * kw + v;
                let row = &col[p * ohw..(p + 1) * ohw];
                for oi in 0..oh {
                    let ii = (oi * sh + u) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow =
                        &mut x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * sw + v) as isize - pw as isize;
                        if jj >= 0 && jj < w as isize {
                            xrow[jj as usize] = xrow[jj as usize] + row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[T],
    f: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let per: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = &x[i * c * h * w..(i + 1) * c * h * w];
            let col = im2col(xs, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow);
            let mut out = vec![T::zero(); f * ohw];
            for fi in 0..f {
                let orow = &mut out[fi * ohw..(fi + 1) * ohw];
                for p in 0..ckk {
                    let kv = k[fi * ckk + p];
                    if kv == T::zero() {
                        continue;
                    }
                    let crow = &col[p * ohw..(p + 1) * ohw];
                    for (o, &cv) in orow.iter_mut().zip(crow) {
                        *o = *o + kv * cv;
                    }
                }
            }
            out
        })
        .collect();
    per.concat()
}

/// Returns (d_input, d_kernel).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[T],
    f: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let per: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xs = &x[i * c * h * w..(i + 1) * c * h * w];
            let g = &gout[i * f * ohw..(i + 1) * f * ohw];
            let col = im2col(xs, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow);
            let mut dk = vec![T::zero(); f * ckk];
            let mut dcol = vec![T::zero(); ckk * ohw];
            for fi in 0..f {
                let grow = &g[fi * ohw..(fi + 1) * ohw];
                for p in 0..ckk {
                    let crow = &col[p * ohw..(p + 1) * ohw];
                    let mut acc = T::zero();
                    for (&gv, &cv) in grow.iter().zip(crow) {
                        acc = acc + gv * cv;
                    }
                    dk[fi * ckk + p] = acc;
                    let kv = k[fi * ckk + p];
                    if kv != T::zero() {
                        let drow = &mut dcol[p * ohw..(p + 1) * ohw];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + kv * gv;
                        }
                    }
                }
            }
            let dx = col2im_add(&dcol, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow);
            (dx, dk)
        })
        .collect();
    let mut dx = Vec::with_capacity(n * c * h * w);
    let mut dk_total = vec![T::zero(); f * ckk];
    for (dxi, dki) in per {
        dx.extend_from_slice(&dxi);
        for (a, b) in dk_total.iter_mut().zip(&dki) {
            *a = *a + *b;
        }
    }
    (dx, dk_total)
}

/// Transposed convolution: the exact adjoint of `conv2d` with the same
/// kernel and geometry. Kernel layout stays [f, c, kh, kw]; the map goes
/// from f channels back to c channels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_forward<T: Real>(
    y: &[T],
    n: usize,
    f: usize,
    hin: usize,
    win: usize,
    k: &[T],
    c: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ckk = c * kh * kw;
    let ihw = hin * win;
    let per: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ys = &y[i * f * ihw..(i + 1) * f * ihw];
            // col = K^T * y, then scatter back onto the output canvas.
            let mut col = vec![T::zero(); ckk * ihw];
            for fi in 0..f {
                let yrow = &ys[fi * ihw..(fi + 1) * ihw];
                for p in 0..ckk {
                    let kv = k[fi * ckk + p];
                    if kv == T::zero() {
                        continue;
                    }
                    let crow = &mut col[p * ihw..(p + 1) * ihw];
                    for (cv, &yv) in crow.iter_mut().zip(yrow) {
                        *cv = *cv + kv * yv;
                    }
                }
            }
            col2im_add(&col, c, oh, ow, kh, kw, sh, sw, ph, pw, hin, win)
        })
        .collect();
    per.concat()
}

/// Returns (d_input, d_kernel) for the transposed convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    y: &[T],
    n: usize,
    f: usize,
    hin: usize,
    win: usize,
    k: &[T],
    c: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ckk = c * kh * kw;
    let ihw = hin * win;
    let per: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ys = &y[i * f * ihw..(i + 1) * f * ihw];
            let g = &gout[i * c * oh * ow..(i + 1) * c * oh * ow];
            let gcol = im2col(g, c, oh, ow, kh, kw, sh, sw, ph, pw, hin, win);
            let mut dy = vec![T::zero(); f * ihw];
            let mut dk = vec![T::zero(); f * ckk];
            for fi in 0..f {
                let yrow = &ys[fi * ihw..(fi + 1) * ihw];
                let drow = &mut dy[fi * ihw..(fi + 1) * ihw];
                for p in 0..ckk {
                    let grow = &gcol[p * ihw..(p + 1) * ihw];
                    let kv = k[fi * ckk + p];
                    if kv != T::zero() {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + kv * gv;
                        }
                    }
                    let mut acc = T::zero();
                    for (&yv, &gv) in yrow.iter().zip(grow) {
                        acc = acc + yv * gv;
                    }
                    dk[fi * ckk + p] = acc;
                }
            }
            (dy, dk)
        })
        .collect();
    let mut dy = Vec::with_capacity(n * f * ihw);
    let mut dk_total = vec![T::zero(); f * ckk];
    for (dyi, dki) in per {
        dy.extend_from_slice(&dyi);
        for (a, b) in dk_total.iter_mut().zip(&dki) {
            *a = *a + *b;
        }
    }
    (dy, dk_total)
}

// ---------------------------------------------------------------------------
// Pooling and resize
// ---------------------------------------------------------------------------

fn pool_bin(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

pub(crate) fn adaptive_avg_pool2d_forward<T: Real>(
    x: &[T],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); nc * oh * ow];
    for m in 0..nc {
        let plane = &x[m * h * w..(m + 1) * h * w];
        for oi in 0..oh {
            let (h0, h1) = pool_bin(oi, h, oh);
            for oj in 0..ow {
                let (w0, w1) = pool_bin(oj, w, ow);
                let mut acc = T::zero();
                for ii in h0..h1 {
                    for jj in w0..w1 {
                        acc = acc + plane[ii * w + jj];
                    }
                }
                let count = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                out[(m * oh + oi) * ow + oj] = acc / count;
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool2d_backward<T: Real>(
    g: &[T],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); nc * h * w];
    for m in 0..nc {
        let plane = &mut dx[m * h * w..(m + 1) * h * w];
        for oi in 0..oh {
            let (h0, h1) = pool_bin(oi, h, oh);
            for oj in 0..ow {
                let (w0, w1) = pool_bin(oj, w, ow);
                let count = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                let gv = g[(m * oh + oi) * ow + oj] / count;
                for ii in h0..h1 {
                    for jj in w0..w1 {
                        plane[ii * w + jj] = plane[ii * w + jj] + gv;
                    }
                }
            }
        }
    }
    dx
}

fn bilinear_source(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn resize_bilinear_forward<T: Real>(
    x: &[T],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); nc * oh * ow];
    for m in 0..nc {
        let plane = &x[m * h * w..(m + 1) * h * w];
        for oi in 0..oh {
            let (i0, i1, fi) = bilinear_source(oi, h, oh);
            for oj in 0..ow {
                let (j0, j1, fj) = bilinear_source(oj, w, ow);
                let v00 = plane[i0 * w + j0].as_f64();
                let v01 = plane[i0 * w + j1].as_f64();
                let v10 = plane[i1 * w + j0].as_f64();
                let v11 = plane[i1 * w + j1].as_f64();
                let top = v00 * (1.0 - fj) + v01 * fj;
                let bot = v10 * (1.0 - fj) + v11 * fj;
                out[(m * oh + oi) * ow + oj] = T::from_f64(top * (1.0 - fi) + bot * fi);
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward<T: Real>(
    g: &[T],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); nc * h * w];
    for m in 0..nc {
        let plane = &mut dx[m * h * w..(m + 1) * h * w];
        for oi in 0..oh {
            let (i0, i1, fi) = bilinear_source(oi, h, oh);
            for oj in 0..ow {
                let (j0, j1, fj) = bilinear_source(oj, w, ow);
                let gv = g[(m * oh + oi) * ow + oj].as_f64();
                plane[i0 * w + j0] =
                    plane[i0 * w + j0] + T::from_f64(gv * (1.0 - fi) * (1.0 - fj));
                plane[i0 * w + j1] = plane[i0 * w + j1] + T::from_f64(gv * (1.0 - fi) * fj);
                plane[i1 * w + j0] = plane[i1 * w + j0] + T::from_f64(gv * fi * (1.0 - fj));
                plane[i1 * w + j1] = plane[i1 * w + j1] + T::from_f64(gv * fi * fj);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

pub(crate) fn softmax_forward<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let axis_n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_n + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..axis_n {
                if x[at(a)] > max {
                    max = x[at(a)];
                }
            }
            let mut sum = T::zero();
            for a in 0..axis_n {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                sum = sum + e;
            }
            for a in 0..axis_n {
                out[at(a)] = out[at(a)] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    g: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let axis_n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_n + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..axis_n {
                dot = dot + g[at(a)] * y[at(a)];
            }
            for a in 0..axis_n {
                dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Capsule operations
// ---------------------------------------------------------------------------

/// Squash applied independently to each row of a [rows, d] view
/// (the last axis of the tensor is the capsule dimension).
pub(crate) fn squash_rows_forward<T: Real>(x: &[T], d: usize, kind: SquashKind) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let n2: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let n = n2.sqrt();
        if n < NORM_GUARD {
            continue;
        }
        let gain = match kind {
            SquashKind::Standard => n / (1.0 + n2),
            SquashKind::PaperPrinted => n2 / ((1.0 + n) * (1.0 + n)),
        };
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = T::from_f64(v.as_f64() * gain);
        }
    }
    out
}

pub(crate) fn squash_rows_backward<T: Real>(
    x: &[T],
    g: &[T],
    d: usize,
    kind: SquashKind,
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for ((row, grow), drow) in x
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let n2: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let n = n2.sqrt();
        if n < NORM_GUARD {
            continue;
        }
        // v = gain(n) * s; ds = gain*u + (u . s) * gain'(n)/n * s
        let (gain, dgain_over_n) = match kind {
            SquashKind::Standard => (
                n / (1.0 + n2),
                ((1.0 - n2) / ((1.0 + n2) * (1.0 + n2))) / n,
            ),
            SquashKind::PaperPrinted => {
                let q = 1.0 + n;
                (n2 / (q * q), 2.0 / (q * q * q))
            }
        };
        let dot: f64 = row
            .iter()
            .zip(grow)
            .map(|(&s, &u)| s.as_f64() * u.as_f64())
            .sum();
        for ((dv, &s), &u) in drow.iter_mut().zip(row).zip(grow) {
            *dv = T::from_f64(gain * u.as_f64() + dot * dgain_over_n * s.as_f64());
        }
    }
    dx
}

/// u_hat[n,k,l,:] = u[n,k,:] * w[k,l,:,:] (row-vector times matrix).
pub(crate) fn capsule_predict_forward<T: Real>(
    u: &[T],
    w: &[T],
    n: usize,
    k: usize,
    l: usize,
    di: usize,
    dout: usize,
) -> Vec<T> {
    let per: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut out = vec![T::zero(); k * l * dout];
            for ki in 0..k {
                let urow = &u[(ni * k + ki) * di..(ni * k + ki + 1) * di];
                for li in 0..l {
                    let wmat = &w[((ki * l + li) * di) * dout..((ki * l + li) * di + di) * dout];
                    let orow = &mut out[(ki * l + li) * dout..(ki * l + li + 1) * dout];
                    for (i, &uv) in urow.iter().enumerate() {
                        if uv == T::zero() {
                            continue;
                        }
                        let wrow = &wmat[i * dout..(i + 1) * dout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + uv * wv;
                        }
                    }
                }
            }
            out
        })
        .collect();
    per.concat()
}

pub(crate) fn capsule_predict_backward<T: Real>(
    u: &[T],
    w: &[T],
    n: usize,
    k: usize,
    l: usize,
    di: usize,
    dout: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let du: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dun = vec![T::zero(); k * di];
            for ki in 0..k {
                for li in 0..l {
                    let grow = &g[((ni * k + ki) * l + li) * dout
                        ..((ni * k + ki) * l + li + 1) * dout];
                    let wmat = &w[((ki * l + li) * di) * dout..((ki * l + li) * di + di) * dout];
                    let drow = &mut dun[ki * di..(ki + 1) * di];
                    for (i, dv) in drow.iter_mut().enumerate() {
                        let wrow = &wmat[i * dout..(i + 1) * dout];
                        let mut acc = T::zero();
                        for (&gv, &wv) in grow.iter().zip(wrow) {
                            acc = acc + gv * wv;
                        }
                        *dv = *dv + acc;
                    }
                }
            }
            dun
        })
        .collect();
    // dw is parallel over input capsule index: each k-slice is owned by one task.
    let dw: Vec<Vec<T>> = (0..k)
        .into_par_iter()
        .map(|ki| {
            let mut dwk = vec![T::zero(); l * di * dout];
            for ni in 0..n {
                let urow = &u[(ni * k + ki) * di..(ni * k + ki + 1) * di];
                for li in 0..l {
                    let grow = &g[((ni * k + ki) * l + li) * dout
                        ..((ni * k + ki) * l + li + 1) * dout];
                    for (i, &uv) in urow.iter().enumerate() {
                        if uv == T::zero() {
                            continue;
                        }
                        let drow =
                            &mut dwk[(li * di + i) * dout..(li * di + i + 1) * dout];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + uv * gv;
                        }
                    }
                }
            }
            dwk
        })
        .collect();
    (du.concat(), dw.concat())
}

/// s[n,l,:] = sum_k c[n,k,l] * u_hat[n,k,l,:]
pub(crate) fn route_weighted_sum_forward<T: Real>(
    c: &[T],
    u_hat: &[T],
    n: usize,
    k: usize,
    l: usize,
    d: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * l * d];
    for ni in 0..n {
        for ki in 0..k {
            for li in 0..l {
                let cv = c[(ni * k + ki) * l + li];
                let urow =
                    &u_hat[((ni * k + ki) * l + li) * d..((ni * k + ki) * l + li + 1) * d];
                let orow = &mut out[(ni * l + li) * d..(ni * l + li + 1) * d];
                for (o, &uv) in orow.iter_mut().zip(urow) {
                    *o = *o + cv * uv;
                }
            }
        }
    }
    out
}

pub(crate) fn route_weighted_sum_backward<T: Real>(
    c: &[T],
    u_hat: &[T],
    n: usize,
    k: usize,
    l: usize,
    d: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dc = vec![T::zero(); n * k * l];
    let mut du = vec![T::zero(); n * k * l * d];
    for ni in 0..n {
        for ki in 0..k {
            for li in 0..l {
                let grow = &g[(ni * l + li) * d..(ni * l + li + 1) * d];
                let urow =
                    &u_hat[((ni * k + ki) * l + li) * d..((ni * k + ki) * l + li + 1) * d];
                let drow =
                    &mut du[((ni * k + ki) * l + li) * d..((ni * k + ki) * l + li + 1) * d];
                let cv = c[(ni * k + ki) * l + li];
                let mut acc = T::zero();
                for ((dv, &gv), &uv) in drow.iter_mut().zip(grow).zip(urow) {
                    acc = acc + gv * uv;
                    *dv = cv * gv;
                }
                dc[(ni * k + ki) * l + li] = acc;
            }
        }
    }
    (dc, du)
}

/// a[n,k,l] = u_hat[n,k,l,:] . v[n,l,:]
pub(crate) fn route_agreement_forward<T: Real>(
    u_hat: &[T],
    v: &[T],
    n: usize,
    k: usize,
    l: usize,
    d: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * k * l];
    for ni in 0..n {
        for ki in 0..k {
            for li in 0..l {
                let urow =
                    &u_hat[((ni * k + ki) * l + li) * d..((ni * k + ki) * l + li + 1) * d];
                let vrow = &v[(ni * l + li) * d..(ni * l + li + 1) * d];
                let mut acc = T::zero();
                for (&uv, &vv) in urow.iter().zip(vrow) {
                    acc = acc + uv * vv;
                }
                out[(ni * k + ki) * l + li] = acc;
            }
        }
    }
    out
}

pub(crate) fn route_agreement_backward<T: Real>(
    u_hat: &[T],
    v: &[T],
    n: usize,
    k: usize,
    l: usize,
    d: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut du = vec![T::zero(); n * k * l * d];
    let mut dv = vec![T::zero(); n * l * d];
    for ni in 0..n {
        for ki in 0..k {
            for li in 0..l {
                let gv = g[(ni * k + ki) * l + li];
                let urow =
                    &u_hat[((ni * k + ki) * l + li) * d..((ni * k + ki) * l + li + 1) * d];
                let vrow = &v[(ni * l + li) * d..(ni * l + li + 1) * d];
                let durow =
                    &mut du[((ni * k + ki) * l + li) * d..((ni * k + ki) * l + li + 1) * d];
                let dvrow = &mut dv[(ni * l + li) * d..(ni * l + li + 1) * d];
                for (((duv, dvv), &uv), &vv) in
                    durow.iter_mut().zip(dvrow.iter_mut()).zip(urow).zip(vrow)
                {
                    *duv = gv * vv;
                    *dvv = *dvv + gv * uv;
                }
            }
        }
    }
    (du, dv)
}

/// Euclidean norm of each row of a [rows, d] view.
pub(crate) fn row_norms_forward<T: Real>(x: &[T], d: usize) -> Vec<T> {
    x.chunks_exact(d)
        .map(|row| {
            let n2: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            T::from_f64(n2.sqrt())
        })
        .collect()
}

pub(crate) fn row_norms_backward<T: Real>(x: &[T], norms: &[T], d: usize, g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for ((row, drow), (&nm, &gv)) in x
        .chunks_exact(d)
        .zip(dx.chunks_exact_mut(d))
        .zip(norms.iter().zip(g))
    {
        let n = nm.as_f64();
        if n < NORM_GUARD {
            continue;
        }
        let scale = gv.as_f64() / n;
        for (dv, &xv) in drow.iter_mut().zip(row) {
            *dv = T::from_f64(scale * xv.as_f64());
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Clustering layer
// ---------------------------------------------------------------------------

/// Student's-t soft assignment with one degree of freedom:
/// q[i][j] proportional to 1 / (1 + |z_i - u_j|^2), rows normalized.
pub(crate) fn student_t_forward<T: Real>(
    z: &[T],
    centers: &[T],
    n: usize,
    k: usize,
    d: usize,
) -> Vec<T> {
    let mut q = vec![T::zero(); n * k];
    for i in 0..n {
        let zi = &z[i * d..(i + 1) * d];
        let mut sum = 0.0;
        let mut w = vec![0.0f64; k];
        for j in 0..k {
            let uj = &centers[j * d..(j + 1) * d];
            let mut d2 = 0.0;
            for (&a, &b) in zi.iter().zip(uj) {
                let diff = a.as_f64() - b.as_f64();
                d2 += diff * diff;
            }
            w[j] = 1.0 / (1.0 + d2);
            sum += w[j];
        }
        for j in 0..k {
            q[i * k + j] = T::from_f64(w[j] / sum);
        }
    }
    q
}

pub(crate) fn student_t_backward<T: Real>(
    z: &[T],
    centers: &[T],
    n: usize,
    k: usize,
    d: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut dz = vec![T::zero(); n * d];
    let mut dc = vec![T::zero(); k * d];
    for i in 0..n {
        let zi = &z[i * d..(i + 1) * d];
        let mut w = vec![0.0f64; k];
        let mut sum = 0.0;
        for j in 0..k {
            let uj = &centers[j * d..(j + 1) * d];
            let mut d2 = 0.0;
            for (&a, &b) in zi.iter().zip(uj) {
                let diff = a.as_f64() - b.as_f64();
                d2 += diff * diff;
            }
            w[j] = 1.0 / (1.0 + d2);
            sum += w[j];
        }
        // dL/dw_j = (g_j - sum_m g_m q_m) / S, then dL/d d2_j = -w_j^2 dL/dw_j
        let mut gdotq = 0.0;
        for j in 0..k {
            gdotq += g[i * k + j].as_f64() * (w[j] / sum);
        }
        for j in 0..k {
            let uj = &centers[j * d..(j + 1) * d];
            let dw = (g[i * k + j].as_f64() - gdotq) / sum;
            let dd2 = -w[j] * w[j] * dw;
            for t in 0..d {
                let diff = zi[t].as_f64() - uj[t].as_f64();
                let contrib = 2.0 * dd2 * diff;
                dz[i * d + t] = dz[i * d + t] + T::from_f64(contrib);
                dc[j * d + t] = dc[j * d + t] - T::from_f64(contrib);
            }
        }
    }
    (dz, dc)
}

/// KL(P || Q) summed over all entries; terms with p == 0 contribute 0.
pub(crate) fn kl_div_forward<T: Real>(p: &[T], q: &[T]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            let pf = pv.as_f64();
            if pf <= 0.0 {
                0.0
            } else {
                pf * (pf / qv.as_f64()).ln()
            }
        })
        .sum()
}

pub(crate) fn kl_div_backward<T: Real>(p: &[T], q: &[T], g: f64) -> Vec<T> {
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            let pf = pv.as_f64();
            if pf <= 0.0 {
                T::zero()
            } else {
                T::from_f64(-g * pf / qv.as_f64())
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Permutation
// ---------------------------------------------------------------------------

pub(crate) fn permute_forward<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let ndim = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    // out position of input axis a
    let mut pos = vec![0usize; ndim];
    for (o, &a) in axes.iter().enumerate() {
        pos[a] = o;
    }
    let mut out = vec![T::zero(); x.len()];
    let mut coords = vec![0usize; ndim];
    for (lin, &v) in x.iter().enumerate() {
        let mut out_lin = 0;
        for a in 0..ndim {
            out_lin += coords[a] * out_strides[pos[a]];
        }
        out[out_lin] = v;
        let _ = lin;
        // row-major increment
        for a in (0..ndim).rev() {
            coords[a] += 1;
            if coords[a] < shape[a] {
                break;
            }
            coords[a] = 0;
        }
    }
    out
}

pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (o, &a) in axes.iter().enumerate() {
        inv[a] = o;
    }
    inv
}
