//! Slice-level forward and backward kernels shared by the graph and by
//! the frozen (no-graph) inference paths.
//!
//! Spatial maps are channels-last: `[H, W, C]`, row-major.

use super::tensor::Scalar;

pub const GELU_COEF: f64 = 0.044_715;

#[inline]
fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let half: T = c(0.5);
    let inner = k * (x + c::<T>(GELU_COEF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k: T = c((2.0 / std::f64::consts::PI).sqrt());
    let half: T = c(0.5);
    let inner = k * (x + c::<T>(GELU_COEF) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + c::<T>(3.0 * GELU_COEF) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise softmax over the last axis of a `rows × cols` buffer.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in or.iter_mut() {
            *o = *o / total;
        }
    }
}

pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Euclidean norm with sequential accumulation.
pub fn norm<T: Scalar>(x: &[T]) -> T {
    let mut acc = T::zero();
    for &v in x {
        acc = acc + v * v;
    }
    acc.sqrt()
}

/// `x / (‖x‖ + eps)` per row.
pub fn l2_normalize_rows<T: Scalar>(x: &[T], cols: usize, eps: T, out: &mut [T]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let s = norm(xr) + eps;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v / s;
        }
    }
}

pub fn l2_normalize_rows_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    cols: usize,
    eps: T,
    dx: &mut [T],
) {
    for ((xr, dyr), dxr) in x
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let n = norm(xr);
        let s = n + eps;
        let dot: T = xr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        // The norm's subgradient at the origin is taken as zero.
        let coef = if n > T::zero() { dot / (n * s * s) } else { T::zero() };
        for ((d, &g), &v) in dxr.iter_mut().zip(dyr).zip(xr) {
            *d = *d + g / s - v * coef;
        }
    }
}

pub const COS_EPS: f64 = 1e-8;

/// Row-wise cosine similarity `a·b / max(‖a‖‖b‖, eps)`.
pub fn cosine_rows<T: Scalar>(a: &[T], b: &[T], cols: usize, out: &mut [T]) {
    let eps: T = c(COS_EPS);
    for ((ar, br), o) in a.chunks_exact(cols).zip(b.chunks_exact(cols)).zip(out.iter_mut()) {
        let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        *o = dot / (norm(ar) * norm(br)).max(eps);
    }
}

pub fn layernorm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let n: T = c(cols as f64);
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * cols..(r + 1) * cols];
        for j in 0..cols {
            xh[j] = (xr[j] - mean) * rs;
            or[j] = xh[j] * gamma[j] + beta[j];
        }
    }
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Direct convolution. Each output channel accumulates over
/// (ky, kx, ci) in that order, then adds the bias.
pub fn conv2d_hwc<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom, out: &mut [T]) {
    let mut acc = vec![T::zero(); g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            acc.iter_mut().for_each(|v| *v = T::zero());
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xrow = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &w[wbase + ci * g.cout..][..g.cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
            let orow = &mut out[(oy * g.wo + ox) * g.cout..][..g.cout];
            for ((o, &a), &bv) in orow.iter_mut().zip(&acc).zip(b) {
                *o = a + bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_hwc_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let drow = &dout[(oy * g.wo + ox) * g.cout..][..g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xoff = (iy * g.w + ix) * g.cin;
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let wrow = &w[wbase + ci * g.cout..][..g.cout];
                        if let Some(dx) = dx.as_deref_mut() {
                            let s: T = wrow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                            dx[xoff + ci] = dx[xoff + ci] + s;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = x[xoff + ci];
                            let dwrow = &mut dw[wbase + ci * g.cout..][..g.cout];
                            for (d, &gv) in dwrow.iter_mut().zip(drow) {
                                *d = *d + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for drow in dout.chunks_exact(g.cout) {
            for (d, &gv) in db.iter_mut().zip(drow) {
                *d = *d + gv;
            }
        }
    }
}

/// Half-pixel-center bilinear sample positions for one axis:
/// `(lower index, upper index, upper weight)`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// `[H, W, C]` → `[Ho, Wo, C]`.
pub fn bilinear_resize_hwc<T: Scalar>(
    x: &[T],
    (h, w, ch): (usize, usize, usize),
    (ho, wo): (usize, usize),
    out: &mut [T],
) {
    if (h, w) == (ho, wo) {
        out.copy_from_slice(x);
        return;
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let wy: T = c(wy);
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let wx: T = c(wx);
            let a = &x[(y0 * w + x0) * ch..][..ch];
            let b = &x[(y0 * w + x1) * ch..][..ch];
            let cc = &x[(y1 * w + x0) * ch..][..ch];
            let d = &x[(y1 * w + x1) * ch..][..ch];
            let o = &mut out[(oy * wo + ox) * ch..][..ch];
            for k in 0..ch {
                let top = a[k] + wx * (b[k] - a[k]);
                let bot = cc[k] + wx * (d[k] - cc[k]);
                o[k] = top + wy * (bot - top);
            }
        }
    }
}

pub fn bilinear_resize_hwc_backward<T: Scalar>(
    dout: &[T],
    (h, w, ch): (usize, usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let wy: T = c(wy);
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let wx: T = c(wx);
            let g = &dout[(oy * wo + ox) * ch..][..ch];
            let taps = [
                ((y0 * w + x0) * ch, (T::one() - wy) * (T::one() - wx)),
                ((y0 * w + x1) * ch, (T::one() - wy) * wx),
                ((y1 * w + x0) * ch, wy * (T::one() - wx)),
                ((y1 * w + x1) * ch, wy * wx),
            ];
            for (off, wt) in taps {
                for k in 0..ch {
                    dx[off + k] = dx[off + k] + wt * g[k];
                }
            }
        }
    }
}

/// Adaptive average pooling bins for one axis: `[start, end)`.
pub fn area_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|o| (o * input / output, ((o + 1) * input).div_ceil(output)))
        .collect()
}

/// Area (adaptive average) downsampling `[H, W, C]` → `[Ho, Wo, C]`.
/// Each bin is summed in row-major order, then divided by its size.
pub fn area_resize_hwc<T: Scalar>(
    x: &[T],
    (h, w, ch): (usize, usize, usize),
    (ho, wo): (usize, usize),
    out: &mut [T],
) {
    if (h, w) == (ho, wo) {
        out.copy_from_slice(x);
        return;
    }
    let by = area_bins(h, ho);
    let bx = area_bins(w, wo);
    for (oy, &(ys, ye)) in by.iter().enumerate() {
        for (ox, &(xs, xe)) in bx.iter().enumerate() {
            let o = &mut out[(oy * wo + ox) * ch..][..ch];
            o.iter_mut().for_each(|v| *v = T::zero());
            for iy in ys..ye {
                for ix in xs..xe {
                    let src = &x[(iy * w + ix) * ch..][..ch];
                    for (a, &v) in o.iter_mut().zip(src) {
                        *a = *a + v;
                    }
                }
            }
            let count: T = c(((ye - ys) * (xe - xs)) as f64);
            o.iter_mut().for_each(|v| *v = *v / count);
        }
    }
}

pub fn area_resize_hwc_backward<T: Scalar>(
    dout: &[T],
    (h, w, ch): (usize, usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let by = area_bins(h, ho);
    let bx = area_bins(w, wo);
    for (oy, &(ys, ye)) in by.iter().enumerate() {
        for (ox, &(xs, xe)) in bx.iter().enumerate() {
            let g = &dout[(oy * wo + ox) * ch..][..ch];
            let count: T = c(((ye - ys) * (xe - xs)) as f64);
            for iy in ys..ye {
                for ix in xs..xe {
                    let d = &mut dx[(iy * w + ix) * ch..][..ch];
                    for (a, &gv) in d.iter_mut().zip(g) {
                        *a = *a + gv / count;
                    }
                }
            }
        }
    }
}
