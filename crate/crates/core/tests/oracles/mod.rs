//! Straight-line reference implementations used as test oracles. Plain
//! `std` only, written independently of the library code paths.

#![allow(dead_code)]

/// `v / (‖v‖ + 1e-8)` in f64.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-8;
    v.iter().map(|x| x / n).collect()
}

/// Nearest code after ℓ2 normalisation of both sides; first minimum wins.
pub fn nearest(codes: &[f64], dim: usize, e: &[f64]) -> u16 {
    let q = normalize(e);
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for (j, c) in codes.chunks(dim).enumerate() {
        let c = normalize(c);
        let d: f64 = q.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best {
            best = d;
            arg = j;
        }
    }
    arg as u16
}

/// Adaptive average pooling of a `[p, p, d]` map to `[h, w, d]`.
pub fn area_down(f: &[f64], p: usize, d: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * d];
    for oy in 0..h {
        let (y0, y1) = ((oy * p) / h, ((oy + 1) * p + h - 1) / h);
        for ox in 0..w {
            let (x0, x1) = ((ox * p) / w, ((ox + 1) * p + w - 1) / w);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..d {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += f[(y * p + x) * d + c];
                    }
                }
                out[(oy * w + ox) * d + c] = s / count;
            }
        }
    }
    out
}

/// Half-pixel bilinear upsampling of `[h, w, d]` to `[p, p, d]`.
pub fn bilinear_up(z: &[f64], h: usize, w: usize, d: usize, p: usize) -> Vec<f64> {
    if (h, w) == (p, p) {
        return z.to_vec();
    }
    let tap = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n as f64 / p as f64 - 0.5).max(0.0).min((n - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n - 1), s - lo as f64)
    };
    let mut out = vec![0.0; p * p * d];
    for oy in 0..p {
        let (y0, y1, wy) = tap(oy, h);
        for ox in 0..p {
            let (x0, x1, wx) = tap(ox, w);
            for c in 0..d {
                let at = |y: usize, x: usize| z[(y * w + x) * d + c];
                out[(oy * p + ox) * d + c] = (1.0 - wy) * ((1.0 - wx) * at(y0, x0) + wx * at(y0, x1))
                    + wy * ((1.0 - wx) * at(y1, x0) + wx * at(y1, x1));
            }
        }
    }
    out
}

/// Same-size `k×k` convolution, weights `[k, k, cin, cout]`, zero padding.
pub fn conv_same(x: &[f64], p: usize, d: usize, k: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; p * p * d];
    for oy in 0..p as isize {
        for ox in 0..p as isize {
            for co in 0..d {
                let mut s = bias[co];
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let (sy, sx) = (oy + ky - r, ox + kx - r);
                        if sy < 0 || sx < 0 || sy >= p as isize || sx >= p as isize {
                            continue;
                        }
                        for ci in 0..d {
                            let wi = (((ky as usize) * k + kx as usize) * d + ci) * d + co;
                            s += x[((sy as usize) * p + sx as usize) * d + ci] * weight[wi];
                        }
                    }
                }
                out[((oy as usize) * p + ox as usize) * d + co] = s;
            }
        }
    }
    out
}

/// Per-scale transform for the reference: `None` is the identity.
pub type Phi = Option<(usize, Vec<f64>, Vec<f64>)>;

/// Multi-scale residual encoding of one `[p, p, d]` latent, written out
/// step by step: downsample, quantize, look up, upsample, transform,
/// subtract.
pub fn multiscale_encode(latent: &[f64], p: usize, d: usize, codes: &[f64], scales: &[(usize, usize)], phis: &[Phi]) -> Vec<Vec<u16>> {
    let mut f = latent.to_vec();
    let mut out = Vec::new();
    for (k, &(h, w)) in scales.iter().enumerate() {
        let down = if (h, w) == (p, p) { f.clone() } else { area_down(&f, p, d, h, w) };
        let idx: Vec<u16> = down.chunks(d).map(|e| nearest(codes, d, e)).collect();
        if k + 1 < scales.len() {
            let z: Vec<f64> = idx.iter().flat_map(|&i| codes[i as usize * d..(i as usize + 1) * d].to_vec()).collect();
            let up = bilinear_up(&z, h, w, d, p);
            let t = match &phis[k] {
                Some((kernel, wgt, b)) => conv_same(&up, p, d, *kernel, wgt, b),
                None => up,
            };
            for (a, b) in f.iter_mut().zip(&t) {
                *a -= b;
            }
        }
        out.push(idx);
    }
    out
}

/// Harrell's concordance index by enumerating every ordered pair. A pair
/// is comparable when the earlier time is an observed event; higher risk
/// should go with the earlier time; tied risks count one half.
pub fn concordance(times: &[f64], events: &[bool], risks: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..times.len() {
        for j in 0..times.len() {
            if i == j || !events[i] || times[i] >= times[j] {
                continue;
            }
            den += 1.0;
            if risks[i] > risks[j] {
                num += 1.0;
            } else if risks[i] == risks[j] {
                num += 0.5;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}
