use rand::Rng;

use crate::diffmath::kernels::l2_normalize_rows;
use crate::diffmath::{graph::L2_EPS, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Largest vocabulary addressable by u16 indices.
pub const MAX_CODEBOOK_SIZE: usize = 1 << 16;

/// Per-step decay of the usage EMA.
pub const DEFAULT_EMA_DECAY: f64 = 0.9;
/// EMA assignment count below which a code counts as dead.
pub const DEFAULT_DEAD_THRESHOLD: f64 = 1e-2;

/// `C × d` learnable code vectors plus assignment bookkeeping. The vectors
/// live in the owning model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Codebook {
    pub param: ParamId,
    pub size: usize,
    pub dim: usize,
    pub ema_decay: f64,
    usage: Vec<u64>,
    ema: Vec<f64>,
}

/// Summary of code utilisation since the last usage reset.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStats {
    pub perplexity: f64,
    pub dead_count: usize,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_vectors(store, name, Tensor::randn(&[size, dim], 1.0, rng))
    }

    pub fn from_vectors<T: Scalar>(store: &mut ParamStore<T>, name: &str, vectors: Tensor<T>) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(Error::shape("codebook", format!("vectors must be [C, d], got {:?}", vectors.shape())));
        }
        let (size, dim) = (vectors.rows(), vectors.cols());
        if size == 0 {
            return Err(Error::EmptyCodebook);
        }
        if size > MAX_CODEBOOK_SIZE {
            return Err(Error::Config(format!("codebook size {size} exceeds u16 index range")));
        }
        let param = store.add(name, vectors);
        Ok(Self::attach(param, size, dim))
    }

    /// Bookkeeping for vectors already registered under `param`.
    pub fn attach(param: ParamId, size: usize, dim: usize) -> Self {
        Codebook { param, size, dim, ema_decay: DEFAULT_EMA_DECAY, usage: vec![0; size], ema: vec![1.0; size] }
    }

    pub fn vectors<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> &'a Tensor<T> {
        store.get(self.param)
    }

    /// Nearest code per latent row; increments usage counters.
    pub fn quantize<T: Scalar>(&mut self, store: &ParamStore<T>, latents: &[T]) -> Result<Vec<u16>> {
        let idx = quantize_rows(self.vectors(store).data(), self.dim, latents)?;
        self.record_usage(&idx);
        Ok(idx)
    }

    /// Rows of the codebook selected by `indices`, as `[len, d]`.
    pub fn lookup<T: Scalar>(&self, store: &ParamStore<T>, indices: &[u16]) -> Result<Tensor<T>> {
        lookup_rows(self.vectors(store), indices)
    }

    pub fn record_usage(&mut self, indices: &[u16]) {
        for &i in indices {
            self.usage[i as usize] += 1;
        }
    }

    /// Fold one step's assignment counts into the moving average.
    pub fn update_ema(&mut self, indices: &[u16]) {
        let mut counts = vec![0u64; self.size];
        for &i in indices {
            counts[i as usize] += 1;
        }
        let a = self.ema_decay;
        for (e, &c) in self.ema.iter_mut().zip(&counts) {
            *e = a * *e + (1.0 - a) * c as f64;
        }
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn stats(&self) -> CodebookStats {
        codebook_stats(&self.usage)
    }

    /// Replace every code whose EMA count is below `threshold` with a
    /// randomly drawn row of `recent` (`[rows, d]` latents).
    pub fn reinit_dead_codes<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        recent: &[T],
        threshold: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        if recent.len() % self.dim != 0 {
            return Err(Error::shape("reinit_dead_codes", format!("{} values not divisible by d={}", recent.len(), self.dim)));
        }
        let rows = recent.len() / self.dim;
        let dead: Vec<usize> = (0..self.size).filter(|&c| self.ema[c] < threshold).collect();
        if dead.is_empty() || rows == 0 {
            return Ok(0);
        }
        let d = self.dim;
        let v = store.get_mut(self.param);
        for &c in &dead {
            let r = rng.random_range(0..rows);
            v.data_mut()[c * d..(c + 1) * d].copy_from_slice(&recent[r * d..(r + 1) * d]);
            self.ema[c] = 1.0;
        }
        Ok(dead.len())
    }

    #[cfg(test)]
    pub(crate) fn set_ema(&mut self, value: f64) {
        self.ema.iter_mut().for_each(|e| *e = value);
    }
}

/// Perplexity, dead count and histogram of a usage vector. With no
/// assignments the perplexity is reported as 0.
pub fn codebook_stats(usage: &[u64]) -> CodebookStats {
    let total: u64 = usage.iter().sum();
    let dead_count = usage.iter().filter(|&&u| u == 0).count();
    let perplexity = if total == 0 {
        0.0
    } else {
        let t = total as f64;
        let h: f64 = usage
            .iter()
            .filter(|&&u| u > 0)
            .map(|&u| {
                let p = u as f64 / t;
                -p * p.ln()
            })
            .sum();
        h.exp()
    };
    CodebookStats { perplexity, dead_count, usage: usage.to_vec() }
}

/// `ℓ2`-normalized copy of row-major `[rows, d]` vectors.
pub fn normalize_rows<T: Scalar>(values: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); values.len()];
    l2_normalize_rows(values, dim, T::from_f64_lossy(L2_EPS), &mut out);
    out
}

/// Index of the nearest normalized code for one normalized query.
/// Distances are accumulated in dimension order; ties go to the lowest
/// index.
#[inline]
pub fn nearest_normalized<T: Scalar>(codes: &[T], dim: usize, query: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (j, code) in codes.chunks_exact(dim).enumerate() {
        let mut dist = T::zero();
        for (&a, &b) in query.iter().zip(code) {
            let diff = a - b;
            dist = dist + diff * diff;
        }
        if dist < best_d {
            best_d = dist;
            best = j;
        }
    }
    best
}

/// Quantize row-major `[rows, d]` latents against pre-normalized codes.
pub fn quantize_normalized<T: Scalar>(codes: &[T], dim: usize, latents: &[T]) -> Result<Vec<u16>> {
    if codes.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    if dim == 0 || latents.len() % dim != 0 || codes.len() % dim != 0 {
        return Err(Error::shape("quantize", format!("latent length {} with d={dim}", latents.len())));
    }
    let q = normalize_rows(latents, dim);
    Ok(q.chunks_exact(dim).map(|row| nearest_normalized(codes, dim, row) as u16).collect())
}

/// `argmin_j ‖ℓ2(e) − ℓ2(v_j)‖` for every latent row.
pub fn quantize_rows<T: Scalar>(vectors: &[T], dim: usize, latents: &[T]) -> Result<Vec<u16>> {
    if vectors.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    if dim == 0 || vectors.len() % dim != 0 {
        return Err(Error::shape("quantize", format!("codebook length {} with d={dim}", vectors.len())));
    }
    quantize_normalized(&normalize_rows(vectors, dim), dim, latents)
}

pub fn lookup_rows<T: Scalar>(vectors: &Tensor<T>, indices: &[u16]) -> Result<Tensor<T>> {
    let (size, d) = (vectors.rows(), vectors.cols());
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        let i = i as usize;
        if i >= size {
            return Err(Error::IndexOutOfRange { index: i, size });
        }
        out.extend_from_slice(vectors.row(i));
    }
    Tensor::new(vec![indices.len(), d], out)
}
