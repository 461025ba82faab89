//! Deterministic stand-in for a frozen feature backbone.
//!
//! Tokens are convex mixtures of `M` prototypes spanning an `r`-dimensional
//! subspace of `R^D`. Mixture weights come from a smooth random field over
//! slide coordinates (random Fourier features with length scale `σ`,
//! measured in patches), so neighbouring patches and neighbouring tiles
//! share structure.

mod pvqf;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::rng::labeled_rng;
use crate::error::{Error, Result};

pub use pvqf::{open_feature_file, read_feature_file, write_feature_file, FeatureReader, FeatureWriter, PVQF_MAGIC, PVQF_VERSION};

/// Tiles per region side; a region is `REGION_SIDE²` tiles.
pub const REGION_SIDE: usize = 16;
pub const REGION_TILES: usize = REGION_SIDE * REGION_SIDE;

/// One tile's `p×p` grid of `D`-dim spatial tokens, row-major, plus an
/// optional summary token.
#[derive(Debug, Clone, PartialEq)]
pub struct TileST {
    pub tile_id: u64,
    pub coords: (i32, i32),
    pub grid: usize,
    pub dim: usize,
    pub tokens: Vec<f32>,
    pub cls: Option<Vec<f32>>,
}

impl TileST {
    pub fn new(tile_id: u64, coords: (i32, i32), grid: usize, dim: usize, tokens: Vec<f32>, cls: Option<Vec<f32>>) -> Result<Self> {
        let tile = TileST { tile_id, coords, grid, dim, tokens, cls };
        tile.validate()?;
        Ok(tile)
    }

    pub fn n(&self) -> usize {
        self.grid * self.grid
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.dim == 0 {
            return Err(Error::Data("tile grid and dim must be positive".into()));
        }
        if self.tokens.len() != self.n() * self.dim {
            return Err(Error::Data(format!(
                "tile {} has {} values, expected {}x{}",
                self.tile_id,
                self.tokens.len(),
                self.n(),
                self.dim
            )));
        }
        if let Some(c) = &self.cls {
            if c.len() != self.dim {
                return Err(Error::Data(format!("tile {} cls has {} values", self.tile_id, c.len())));
            }
        }
        let finite = self.tokens.iter().chain(self.cls.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data(format!("tile {} has non-finite values", self.tile_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub grid: usize,
    pub prototypes: usize,
    /// Length scale of the mixture field in patch units; `f64::INFINITY`
    /// makes the field constant.
    pub smoothness: f64,
    pub noise: f64,
    pub intrinsic_dim: usize,
    /// Softmax temperature turning field values into mixture weights.
    pub temperature: f64,
    pub fourier_features: usize,
    /// Half of the field's frequencies use length scale
    /// `smoothness · detail_ratio`, adding within-tile detail on top of the
    /// slow component.
    pub detail_ratio: f64,
    pub with_cls: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            dim: 64,
            grid: 14,
            prototypes: 8,
            smoothness: 12.0,
            noise: 0.01,
            intrinsic_dim: 16,
            temperature: 0.5,
            fourier_features: 32,
            detail_ratio: 0.25,
            with_cls: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.grid == 0 {
            return bad("synth dim and grid must be positive");
        }
        if self.intrinsic_dim == 0 || self.intrinsic_dim > self.dim {
            return bad("synth intrinsic_dim must be in 1..=dim");
        }
        if self.prototypes == 0 {
            return bad("synth prototypes must be positive");
        }
        if self.smoothness.is_nan() || self.smoothness <= 0.0 {
            return bad("synth smoothness must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("synth noise must be a finite value >= 0");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("synth temperature must be positive");
        }
        if !(self.detail_ratio > 0.0 && self.detail_ratio <= 1.0) {
            return bad("synth detail_ratio must be in (0, 1]");
        }
        if self.fourier_features == 0 {
            return bad("synth fourier_features must be positive");
        }
        Ok(())
    }
}

/// Precomputed generator state: prototypes, field frequencies and the
/// summary projection, all drawn once from the seed.
#[derive(Debug, Clone)]
pub struct SynthBackbone {
    cfg: SynthConfig,
    /// `[M, D]`
    prototypes: Vec<f64>,
    /// `[F, 2]` frequencies, already divided by the length scale.
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
    /// `[M, F]`
    amps: Vec<f64>,
    /// `[D, D]`, applied as `cls = P · mean`.
    cls_proj: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `k` orthonormal vectors in `R^dim` by Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(k: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

impl SynthBackbone {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, r, m, f) = (cfg.dim, cfg.intrinsic_dim, cfg.prototypes, cfg.fourier_features);
        let mut rng = labeled_rng(cfg.seed, "synth-prototypes", 0);
        let basis = orthonormal_basis(r, d, &mut rng);
        // Coefficients scaled so each prototype coordinate has unit variance.
        let coef_scale = (d as f64 / r as f64).sqrt();
        let mut prototypes = vec![0.0; m * d];
        for proto in prototypes.chunks_exact_mut(d) {
            for b in &basis {
                let c = normal(&mut rng) * coef_scale;
                for (p, bv) in proto.iter_mut().zip(b) {
                    *p += c * bv;
                }
            }
        }

        let mut rng = labeled_rng(cfg.seed, "synth-field", 0);
        let inv_len = if cfg.smoothness.is_infinite() { 0.0 } else { 1.0 / cfg.smoothness };
        let freqs = (0..f)
            .map(|i| {
                let s = if i % 2 == 1 { inv_len / cfg.detail_ratio } else { inv_len };
                (normal(&mut rng) * s, normal(&mut rng) * s)
            })
            .collect();
        let phases = (0..f).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let amps = (0..m * f).map(|_| normal(&mut rng)).collect();

        let mut rng = labeled_rng(cfg.seed, "synth-cls", 0);
        let g_scale = 0.1 / (d as f64).sqrt();
        let mut cls_proj: Vec<f64> = (0..d * d).map(|_| normal(&mut rng) * g_scale).collect();
        for i in 0..d {
            cls_proj[i * d + i] += 1.0;
        }
        Ok(SynthBackbone { cfg, prototypes, freqs, phases, amps, cls_proj })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Mixture weights at slide position `(u, v)` in patch units.
    fn weights(&self, u: f64, v: f64, out: &mut [f64]) {
        let f = self.cfg.fourier_features;
        let norm = (2.0 / f as f64).sqrt();
        let basis: Vec<f64> = self
            .freqs
            .iter()
            .zip(&self.phases)
            .map(|(&(wu, wv), &ph)| (wu * u + wv * v + ph).cos() * norm)
            .collect();
        for (m, o) in out.iter_mut().enumerate() {
            let field: f64 = self.amps[m * f..(m + 1) * f].iter().zip(&basis).map(|(a, b)| a * b).sum();
            *o = field / self.cfg.temperature;
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    /// Tile whose top-left patch sits at slide position `origin`.
    fn tile_at(&self, tile_id: u64, coords: (i32, i32), origin: (f64, f64), noise_label: &str) -> TileST {
        let (d, p, m) = (self.cfg.dim, self.cfg.grid, self.cfg.prototypes);
        let mut noise_rng = labeled_rng(self.cfg.seed, noise_label, tile_id);
        let mut tokens = vec![0f32; p * p * d];
        let mut w = vec![0.0; m];
        let mut acc = vec![0.0f64; d];
        let mut mean = vec![0.0f64; d];
        for row in 0..p {
            for col in 0..p {
                self.weights(origin.0 + col as f64, origin.1 + row as f64, &mut w);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (wm, proto) in w.iter().zip(self.prototypes.chunks_exact(d)) {
                    for (a, pv) in acc.iter_mut().zip(proto) {
                        *a += wm * pv;
                    }
                }
                let out = &mut tokens[(row * p + col) * d..][..d];
                for ((o, a), mu) in out.iter_mut().zip(&acc).zip(mean.iter_mut()) {
                    let v = if self.cfg.noise > 0.0 { a + self.cfg.noise * normal(&mut noise_rng) } else { *a };
                    *o = v as f32;
                    *mu += *o as f64;
                }
            }
        }
        let cls = self.cfg.with_cls.then(|| {
            let n = (p * p) as f64;
            mean.iter_mut().for_each(|v| *v /= n);
            (0..d)
                .map(|i| self.cls_proj[i * d..(i + 1) * d].iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() as f32)
                .collect()
        });
        TileST { tile_id, coords, grid: p, dim: d, tokens, cls }
    }

    /// Standalone tile at a seed-determined slide position.
    pub fn generate_tile(&self, tile_id: u64) -> TileST {
        let mut rng = labeled_rng(self.cfg.seed, "synth-tile-origin", tile_id);
        let origin = (rng.random_range(0.0..1e5), rng.random_range(0.0..1e5));
        let p = self.cfg.grid as f64;
        let coords = ((origin.0 / p) as i32, (origin.1 / p) as i32);
        self.tile_at(tile_id, coords, origin, "synth-tile-noise")
    }

    /// `16×16` tiles cut from one continuous field, in row-major grid
    /// order with `coords = (col, row)`.
    pub fn generate_region(&self, region_id: u64) -> Vec<TileST> {
        let mut rng = labeled_rng(self.cfg.seed, "synth-region-origin", region_id);
        let origin: (f64, f64) = (rng.random_range(0.0..1e5), rng.random_range(0.0..1e5));
        let p = self.cfg.grid as f64;
        (0..REGION_TILES)
            .map(|k| {
                let (row, col) = (k / REGION_SIDE, k % REGION_SIDE);
                let id = region_id * REGION_TILES as u64 + k as u64;
                let at = (origin.0 + col as f64 * p, origin.1 + row as f64 * p);
                self.tile_at(id, (col as i32, row as i32), at, "synth-region-noise")
            })
            .collect()
    }
}

pub fn generate_tile(cfg: &SynthConfig, tile_id: u64) -> Result<TileST> {
    Ok(SynthBackbone::new(*cfg)?.generate_tile(tile_id))
}

pub fn generate_region(cfg: &SynthConfig, region_id: u64) -> Result<Vec<TileST>> {
    Ok(SynthBackbone::new(*cfg)?.generate_region(region_id))
}
