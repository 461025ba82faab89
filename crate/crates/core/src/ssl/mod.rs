//! Slide-level self-supervised pretraining with a frozen tokenizer as the
//! target: bag-level token-frequency matching through gated attention
//! pooling, and masked tile modeling with a rotary-position transformer.

mod abmil;
pub mod rope;
mod train;
mod wsi;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::msvq::{tile_token, MultiScaleTokenMap, Tokenizer};
use crate::synth::{TileST, REGION_SIDE};

pub use abmil::{abmil_forward, AbmilConfig, AbmilOutput, GatedAbmil};
pub use rope::{rope2d_apply, RopeTable, DEFAULT_ROPE_BASE};
pub use train::{
    abmil_ssl_step, empirical_chance, mim_eval, mim_ssl_step, pretrain, sample_mask, write_metrics_csv, AbmilStepReport,
    MaskSpec, MimStepReport, Objective, PretrainConfig, PretrainOutcome, SslEpochMetrics, SslModel,
};
pub use wsi::{WsiConfig, WsiTransformer};

/// Which scale of the token maps supervises pretraining.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetScale {
    /// The leading `1×1` scale: one token per tile.
    #[default]
    Coarsest,
    /// Histogram over every patch token of the final scale.
    Finest,
}

/// One square region of tiles with their token maps and input features.
#[derive(Debug, Clone)]
pub struct RegionBag {
    pub side: usize,
    /// `(row, col)` of each tile within the region.
    pub coords: Vec<(usize, usize)>,
    /// Token maps from the frozen tokenizer; may be empty when the bag
    /// only carries features.
    pub maps: Vec<MultiScaleTokenMap>,
    /// `[n, F]` per-tile model inputs.
    pub features: Tensor<f32>,
}

impl RegionBag {
    pub fn new(side: usize, coords: Vec<(usize, usize)>, maps: Vec<MultiScaleTokenMap>, features: Tensor<f32>) -> Result<Self> {
        let n = side * side;
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        if coords.len() != n || features.rank() != 2 || features.rows() != n {
            return Err(Error::Data(format!(
                "region of side {side} needs {n} tiles, got {} coords and features {:?}",
                coords.len(),
                features.shape()
            )));
        }
        if !maps.is_empty() && maps.len() != n {
            return Err(Error::Data(format!("region has {} token maps for {n} tiles", maps.len())));
        }
        let mut seen = HashSet::with_capacity(n);
        for &(r, c) in &coords {
            if r >= side || c >= side {
                return Err(Error::Data(format!("tile coord ({r},{c}) outside a {side}x{side} region")));
            }
            if !seen.insert((r, c)) {
                return Err(Error::Data(format!("duplicate tile coord ({r},{c})")));
            }
        }
        Ok(RegionBag { side, coords, maps, features })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Tile-level tokens in tile order.
    pub fn tile_tokens(&self) -> Result<Vec<u16>> {
        if self.maps.is_empty() {
            return Err(Error::Data("region carries no token maps".into()));
        }
        self.maps.iter().map(tile_token).collect()
    }

    /// Coordinates as floats for the rotary embedding.
    pub fn rope_coords(&self) -> Vec<(f64, f64)> {
        self.coords.iter().map(|&(r, c)| (r as f64, c as f64)).collect()
    }
}

/// Normalized token histogram of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    pub q: Vec<f64>,
}

impl SoftTarget {
    pub fn entropy(&self) -> f64 {
        entropy(&self.q)
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(q: &[f64]) -> f64 {
    q.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// `−Σ q_c log p_c`.
pub fn soft_cross_entropy(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).filter(|(&qc, _)| qc > 0.0).map(|(&qc, &pc)| -qc * pc.ln()).sum()
}

pub fn region_soft_target(region: &RegionBag, codebook_size: usize, scale: TargetScale) -> Result<SoftTarget> {
    let tokens: Vec<u16> = match scale {
        TargetScale::Coarsest => region.tile_tokens()?,
        TargetScale::Finest => {
            if region.maps.is_empty() {
                return Err(Error::Data("region carries no token maps".into()));
            }
            region
                .maps
                .iter()
                .flat_map(|m| m.maps.last().expect("non-empty map").indices.iter().copied())
                .collect()
        }
    };
    let mut q = vec![0.0; codebook_size];
    for &t in &tokens {
        let slot = q
            .get_mut(t as usize)
            .ok_or(Error::IndexOutOfRange { index: t as usize, size: codebook_size })?;
        *slot += 1.0;
    }
    let n = tokens.len() as f64;
    q.iter_mut().for_each(|v| *v /= n);
    Ok(SoftTarget { q })
}

/// Mean over patches of a dequantized `[p, p, d]` latent.
pub fn mean_pool_latent(latent: &Tensor<f32>) -> Vec<f32> {
    let d = *latent.shape().last().expect("latent rank");
    let n = latent.len() / d;
    let mut out = vec![0f64; d];
    for row in latent.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v as f64;
        }
    }
    out.into_iter().map(|v| (v / n as f64) as f32).collect()
}

/// Encode `tiles` of one region with the frozen tokenizer and compute
/// per-tile inputs from each dequantized latent with `features`.
///
/// Tile coordinates are taken as `(col, row)` within the region.
pub fn build_region(
    tok: &Tokenizer<f32>,
    tiles: &[TileST],
    side: usize,
    features: &dyn Fn(&Tensor<f32>) -> Result<Vec<f32>>,
) -> Result<RegionBag> {
    let mut maps = Vec::with_capacity(tiles.len());
    let mut coords = Vec::with_capacity(tiles.len());
    let mut data = Vec::new();
    let mut width = None;
    for t in tiles {
        let (c, r) = t.coords;
        if r < 0 || c < 0 {
            return Err(Error::Data(format!("tile {} has negative region coords", t.tile_id)));
        }
        coords.push((r as usize, c as usize));
        let map = tok.msvq_encode(t)?;
        let f = features(&tok.reconstruct_latent(&map)?)?;
        if *width.get_or_insert(f.len()) != f.len() {
            return Err(Error::Data("feature extractor returned varying widths".into()));
        }
        data.extend(f);
        maps.push(map);
    }
    let features = Tensor::new(vec![tiles.len(), width.unwrap_or(0)], data)?;
    RegionBag::new(side, coords, maps, features)
}

/// [`build_region`] with mean-pooled latents as features on full-size
/// regions.
pub fn build_region_default(tok: &Tokenizer<f32>, tiles: &[TileST]) -> Result<RegionBag> {
    build_region(tok, tiles, REGION_SIDE, &|l| Ok(mean_pool_latent(l)))
}
