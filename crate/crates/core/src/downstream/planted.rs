//! Toy slide benchmark with a planted label: slides are crops of
//! synthetic regions and the label follows the projection of their mean
//! tile feature on a hidden direction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adapter::tile_target;
use super::survival::{quantile_cuts, time_bin};
use super::train::{BagTiles, Label, SlideBag};
use crate::diffmath::rng::labeled_rng;
use crate::error::{Error, Result};
use crate::msvq::{shuffled, tile_token, Tokenizer};
use crate::synth::{SynthBackbone, REGION_SIDE};

/// What the planted score measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlantedSignal {
    /// Mean tile feature projected on a hidden unit direction.
    Projection,
    /// Fraction of tiles whose tile-level code lies in a hidden half of
    /// the codebook.
    Composition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub signal: PlantedSignal,
    pub bags: usize,
    /// Side of the square crop taken from each region.
    pub crop: usize,
    /// Region id of the first slide; keeps slides apart from regions
    /// used elsewhere.
    pub first_region: u64,
    /// Fraction of slides nearest the median score that are dropped,
    /// leaving a gap between the classes.
    pub margin: f64,
    /// Fraction of slides whose event is censored.
    pub censor_rate: f64,
    /// Strength of the score in the log hazard.
    pub hazard_scale: f64,
    pub bins: usize,
    /// Seed of the hidden direction, censoring and event times.
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            signal: PlantedSignal::Projection,
            bags: 80,
            crop: 8,
            first_region: 1_000_000,
            margin: 0.0,
            censor_rate: 0.3,
            hazard_scale: 2.0,
            bins: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedBenchmark {
    pub classify: Vec<SlideBag>,
    pub survival: Vec<SlideBag>,
    /// Planted score of each slide, in generation order.
    pub scores: Vec<f64>,
}

/// Hidden unit direction in feature space.
pub fn planted_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = labeled_rng(seed, "planted-direction", 0);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Hidden half of the codebook.
pub fn planted_codes(codebook_size: usize, seed: u64) -> Vec<bool> {
    let mut rng = labeled_rng(seed, "planted-codes", 0);
    let mut member = vec![false; codebook_size];
    for &i in &shuffled(codebook_size, &mut rng)[..codebook_size / 2] {
        member[i] = true;
    }
    member
}

/// Build the benchmark. Tiles enter the bags as dequantized latents of
/// `tok`; projection scores use the uncompressed tile features.
pub fn planted_benchmark(backbone: &SynthBackbone, tok: &Tokenizer<f32>, cfg: &PlantedConfig) -> Result<PlantedBenchmark> {
    if cfg.bags < 4 || cfg.crop == 0 || cfg.crop > REGION_SIDE {
        return Err(Error::Config(format!("planted benchmark needs >= 4 bags and a crop in 1..={REGION_SIDE}")));
    }
    if !(0.0..1.0).contains(&cfg.margin) || !(0.0..1.0).contains(&cfg.censor_rate) {
        return Err(Error::Config("margin and censor rate must lie in [0, 1)".into()));
    }
    let dir = planted_direction(backbone.config().dim, cfg.seed);
    let codes = planted_codes(tok.cfg.codebook_size, cfg.seed);
    let mut latents = Vec::with_capacity(cfg.bags);
    let mut coords = Vec::with_capacity(cfg.bags);
    let mut scores = Vec::with_capacity(cfg.bags);
    for b in 0..cfg.bags {
        let region = backbone.generate_region(cfg.first_region + b as u64);
        let crop: Vec<_> = region
            .into_iter()
            .filter(|t| (t.coords.0 as usize) < cfg.crop && (t.coords.1 as usize) < cfg.crop)
            .collect();
        let maps = crop.iter().map(|t| tok.msvq_encode(t)).collect::<Result<Vec<_>>>()?;
        let mut s = 0.0;
        for (t, m) in crop.iter().zip(&maps) {
            s += match cfg.signal {
                PlantedSignal::Projection => tile_target(t).iter().zip(&dir).map(|(&a, b)| a as f64 * b).sum::<f64>(),
                PlantedSignal::Composition => codes[tile_token(m)? as usize] as u8 as f64,
            };
        }
        scores.push(s / crop.len() as f64);
        coords.push(crop.iter().map(|t| t.coords).collect::<Vec<_>>());
        latents.push(maps.iter().map(|m| tok.reconstruct_latent(m)).collect::<Result<Vec<_>>>()?);
    }

    // label by rank so the classes split evenly
    let mut order: Vec<usize> = (0..cfg.bags).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank = vec![0usize; cfg.bags];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let half = cfg.bags / 2;
    let drop = ((cfg.bags as f64 * cfg.margin) / 2.0).round() as usize;

    let mean = scores.iter().sum::<f64>() / cfg.bags as f64;
    let sd = (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / cfg.bags as f64).sqrt().max(1e-12);
    let mut rng = labeled_rng(cfg.seed, "planted-survival", 0);
    let mut times = Vec::with_capacity(cfg.bags);
    let mut events = Vec::with_capacity(cfg.bags);
    for &s in &scores {
        let z = (s - mean) / sd;
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let t = -u.ln() * (-cfg.hazard_scale * z).exp();
        let censored = rng.random_bool(cfg.censor_rate);
        times.push(if censored { t * rng.random_range(0.0..1.0) } else { t });
        events.push(!censored);
    }
    let cuts = quantile_cuts(&times, &events, cfg.bins)?;

    let mut classify = Vec::new();
    let mut survival = Vec::with_capacity(cfg.bags);
    for b in 0..cfg.bags {
        let tiles = BagTiles::Latents(latents[b].clone());
        let label = Label::Survival { time: times[b], event: events[b], bin: time_bin(times[b], &cuts) };
        survival.push(SlideBag::new(tiles.clone(), coords[b].clone(), label)?);
        if rank[b] + drop < half || rank[b] >= half + drop {
            classify.push(SlideBag::new(tiles, coords[b].clone(), Label::Class((rank[b] >= half) as usize))?);
        }
    }
    Ok(PlantedBenchmark { classify, survival, scores })
}
