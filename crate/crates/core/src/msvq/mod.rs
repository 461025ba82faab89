//! Multi-scale residual quantization over a shared codebook.
//!
//! Encoding walks the schedule from coarse to fine: the running residual
//! is area-downsampled to the scale's grid and quantized, the looked-up
//! codes are bilinearly upsampled back to `p×p`, passed through that
//! scale's transform `φ_k` and subtracted. Reconstruction sums the same
//! per-scale terms.

mod schedule;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::nn::{Conv2d, TransformerConfig};
use crate::diffmath::rng::labeled_rng;
use crate::diffmath::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::synth::TileST;
use crate::vq::codebook::{lookup_rows, normalize_rows, quantize_normalized};
use crate::vq::{Codebook, VqDecoder, VqEncoder};

pub use schedule::ScaleSchedule;
pub use train::{check_loss_gradients, fit, msvq_train_step, reconstruction_fidelity, train_step, EpochMetrics, FitConfig, FixedPoint, LossVars, Treatment};

/// One scale's index grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u16>,
}

/// `K` index grids for one tile, in schedule order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleTokenMap {
    pub maps: Vec<IndexGrid>,
}

impl MultiScaleTokenMap {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(|m| (m.h, m.w)).collect()
    }

    pub fn conforms_to(&self, sched: &ScaleSchedule) -> bool {
        self.resolutions() == sched.scales() && self.maps.iter().all(|m| m.indices.len() == m.h * m.w)
    }

    pub fn max_index(&self) -> Option<u16> {
        self.maps.iter().flat_map(|m| m.indices.iter().copied()).max()
    }

    /// All indices flattened in schedule order.
    pub fn flat(&self) -> Vec<u16> {
        self.maps.iter().flat_map(|m| m.indices.iter().copied()).collect()
    }

    /// Split a flat index run back into grids following `sched`.
    pub fn from_flat(sched: &ScaleSchedule, flat: &[u16]) -> Result<Self> {
        if flat.len() != sched.tokens_per_tile() {
            return Err(Error::Schedule(format!(
                "{} indices do not fit schedule {sched} ({} per tile)",
                flat.len(),
                sched.tokens_per_tile()
            )));
        }
        let mut at = 0;
        let maps = sched
            .scales()
            .iter()
            .map(|&(h, w)| {
                let g = IndexGrid { h, w, indices: flat[at..at + h * w].to_vec() };
                at += h * w;
                g
            })
            .collect();
        Ok(MultiScaleTokenMap { maps })
    }
}

/// Tile-level token: the single index of the leading `1×1` scale.
pub fn tile_token(r: &MultiScaleTokenMap) -> Result<u16> {
    match r.maps.first() {
        Some(m) if (m.h, m.w) == (1, 1) => Ok(m.indices[0]),
        _ => Err(Error::Schedule("tile-level token needs a leading 1x1 scale".into())),
    }
}

/// Patch-level tokens: the final full-resolution grid.
pub fn patch_tokens(r: &MultiScaleTokenMap, grid: usize) -> Result<&IndexGrid> {
    match r.maps.last() {
        Some(m) if (m.h, m.w) == (grid, grid) => Ok(m),
        _ => Err(Error::Schedule(format!("patch-level tokens need a final {grid}x{grid} scale"))),
    }
}

/// One scale's transform; `None` is a fixed identity.
#[derive(Debug, Clone)]
pub struct ScaleTransform {
    pub hw: (usize, usize),
    pub conv: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ScaleTransforms {
    pub grid: usize,
    pub entries: Vec<ScaleTransform>,
}

impl ScaleTransforms {
    /// Identity-initialised `k×k` convolutions for every scale. A schedule
    /// holding only `p×p` gets a fixed identity instead, which makes it
    /// plain patch-level VQ.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, sched: &ScaleSchedule, grid: usize, channels: usize, kernel: usize) -> Self {
        let multi = sched.len() > 1;
        let entries = sched
            .scales()
            .iter()
            .map(|&hw| {
                let conv = (multi || hw != (grid, grid))
                    .then(|| Conv2d::identity(store, &format!("{name}.{}x{}", hw.0, hw.1), channels, kernel));
                ScaleTransform { hw, conv }
            })
            .collect();
        ScaleTransforms { grid, entries }
    }

    pub fn get(&self, hw: (usize, usize)) -> Result<Option<&Conv2d>> {
        let entry = self.entries.iter().find(|e| e.hw == hw);
        if entry.is_none() && hw == (self.grid, self.grid) {
            return Ok(None);
        }
        entry
            .map(|e| e.conv.as_ref())
            .ok_or_else(|| Error::Schedule(format!("no transform for scale {}x{}", hw.0, hw.1)))
    }

    /// `φ(x)` for `x: [p, p, d]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hw: (usize, usize), x: Var) -> Result<Var> {
        match self.get(hw)? {
            Some(conv) => conv.forward(g, store, x),
            None => Ok(x),
        }
    }
}

/// Architecture and quantizer geometry of a tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Feature dimension `D` of the source tokens.
    pub dim: usize,
    /// Patch grid side `p`.
    pub grid: usize,
    /// Code dimension `d`.
    pub code_dim: usize,
    /// Codebook size `C`.
    pub codebook_size: usize,
    pub enc_hidden: usize,
    pub decoder: TransformerConfig,
    pub beta: f64,
    pub schedule: ScaleSchedule,
    pub phi_kernel: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    /// Desk-scale geometry: `D = 64`, `C = 512`, `d = 16`.
    fn default() -> Self {
        TokenizerConfig {
            dim: 64,
            grid: 14,
            code_dim: 16,
            codebook_size: 512,
            enc_hidden: 128,
            decoder: TransformerConfig { width: 64, depth: 2, heads: 4, mlp_ratio: 2 },
            beta: 0.25,
            schedule: ScaleSchedule::default_for(14),
            phi_kernel: 3,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    /// Full-size geometry: `D = 1024`, `C = 8192`, `d = 16`, decoder width
    /// 768 with three blocks.
    pub fn full_scale() -> Self {
        TokenizerConfig {
            dim: 1024,
            grid: 14,
            code_dim: 16,
            codebook_size: 8192,
            enc_hidden: 512,
            decoder: TransformerConfig { width: 768, depth: 3, heads: 12, mlp_ratio: 4 },
            beta: 0.25,
            schedule: ScaleSchedule::default_for(14),
            phi_kernel: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.grid == 0 || self.code_dim == 0 || self.enc_hidden == 0 {
            return bad("tokenizer dims must be positive".into());
        }
        if self.codebook_size == 0 {
            return Err(Error::EmptyCodebook);
        }
        if self.codebook_size > crate::vq::MAX_CODEBOOK_SIZE {
            return bad(format!("codebook size {} exceeds u16 range", self.codebook_size));
        }
        if self.phi_kernel % 2 == 0 {
            return bad(format!("phi kernel {} must be odd", self.phi_kernel));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be finite and >= 0", self.beta));
        }
        self.decoder.validate()?;
        self.schedule.check_grid(self.grid)
    }

    pub fn n(&self) -> usize {
        self.grid * self.grid
    }
}

/// Encoder, shared codebook, per-scale transforms and decoder in one
/// parameter store.
#[derive(Debug, Clone)]
pub struct Tokenizer<T> {
    pub cfg: TokenizerConfig,
    pub store: ParamStore<T>,
    pub encoder: VqEncoder,
    pub codebook: Codebook,
    pub transforms: ScaleTransforms,
    pub decoder: VqDecoder,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = VqEncoder::new(
            &mut store,
            "encoder",
            cfg.dim,
            cfg.enc_hidden,
            cfg.code_dim,
            &mut labeled_rng(cfg.seed, "tokenizer-encoder", 0),
        );
        let codebook = Codebook::new(
            &mut store,
            "codebook",
            cfg.codebook_size,
            cfg.code_dim,
            &mut labeled_rng(cfg.seed, "tokenizer-codebook", 0),
        )?;
        let transforms = ScaleTransforms::new(&mut store, "phi", &cfg.schedule, cfg.grid, cfg.code_dim, cfg.phi_kernel);
        let decoder = VqDecoder::new(
            &mut store,
            "decoder",
            cfg.code_dim,
            cfg.dim,
            cfg.n(),
            cfg.decoder,
            &mut labeled_rng(cfg.seed, "tokenizer-decoder", 0),
        )?;
        Ok(Tokenizer { cfg, store, encoder, codebook, transforms, decoder })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Tokenizer<U> {
        Tokenizer {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            codebook: self.codebook.clone(),
            transforms: self.transforms.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Mark every parameter untrainable.
    pub fn freeze(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_trainable(id, false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_count() == 0
    }

    pub fn check_tile(&self, tile: &TileST) -> Result<()> {
        if tile.dim != self.cfg.dim || tile.grid != self.cfg.grid {
            return Err(Error::shape(
                "tokenizer",
                format!(
                    "tile {} is {}x{}x{}, tokenizer expects {}x{}x{}",
                    tile.tile_id, tile.grid, tile.grid, tile.dim, self.cfg.grid, self.cfg.grid, self.cfg.dim
                ),
            ));
        }
        Ok(())
    }

    pub fn tile_tensor(&self, tile: &TileST) -> Result<Tensor<T>> {
        self.check_tile(tile)?;
        Tensor::new(vec![tile.n(), tile.dim], tile.tokens.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
    }

    /// Encoder latent of one tile as `[p, p, d]`.
    pub fn encode(&self, tile: &TileST) -> Result<Tensor<T>> {
        let p = self.cfg.grid;
        self.encoder.encode(&self.store, self.tile_tensor(tile)?)?.reshape(&[p, p, self.cfg.code_dim])
    }

    /// Single-scale indices of one tile (`p×p`, row-major).
    pub fn quantize(&self, tile: &TileST) -> Result<Vec<u16>> {
        let latent = self.encode(tile)?;
        quantize_normalized(&self.normalized_codes(), self.cfg.code_dim, latent.data())
    }

    pub fn normalized_codes(&self) -> Vec<T> {
        normalize_rows(self.codebook.vectors(&self.store).data(), self.cfg.code_dim)
    }

    /// Multi-scale token map for `tile` under the configured schedule.
    pub fn msvq_encode(&self, tile: &TileST) -> Result<MultiScaleTokenMap> {
        self.msvq_encode_with(tile, &self.cfg.schedule)
    }

    pub fn msvq_encode_with(&self, tile: &TileST, sched: &ScaleSchedule) -> Result<MultiScaleTokenMap> {
        let latent = self.encode(tile)?;
        msvq_encode_latent(self, sched, &latent)
    }

    /// Residual-sum latent reconstruction `[p, p, d]` from a token map.
    pub fn reconstruct_latent(&self, r: &MultiScaleTokenMap) -> Result<Tensor<T>> {
        msvq_reconstruct_latent(self, r)
    }

    /// Decoder output `[n, D]` for a `[p, p, d]` latent.
    pub fn decode_latent(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.cfg.n();
        self.decoder.decode(&self.store, latent.clone().reshape(&[n, self.cfg.code_dim])?)
    }

    /// Reconstructed patch tokens `[n, D]` from a token map.
    pub fn decode(&self, r: &MultiScaleTokenMap) -> Result<Tensor<T>> {
        let latent = self.reconstruct_latent(r)?;
        self.decode_latent(&latent)
    }
}

/// Scale `k`'s contribution `φ_k(up(lookup(r_k)))` as `[p, p, d]`.
pub(crate) fn scale_term<T: Scalar>(
    g: &mut Graph<T>,
    tok: &Tokenizer<T>,
    codes: Var,
    grid: &IndexGrid,
) -> Result<Var> {
    let (p, d) = (tok.cfg.grid, tok.cfg.code_dim);
    let idx: Vec<usize> = grid.indices.iter().map(|&i| i as usize).collect();
    let size = tok.cfg.codebook_size;
    if let Some(&bad) = idx.iter().find(|&&i| i >= size) {
        return Err(Error::IndexOutOfRange { index: bad, size });
    }
    let z = g.gather_rows(codes, &idx)?;
    let z = g.reshape(z, &[grid.h, grid.w, d])?;
    let up = if (grid.h, grid.w) == (p, p) { z } else { g.bilinear_resize(z, (p, p))? };
    tok.transforms.apply(g, &tok.store, (grid.h, grid.w), up)
}

/// Multi-scale encoding of a `[p, p, d]` latent. Schedules that stop
/// short of `p×p` are accepted; the finest listed scale is simply the
/// last one quantized.
pub fn msvq_encode_latent<T: Scalar>(tok: &Tokenizer<T>, sched: &ScaleSchedule, latent: &Tensor<T>) -> Result<MultiScaleTokenMap> {
    let (p, d) = (tok.cfg.grid, tok.cfg.code_dim);
    if latent.shape() != [p, p, d] {
        return Err(Error::shape("msvq_encode", format!("latent {:?}, expected [{p}, {p}, {d}]", latent.shape())));
    }
    let normed = tok.normalized_codes();
    let mut g = Graph::new();
    let codes = g.constant(tok.codebook.vectors(&tok.store).clone());
    let mut f = g.constant(latent.clone());
    let mut maps = Vec::with_capacity(sched.len());
    for (k, &(h, w)) in sched.scales().iter().enumerate() {
        let down = if (h, w) == (p, p) { f } else { g.area_resize(f, (h, w))? };
        let indices = quantize_normalized(&normed, d, g.value(down).data())?;
        let grid = IndexGrid { h, w, indices };
        if k + 1 < sched.len() {
            let term = scale_term(&mut g, tok, codes, &grid)?;
            f = g.sub(f, term)?;
        }
        maps.push(grid);
    }
    Ok(MultiScaleTokenMap { maps })
}

/// `f̂ = Σ_k φ_k(up(lookup(r_k)))`, returned as `[p, p, d]`.
pub fn msvq_reconstruct_latent<T: Scalar>(tok: &Tokenizer<T>, r: &MultiScaleTokenMap) -> Result<Tensor<T>> {
    if r.is_empty() {
        return Err(Error::Schedule("empty token map".into()));
    }
    ScaleSchedule::new(r.resolutions())?;
    for m in &r.maps {
        if m.indices.len() != m.h * m.w {
            return Err(Error::Schedule(format!("{}x{} grid holds {} indices", m.h, m.w, m.indices.len())));
        }
    }
    let mut g = Graph::new();
    let codes = g.constant(tok.codebook.vectors(&tok.store).clone());
    let mut acc: Option<Var> = None;
    for grid in &r.maps {
        let term = scale_term(&mut g, tok, codes, grid)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(g.value(acc.expect("non-empty")).clone())
}

/// Lookup of raw code vectors, `[len, d]`.
pub fn lookup<T: Scalar>(tok: &Tokenizer<T>, indices: &[u16]) -> Result<Tensor<T>> {
    lookup_rows(tok.codebook.vectors(&tok.store), indices)
}

/// Shuffle helper shared by the training loops.
pub fn shuffled(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}
