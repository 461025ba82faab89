//! Training objective shared by the single- and multi-scale paths.
//!
//! Reconstruction term: mean over patches of `1 − cos(o, h)`.
//!
//! Commitment with a single scale:
//! `β‖ℓ2(f) − sg(ℓ2(f̂))‖² + ‖sg(ℓ2(f)) − ℓ2(f̂)‖²`, averaged over patches.
//! With several scales the residual chain subtracts raw code vectors, so
//! magnitudes matter and the pair is taken on raw vectors against every
//! cumulative reconstruction `f̂_k`, as a mean squared error per element,
//! averaged over scales.
//!
//! The decoder consumes `f̂_K` with gradients copied straight through to
//! the encoder output `f`.

use serde::{Deserialize, Serialize};

use super::{msvq_encode_latent, scale_term, MultiScaleTokenMap, ScaleSchedule, Tokenizer};
use crate::diffmath::rng::labeled_rng;
use crate::diffmath::{
    graph::L2_EPS, grad_check, AdamW, AdamWConfig, GradBuffer, GradCheckConfig, GradCheckReport, Graph, LrSchedule, ParamId, Scalar,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::synth::TileST;
use crate::vq::codebook::codebook_stats;
use crate::vq::{VqLossReport, DEFAULT_DEAD_THRESHOLD};

/// How stop-gradients and the straight-through copy are realised.
#[derive(Debug, Clone, Copy)]
pub enum Treatment<'a, T> {
    /// Normal training: indices chosen from the current latents.
    Live,
    /// Indices and every stop-gradient operand frozen at a captured point,
    /// so the loss is a smooth function of the parameters. Used for
    /// finite-difference checks.
    Fixed(&'a FixedPoint<T>),
}

/// Values captured from a live forward pass.
#[derive(Debug, Clone)]
pub struct FixedPoint<T> {
    pub maps: Vec<MultiScaleTokenMap>,
    pub enc_norm: Tensor<T>,
    pub cum_norm: Vec<Tensor<T>>,
    pub latent: Tensor<T>,
    pub cum: Vec<Tensor<T>>,
    /// `f̂_K − f`, added to `f` in place of the straight-through copy.
    pub st_offset: Tensor<T>,
}

impl<T: Scalar> FixedPoint<T> {
    pub fn capture(g: &Graph<T>, vars: &LossVars, maps: Vec<MultiScaleTokenMap>) -> Self {
        let st_offset = g.value(vars.cum_final).zip_map(g.value(vars.latent), |a, b| a - b);
        FixedPoint {
            maps,
            enc_norm: g.value(vars.enc_norm).clone(),
            cum_norm: vars.cum_norm.iter().map(|&v| g.value(v).clone()).collect(),
            latent: g.value(vars.latent).clone(),
            cum: vars.cum.iter().map(|&v| g.value(v).clone()).collect(),
            st_offset,
        }
    }
}

/// Graph handles of every named quantity in the objective.
#[derive(Debug, Clone)]
pub struct LossVars {
    /// Encoder output `[B·n, d]`.
    pub latent: Var,
    pub enc_norm: Var,
    /// `ℓ2(f̂_k)` per scale, `[B·n, d]`.
    pub cum_norm: Vec<Var>,
    /// `f̂_k` per scale, `[B·n, d]`.
    pub cum: Vec<Var>,
    pub cum_final: Var,
    pub dec_input: Var,
    pub recon: Var,
    pub cos_mean: Var,
    pub cos_term: Var,
    pub commitment: Var,
    pub total: Var,
}

/// Build the objective for `tiles` (row-major `[B·n, D]`) on `g`.
/// Returns the graph handles and the per-tile token maps used.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    tok: &Tokenizer<T>,
    tiles: &Tensor<T>,
    sched: &ScaleSchedule,
    treatment: Treatment<'_, T>,
) -> Result<(LossVars, Vec<MultiScaleTokenMap>)> {
    let cfg = &tok.cfg;
    let (p, d, n) = (cfg.grid, cfg.code_dim, cfg.n());
    sched.check_grid(p)?;
    if tiles.rank() != 2 || tiles.cols() != cfg.dim || tiles.rows() % n != 0 || tiles.rows() == 0 {
        return Err(Error::shape("tokenizer loss", format!("tiles {:?} for n={n}, D={}", tiles.shape(), cfg.dim)));
    }
    let batch = tiles.rows() / n;
    let x = g.constant(tiles.clone());
    let latent = tok.encoder.forward(g, &tok.store, x)?;

    let maps = match treatment {
        Treatment::Live => (0..batch)
            .map(|b| {
                let f = Tensor::new(vec![p, p, d], g.value(latent).data()[b * n * d..(b + 1) * n * d].to_vec())?;
                msvq_encode_latent(tok, sched, &f)
            })
            .collect::<Result<Vec<_>>>()?,
        Treatment::Fixed(fp) => {
            if fp.maps.len() != batch {
                return Err(Error::shape("tokenizer loss", "fixed point captured for a different batch"));
            }
            fp.maps.clone()
        }
    };

    let codes = g.param(&tok.store, tok.codebook.param);
    let k_count = sched.len();
    let mut per_scale: Vec<Vec<Var>> = vec![Vec::with_capacity(batch); k_count];
    for map in &maps {
        if !map.conforms_to(sched) {
            return Err(Error::Schedule("token map does not match the schedule".into()));
        }
        let mut cum: Option<Var> = None;
        for (k, grid) in map.maps.iter().enumerate() {
            let term = scale_term(g, tok, codes, grid)?;
            let next = match cum {
                None => term,
                Some(c) => g.add(c, term)?,
            };
            cum = Some(next);
            per_scale[k].push(g.reshape(next, &[n, d])?);
        }
    }
    let cum: Vec<Var> = per_scale
        .iter()
        .map(|parts| if parts.len() == 1 { Ok(parts[0]) } else { g.concat_rows(parts) })
        .collect::<Result<_>>()?;
    let cum_final = *cum.last().expect("non-empty schedule");

    let enc_norm = g.l2_normalize(latent, L2_EPS)?;
    let enc_sg = match treatment {
        Treatment::Live => g.detach(enc_norm),
        Treatment::Fixed(fp) => g.constant(fp.enc_norm.clone()),
    };
    let beta_d = T::from_f64_lossy(cfg.beta * d as f64);
    let dd = T::from_f64_lossy(d as f64);
    let beta = T::from_f64_lossy(cfg.beta);
    let mut cum_norm = Vec::with_capacity(k_count);
    let mut commit_terms = Vec::with_capacity(k_count);
    for (k, &c) in cum.iter().enumerate() {
        let cn = g.l2_normalize(c, L2_EPS)?;
        cum_norm.push(cn);
        let (enc_side, code_side) = if k_count == 1 {
            let cn_sg = match treatment {
                Treatment::Live => g.detach(cn),
                Treatment::Fixed(fp) => g.constant(fp.cum_norm[k].clone()),
            };
            let enc_side = g.mse(enc_norm, cn_sg)?;
            let code_side = g.mse(enc_sg, cn)?;
            (g.scale(enc_side, beta_d)?, g.scale(code_side, dd)?)
        } else {
            let (lat_sg, c_sg) = match treatment {
                Treatment::Live => (g.detach(latent), g.detach(c)),
                Treatment::Fixed(fp) => (g.constant(fp.latent.clone()), g.constant(fp.cum[k].clone())),
            };
            let enc_side = g.mse(latent, c_sg)?;
            (g.scale(enc_side, beta)?, g.mse(lat_sg, c)?)
        };
        commit_terms.push(g.add(enc_side, code_side)?);
    }
    let mut commitment = commit_terms[0];
    for &t in &commit_terms[1..] {
        commitment = g.add(commitment, t)?;
    }
    if k_count > 1 {
        commitment = g.scale(commitment, T::from_f64_lossy(1.0 / k_count as f64))?;
    }

    let dec_input = match treatment {
        Treatment::Live => g.straight_through(latent, cum_final)?,
        Treatment::Fixed(fp) => {
            let off = g.constant(fp.st_offset.clone());
            g.add(latent, off)?
        }
    };
    let recon = tok.decoder.forward(g, &tok.store, dec_input)?;
    let cos = g.cosine_similarity(recon, x)?;
    let cos_mean = g.mean(cos)?;
    let one = g.constant(Tensor::scalar(T::one()));
    let cos_term = g.sub(one, cos_mean)?;
    let total = g.add(cos_term, commitment)?;
    let vars = LossVars { latent, enc_norm, cum_norm, cum: cum.clone(), cum_final, dec_input, recon, cos_mean, cos_term, commitment, total };
    Ok((vars, maps))
}

/// Finite-difference check of the whole objective with respect to every
/// trainable parameter, with assignments and stop-gradient operands frozen
/// at the current parameters.
pub fn check_loss_gradients(
    tok: &Tokenizer<f64>,
    tiles: &[&TileST],
    sched: &ScaleSchedule,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let x = stack_tiles(tok, tiles)?;
    let mut g = Graph::new();
    let (vars, maps) = build_loss(&mut g, tok, &x, sched, Treatment::Live)?;
    let fixed = FixedPoint::capture(&g, &vars, maps);
    let ids: Vec<ParamId> = tok.store.ids().filter(|&id| tok.store.is_trainable(id)).collect();
    let point: Vec<Tensor<f64>> = ids.iter().map(|&id| tok.store.get(id).clone()).collect();
    grad_check(
        |g, leaves| {
            for (&id, &v) in ids.iter().zip(leaves) {
                g.bind_param(id, v);
            }
            let (vars, _) = build_loss(g, tok, &x, sched, Treatment::Fixed(&fixed))?;
            Ok(vars.total)
        },
        &point,
        cfg,
    )
}

/// Row-major `[B·n, D]` stack of tile tokens.
pub fn stack_tiles<T: Scalar>(tok: &Tokenizer<T>, tiles: &[&TileST]) -> Result<Tensor<T>> {
    let (n, dim) = (tok.cfg.n(), tok.cfg.dim);
    let mut data = Vec::with_capacity(tiles.len() * n * dim);
    for t in tiles {
        tok.check_tile(t)?;
        data.extend(t.tokens.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![tiles.len() * n, dim], data)
}

/// One optimizer step on `batch` under `sched`.
pub fn train_step(
    tok: &mut Tokenizer<f32>,
    batch: &[&TileST],
    sched: &ScaleSchedule,
    opt: &mut AdamW<f32>,
) -> Result<VqLossReport> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let x = stack_tiles(tok, batch)?;
    let mut g = Graph::new();
    let (vars, maps) = build_loss(&mut g, tok, &x, sched, Treatment::Live)?;
    let total = g.value(vars.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite("tokenizer loss"));
    }
    let cos_mean = g.value(vars.cos_mean).item() as f64;
    let commitment = g.value(vars.commitment).item() as f64;
    let code_distance = g
        .value(vars.enc_norm)
        .zip_map(g.value(*vars.cum_norm.last().expect("scale")), |a, b| (a - b) * (a - b))
        .sum() as f64
        / g.value(vars.latent).rows() as f64;
    let grads = g.backward(vars.total)?;
    let mut buf = GradBuffer::new(&tok.store);
    grads.accumulate_into(&mut buf);
    opt.step(&mut tok.store, &buf)?;

    let all: Vec<u16> = maps.iter().flat_map(|m| m.flat()).collect();
    tok.codebook.record_usage(&all);
    tok.codebook.update_ema(&all);
    let mut counts = vec![0u64; tok.cfg.codebook_size];
    for &i in &all {
        counts[i as usize] += 1;
    }
    Ok(VqLossReport {
        cosine: cos_mean,
        cos_term: 1.0 - cos_mean,
        commitment,
        total: total as f64,
        code_distance,
        perplexity: codebook_stats(&counts).perplexity,
    })
}

/// Training step on the configured multi-scale schedule.
pub fn msvq_train_step(tok: &mut Tokenizer<f32>, batch: &[&TileST], opt: &mut AdamW<f32>) -> Result<VqLossReport> {
    let sched = tok.cfg.schedule.clone();
    train_step(tok, batch, &sched, opt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub adam: AdamWConfig,
    pub reinit_dead: bool,
    pub dead_threshold: f64,
    /// Seed every code from encoder outputs of a random batch before the
    /// first step.
    pub data_init: bool,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let s = LrSchedule::tokenizer(1, 1);
        FitConfig {
            epochs: 20,
            batch_size: 16,
            peak_lr: s.peak,
            min_lr: s.floor,
            warmup_epochs: s.warmup_epochs,
            adam: AdamWConfig::tokenizer(),
            reinit_dead: true,
            dead_threshold: DEFAULT_DEAD_THRESHOLD,
            data_init: true,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn steps_per_epoch(&self, tiles: usize) -> usize {
        tiles.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule(&self, tiles: usize) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            floor: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch(tiles),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub cosine: f64,
    pub commitment: f64,
    pub perplexity: f64,
    pub dead_codes: usize,
    pub reinitialized: usize,
    pub lr: f64,
}

/// Train for `cfg.epochs` epochs over `tiles`, calling `on_epoch` with
/// the updated tokenizer after each one.
pub fn fit(
    tok: &mut Tokenizer<f32>,
    tiles: &[TileST],
    sched: &ScaleSchedule,
    cfg: &FitConfig,
    mut on_epoch: impl FnMut(&Tokenizer<f32>, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if tiles.is_empty() {
        return Err(Error::Data("no training tiles".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = AdamW::new(cfg.adam, cfg.schedule(tiles.len()));
    let mut rng = labeled_rng(cfg.seed, "tokenizer-fit", 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.data_init {
        let order = super::shuffled(tiles.len(), &mut rng);
        let batch: Vec<&TileST> = order.iter().take(cfg.batch_size).map(|&i| &tiles[i]).collect();
        let x = stack_tiles(tok, &batch)?;
        let latents = tok.encoder.encode(&tok.store, x)?.into_data();
        tok.codebook.reinit_dead_codes(&mut tok.store, &latents, f64::INFINITY, &mut rng)?;
    }
    for epoch in 0..cfg.epochs {
        tok.codebook.reset_usage();
        let order = super::shuffled(tiles.len(), &mut rng);
        let (mut loss, mut cos, mut commit) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        let mut last_latents: Vec<f32> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TileST> = chunk.iter().map(|&i| &tiles[i]).collect();
            let report = train_step(tok, &batch, sched, &mut opt)?;
            loss += report.total;
            cos += report.cosine;
            commit += report.commitment;
            steps += 1;
            if cfg.reinit_dead && steps == order.len().div_ceil(cfg.batch_size) {
                let x = stack_tiles(tok, &batch)?;
                last_latents = tok.encoder.encode(&tok.store, x)?.into_data();
            }
        }
        let stats = tok.codebook.stats();
        let reinitialized = if cfg.reinit_dead {
            tok.codebook.reinit_dead_codes(&mut tok.store, &last_latents, cfg.dead_threshold, &mut rng)?
        } else {
            0
        };
        let m = EpochMetrics {
            epoch,
            loss: loss / steps as f64,
            cosine: cos / steps as f64,
            commitment: commit / steps as f64,
            perplexity: stats.perplexity,
            dead_codes: stats.dead_count,
            reinitialized,
            lr: opt.current_lr(),
        };
        on_epoch(tok, &m)?;
        history.push(m);
    }
    Ok(history)
}

/// Mean patch cosine between tiles and their decoded reconstructions
/// through the frozen inference path.
pub fn reconstruction_fidelity<T: Scalar>(tok: &Tokenizer<T>, tiles: &[TileST], sched: &ScaleSchedule) -> Result<f64> {
    if tiles.is_empty() {
        return Err(Error::Data("no tiles to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in tiles {
        let r = tok.msvq_encode_with(t, sched)?;
        let o = tok.decode(&r)?;
        for i in 0..t.n() {
            total += cosine_f64(o.row(i), t.token(i));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub(crate) fn cosine_f64<T: Scalar>(a: &[T], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-8)
}
