//! Optimization steps and the epoch driver for both pretraining
//! objectives.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::abmil::{AbmilConfig, GatedAbmil};
use super::wsi::{WsiConfig, WsiTransformer};
use super::{entropy, region_soft_target, RegionBag, SoftTarget, TargetScale};
use crate::diffmath::rng::labeled_rng;
use crate::diffmath::{AdamW, AdamWConfig, GradBuffer, Graph, LrSchedule, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::msvq::shuffled;

/// Positions of one region replaced by the mask embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_tiles: usize,
    /// Sorted, distinct.
    pub positions: Vec<usize>,
}

impl MaskSpec {
    pub fn none(n_tiles: usize) -> Self {
        MaskSpec { n_tiles, positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_tiles];
        for &p in &self.positions {
            f[p] = true;
        }
        f
    }
}

/// `n_masked` distinct positions drawn uniformly from `0..n_tiles`.
pub fn sample_mask(rng: &mut impl Rng, n_tiles: usize, n_masked: usize) -> Result<MaskSpec> {
    if n_masked > n_tiles {
        return Err(Error::Config(format!("cannot mask {n_masked} of {n_tiles} tiles")));
    }
    let mut positions = sample(rng, n_tiles, n_masked).into_vec();
    positions.sort_unstable();
    Ok(MaskSpec { n_tiles, positions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbmilStepReport {
    /// Mean soft cross-entropy over the batch.
    pub loss: f64,
    /// Mean target entropy, the floor of `loss`.
    pub entropy: f64,
    pub gap: f64,
    /// Mean entropy of the attention weights.
    pub attention_entropy: f64,
}

/// Soft-target cross-entropy on a batch of regions; updates the model
/// when `opt` is given.
pub fn abmil_ssl_step(
    model: &GatedAbmil,
    store: &mut ParamStore<f32>,
    regions: &[&RegionBag],
    targets: &[&SoftTarget],
    opt: Option<&mut AdamW<f32>>,
) -> Result<AbmilStepReport> {
    if regions.is_empty() || regions.len() != targets.len() {
        return Err(Error::Data(format!("{} regions with {} targets", regions.len(), targets.len())));
    }
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(regions.len());
    let mut att_entropy = 0.0;
    for (r, t) in regions.iter().zip(targets) {
        if t.q.len() != model.cfg.out_dim {
            return Err(Error::shape("abmil_ssl", format!("target of {} classes, model has {}", t.q.len(), model.cfg.out_dim)));
        }
        let x = g.constant(r.features.clone());
        let out = model.forward(&mut g, store, x)?;
        let q = g.constant(Tensor::new(vec![1, t.q.len()], t.q.iter().map(|&v| v as f32).collect())?);
        losses.push(g.cross_entropy_soft(out.logits, q)?);
        let a: Vec<f64> = g.value(out.attention).data().iter().map(|&v| v as f64).collect();
        att_entropy += entropy(&a);
    }
    let loss = mean_of(&mut g, &losses)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("abmil ssl loss"));
    }
    if let Some(opt) = opt {
        step(&mut g, loss, store, opt)?;
    }
    let b = regions.len() as f64;
    let ent = targets.iter().map(|t| t.entropy()).sum::<f64>() / b;
    Ok(AbmilStepReport { loss: value, entropy: ent, gap: value - ent, attention_entropy: att_entropy / b })
}

fn mean_of(g: &mut Graph<f32>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / parts.len() as f32)
}

fn step(g: &mut Graph<f32>, loss: Var, store: &mut ParamStore<f32>, opt: &mut AdamW<f32>) -> Result<()> {
    let grads = g.backward(loss)?;
    let mut buf = GradBuffer::new(store);
    grads.accumulate_into(&mut buf);
    opt.step(store, &buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MimStepReport {
    /// Mean cross-entropy over masked positions; zero when none are masked.
    pub loss: f64,
    /// Top-1 accuracy over masked positions.
    pub accuracy: f64,
    pub masked: usize,
}

/// Graph of the masked-token loss. Logits are computed for every tile so
/// that unmasked positions receive an explicit zero gradient.
pub(crate) struct MimGraph {
    pub g: Graph<f32>,
    pub logits: Var,
    pub loss: Option<Var>,
    pub targets: Vec<u16>,
    pub masked_rows: Vec<usize>,
}

pub(crate) fn mim_graph(
    model: &WsiTransformer,
    store: &ParamStore<f32>,
    regions: &[&RegionBag],
    masks: &[&MaskSpec],
) -> Result<MimGraph> {
    if regions.is_empty() || regions.len() != masks.len() {
        return Err(Error::Data(format!("{} regions with {} masks", regions.len(), masks.len())));
    }
    let n = regions[0].len();
    let coords = regions[0].rope_coords();
    let mut x = Vec::with_capacity(regions.len() * n * regions[0].feature_dim());
    let mut flags = Vec::with_capacity(regions.len() * n);
    let mut targets = Vec::new();
    let mut masked_rows = Vec::new();
    for (b, (r, m)) in regions.iter().zip(masks).enumerate() {
        if r.coords != regions[0].coords {
            return Err(Error::Data("regions in one batch must share tile coordinates".into()));
        }
        if m.n_tiles != n {
            return Err(Error::shape("mim", format!("mask over {} tiles for a region of {n}", m.n_tiles)));
        }
        x.extend_from_slice(r.features.data());
        flags.extend(m.flags());
        if !m.is_empty() {
            let tokens = r.tile_tokens()?;
            for &p in &m.positions {
                targets.push(tokens[p]);
                masked_rows.push(b * n + p);
            }
        }
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![regions.len() * n, regions[0].feature_dim()], x)?);
    let hidden = model.encode(&mut g, store, x, &coords, Some(&flags))?;
    let logits = model.token_logits(&mut g, store, hidden, n)?;
    let loss = if masked_rows.is_empty() {
        None
    } else {
        let c = model.cfg.classes;
        let mut onehot = vec![0f32; targets.len() * c];
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= c {
                return Err(Error::IndexOutOfRange { index: t as usize, size: c });
            }
            onehot[i * c + t as usize] = 1.0;
        }
        let picked = g.gather_rows(logits, &masked_rows)?;
        let target = g.constant(Tensor::new(vec![targets.len(), c], onehot)?);
        Some(g.cross_entropy_soft(picked, target)?)
    };
    Ok(MimGraph { g, logits, loss, targets, masked_rows })
}

fn mim_report(mg: &MimGraph) -> Result<MimStepReport> {
    let loss = mg.loss.map(|l| mg.g.value(l).item() as f64).unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::NonFinite("mim loss"));
    }
    let lv = mg.g.value(mg.logits);
    let correct = mg
        .masked_rows
        .iter()
        .zip(&mg.targets)
        .filter(|(&r, &t)| {
            let row = lv.row(r);
            let arg = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            arg == t as usize
        })
        .count();
    let masked = mg.targets.len();
    let accuracy = if masked == 0 { 0.0 } else { correct as f64 / masked as f64 };
    Ok(MimStepReport { loss, accuracy, masked })
}

/// Masked-token prediction step on a batch of regions sharing coordinates.
pub fn mim_ssl_step(
    model: &WsiTransformer,
    store: &mut ParamStore<f32>,
    regions: &[&RegionBag],
    masks: &[&MaskSpec],
    opt: &mut AdamW<f32>,
) -> Result<MimStepReport> {
    let mut mg = mim_graph(model, store, regions, masks)?;
    let report = mim_report(&mg)?;
    if let Some(loss) = mg.loss {
        step(&mut mg.g, loss, store, opt)?;
    }
    Ok(report)
}

/// Loss and accuracy without updating.
pub fn mim_eval(model: &WsiTransformer, store: &ParamStore<f32>, regions: &[&RegionBag], masks: &[&MaskSpec]) -> Result<MimStepReport> {
    mim_report(&mim_graph(model, store, regions, masks)?)
}

/// `1 / exp(H)` of the pooled tile-token distribution: the accuracy of
/// guessing uniformly among the effectively used tokens.
pub fn empirical_chance(regions: &[RegionBag], codebook_size: usize) -> Result<f64> {
    let mut counts = vec![0f64; codebook_size];
    let mut total = 0.0;
    for r in regions {
        for t in r.tile_tokens()? {
            *counts.get_mut(t as usize).ok_or(Error::IndexOutOfRange { index: t as usize, size: codebook_size })? += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::EmptyBag);
    }
    let q: Vec<f64> = counts.iter().map(|c| c / total).collect();
    Ok((-entropy(&q)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Abmil,
    Mim,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abmil" => Ok(Objective::Abmil),
            "mim" => Ok(Objective::Mim),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected abmil or mim)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub abmil_batch: usize,
    pub mim_batch: usize,
    pub mask_count: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub adam: AdamWConfig,
    pub target_scale: TargetScale,
    pub abmil_hidden: usize,
    pub abmil_attn: usize,
    /// `in_dim` and `classes` are taken from the data.
    pub wsi: WsiConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let s = LrSchedule::pretraining(1, 1);
        PretrainConfig {
            objective: Objective::Mim,
            epochs: 20,
            abmil_batch: 64,
            mim_batch: 32,
            mask_count: 96,
            peak_lr: s.peak,
            min_lr: s.floor,
            warmup_epochs: s.warmup_epochs,
            adam: AdamWConfig::pretraining(),
            target_scale: TargetScale::Coarsest,
            abmil_hidden: 128,
            abmil_attn: 64,
            wsi: WsiConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn batch_size(&self) -> usize {
        match self.objective {
            Objective::Abmil => self.abmil_batch,
            Objective::Mim => self.mim_batch,
        }
    }
}

/// The model being pretrained.
#[derive(Debug, Clone)]
pub enum SslModel {
    Abmil(GatedAbmil),
    Mim(WsiTransformer),
}

impl SslModel {
    /// Build the model for `cfg` with input width and class count taken
    /// from the data.
    pub fn new(cfg: &PretrainConfig, store: &mut ParamStore<f32>, in_dim: usize, classes: usize) -> Result<Self> {
        let mut rng = labeled_rng(cfg.seed, "ssl-init", 0);
        Ok(match cfg.objective {
            Objective::Abmil => SslModel::Abmil(GatedAbmil::new(
                store,
                "abmil",
                AbmilConfig { in_dim, hidden: cfg.abmil_hidden, attn_dim: cfg.abmil_attn, out_dim: classes },
                &mut rng,
            )?),
            Objective::Mim => {
                SslModel::Mim(WsiTransformer::new(store, "wsi", WsiConfig { in_dim, classes, ..cfg.wsi }, &mut rng)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslEpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub masked_accuracy: Option<f64>,
    /// Loss minus target entropy.
    pub gap: Option<f64>,
    pub attention_entropy: Option<f64>,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub model: SslModel,
    pub metrics: Vec<SslEpochMetrics>,
}

/// Run `cfg.epochs` epochs of the configured objective over `regions`.
pub fn pretrain(
    cfg: &PretrainConfig,
    regions: &[RegionBag],
    codebook_size: usize,
    mut on_epoch: impl FnMut(&ParamStore<f32>, &SslEpochMetrics) -> Result<()>,
) -> Result<PretrainOutcome> {
    let first = regions.first().ok_or_else(|| Error::Data("no pretraining regions".into()))?;
    let batch = cfg.batch_size();
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut store = ParamStore::new();
    let model = SslModel::new(cfg, &mut store, first.feature_dim(), codebook_size)?;
    let steps_per_epoch = regions.len().div_ceil(batch);
    let mut opt = AdamW::new(
        cfg.adam,
        LrSchedule {
            peak: cfg.peak_lr,
            floor: cfg.min_lr,
            warmup_epochs: cfg.warmup_epochs,
            total_epochs: cfg.epochs,
            steps_per_epoch,
        },
    );
    let targets = match cfg.objective {
        Objective::Abmil => regions
            .iter()
            .map(|r| region_soft_target(r, codebook_size, cfg.target_scale))
            .collect::<Result<Vec<_>>>()?,
        Objective::Mim => Vec::new(),
    };
    let mut order_rng = labeled_rng(cfg.seed, "ssl-order", 0);
    let mut mask_rng = labeled_rng(cfg.seed, "ssl-mask", 0);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(regions.len(), &mut order_rng);
        let (mut loss, mut acc, mut gap, mut att, mut weight) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(batch) {
            let rs: Vec<&RegionBag> = chunk.iter().map(|&i| &regions[i]).collect();
            let w = rs.len() as f64;
            match &model {
                SslModel::Abmil(m) => {
                    let ts: Vec<&SoftTarget> = chunk.iter().map(|&i| &targets[i]).collect();
                    let r = abmil_ssl_step(m, &mut store, &rs, &ts, Some(&mut opt))?;
                    loss += r.loss * w;
                    gap += r.gap * w;
                    att += r.attention_entropy * w;
                }
                SslModel::Mim(m) => {
                    let masks = rs
                        .iter()
                        .map(|r| sample_mask(&mut mask_rng, r.len(), cfg.mask_count))
                        .collect::<Result<Vec<_>>>()?;
                    let mrefs: Vec<&MaskSpec> = masks.iter().collect();
                    let r = mim_ssl_step(m, &mut store, &rs, &mrefs, &mut opt)?;
                    loss += r.loss * w;
                    acc += r.accuracy * w;
                }
            }
            weight += w;
        }
        let is_mim = matches!(model, SslModel::Mim(_));
        let m = SslEpochMetrics {
            epoch,
            loss: loss / weight,
            masked_accuracy: is_mim.then_some(acc / weight),
            gap: (!is_mim).then_some(gap / weight),
            attention_entropy: (!is_mim).then_some(att / weight),
            lr: opt.current_lr(),
        };
        on_epoch(&store, &m)?;
        metrics.push(m);
    }
    Ok(PretrainOutcome { store, model, metrics })
}

/// Per-epoch CSV with empty cells for metrics the objective lacks.
pub fn write_metrics_csv(mut w: impl Write, metrics: &[SslEpochMetrics]) -> Result<()> {
    writeln!(w, "epoch,loss,masked_accuracy,gap,attention_entropy,lr")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for m in metrics {
        writeln!(
            w,
            "{},{:.6},{},{},{},{:.6e}",
            m.epoch,
            m.loss,
            opt(m.masked_accuracy),
            opt(m.gap),
            opt(m.attention_entropy),
            m.lr
        )?;
    }
    Ok(())
}
