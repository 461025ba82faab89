//! Slide-level MIL fine-tuning with k-fold cross-validation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterConfig, AdapterMode, ConvAdapter};
use super::lora::{lora_wrap, DEFAULT_LORA_RANK};
use super::metrics::{argmax_rows, cindex, macro_auc, macro_f1, stratified_folds, Fold};
use super::survival::{hazard_nll, risk_score, DEFAULT_SURVIVAL_BINS};
use crate::diffmath::nn::Linear;
use crate::diffmath::rng::labeled_rng;
use crate::diffmath::{AdamW, AdamWConfig, GradBuffer, Graph, LrSchedule, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::msvq::shuffled;
use crate::ssl::{AbmilConfig, GatedAbmil, WsiConfig, WsiTransformer};

pub const ADAPTER_PREFIX: &str = "adapter";
pub const ABMIL_PREFIX: &str = "abmil";
pub const WSI_PREFIX: &str = "wsi";

/// Per-tile inputs of a slide.
#[derive(Debug, Clone)]
pub enum BagTiles {
    /// Dequantized `[p, p, d]` latents, run through the adapter.
    Latents(Vec<Tensor<f32>>),
    /// Ready-made `[n, F]` tile features.
    Features(Tensor<f32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Survival { time: f64, event: bool, bin: usize },
}

#[derive(Debug, Clone)]
pub struct SlideBag {
    pub tiles: BagTiles,
    /// `(x, y)` grid position of every tile.
    pub coords: Vec<(i32, i32)>,
    pub label: Label,
}

impl SlideBag {
    pub fn new(tiles: BagTiles, coords: Vec<(i32, i32)>, label: Label) -> Result<Self> {
        let n = match &tiles {
            BagTiles::Latents(l) => {
                if let Some(first) = l.first() {
                    if first.rank() != 3 || l.iter().any(|t| t.shape() != first.shape()) {
                        return Err(Error::Data("bag latents must share one [p, p, d] shape".into()));
                    }
                }
                l.len()
            }
            BagTiles::Features(f) => {
                if f.rank() != 2 {
                    return Err(Error::Data(format!("bag features must be [n, F], got {:?}", f.shape())));
                }
                f.rows()
            }
        };
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        if coords.len() != n {
            return Err(Error::Data(format!("{n} tiles but {} coords", coords.len())));
        }
        Ok(SlideBag { tiles, coords, label })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `(row, col)` floats for the rotary embedding.
    pub fn rope_coords(&self) -> Vec<(f64, f64)> {
        self.coords.iter().map(|&(x, y)| (y as f64, x as f64)).collect()
    }

    fn class(&self) -> Result<usize> {
        match self.label {
            Label::Class(c) => Ok(c),
            _ => Err(Error::Data("bag carries a survival label where a class is needed".into())),
        }
    }

    fn survival(&self) -> Result<(f64, bool, usize)> {
        match self.label {
            Label::Survival { time, event, bin } => Ok((time, event, bin)),
            _ => Err(Error::Data("bag carries a class label where survival is needed".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Abmil,
    Roformer,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abmil" => Ok(HeadKind::Abmil),
            "roformer" => Ok(HeadKind::Roformer),
            other => Err(Error::Config(format!("unknown head `{other}` (abmil, roformer)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Abmil => "abmil",
            HeadKind::Roformer => "roformer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Random init, every weight trained.
    Scratch,
    /// Backbone loaded from slide-level pretraining, frozen, and adapted
    /// through LoRA; the output layer is new.
    Pretrained,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scratch" => Ok(InitKind::Scratch),
            "pretrained" => Ok(InitKind::Pretrained),
            other => Err(Error::Config(format!("unknown init `{other}` (scratch, pretrained)"))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Scratch => "scratch",
            InitKind::Pretrained => "pretrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub head: HeadKind,
    pub init: InitKind,
    pub adapter_mode: AdapterMode,
    /// Adapter layer widths; the last is the tile feature width.
    pub adapter_channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamWConfig,
    pub folds: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub abmil_hidden: usize,
    pub abmil_attn: usize,
    pub wsi: WsiConfig,
    pub survival_bins: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            head: HeadKind::Abmil,
            init: InitKind::Scratch,
            adapter_mode: AdapterMode::PtFt,
            adapter_channels: vec![128, 256, 512, 1024],
            epochs: 20,
            batch_size: 1,
            lr: 1e-4,
            adam: AdamWConfig::finetune(),
            folds: 5,
            lora_rank: DEFAULT_LORA_RANK,
            lora_alpha: DEFAULT_LORA_RANK as f64,
            abmil_hidden: 128,
            abmil_attn: 64,
            wsi: WsiConfig::default(),
            survival_bins: DEFAULT_SURVIVAL_BINS,
            seed: 0,
        }
    }
}

/// Weights a fine-tuning run may start from.
#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainedWeights<'a> {
    /// Store produced by slide-level pretraining.
    pub slide: Option<&'a ParamStore<f32>>,
    /// Store holding an alignment-trained adapter.
    pub adapter: Option<&'a ParamStore<f32>>,
}

#[derive(Debug, Clone)]
pub enum MilHead {
    Abmil(GatedAbmil),
    /// Transformer over tile features read out at its class token.
    Roformer { wsi: WsiTransformer, out: Linear },
}

/// Adapter (when bags carry latents) plus a MIL head, with their weights.
#[derive(Debug, Clone)]
pub struct MilModel {
    pub adapter: Option<ConvAdapter>,
    pub head: MilHead,
    pub store: ParamStore<f32>,
    pub outputs: usize,
}

/// Copy every tensor of `src` whose name also appears in `dst`, except
/// names under `skip`. Returns how many were copied.
fn load_except(dst: &mut ParamStore<f32>, src: &ParamStore<f32>, skip: &str) -> Result<usize> {
    let mut keep = ParamStore::new();
    for (_, name, t) in src.iter() {
        if !name.starts_with(skip) {
            keep.add(name, t.clone());
        }
    }
    dst.load_matching(&keep)
}

impl MilModel {
    /// Build the model for bags shaped like `example`. `rng` seeds every
    /// new weight.
    pub fn build(
        cfg: &FinetuneConfig,
        example: &SlideBag,
        outputs: usize,
        weights: PretrainedWeights<'_>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if outputs == 0 {
            return Err(Error::Config("model needs at least one output".into()));
        }
        let mut store = ParamStore::new();
        let (adapter, in_dim) = match &example.tiles {
            BagTiles::Latents(l) => {
                let s = l[0].shape();
                if s[0] != s[1] {
                    return Err(Error::Data(format!("adapter expects square latents, got {s:?}")));
                }
                let acfg = AdapterConfig { grid: s[0], in_channels: s[2], channels: cfg.adapter_channels.clone() };
                let adapter = ConvAdapter::new(&mut store, ADAPTER_PREFIX, acfg, rng)?;
                if cfg.adapter_mode.pretrained() {
                    let src = weights
                        .adapter
                        .ok_or_else(|| Error::Config(format!("adapter mode {} needs aligned adapter weights", cfg.adapter_mode)))?;
                    if store.load_matching(src)? != adapter.convs.len() * 2 {
                        return Err(Error::Config("aligned adapter weights do not cover every adapter layer".into()));
                    }
                }
                if !cfg.adapter_mode.trainable() {
                    store.set_trainable_prefix(&format!("{ADAPTER_PREFIX}."), false);
                }
                let d = adapter.out_dim();
                (Some(adapter), d)
            }
            BagTiles::Features(f) => (None, f.cols()),
        };
        let backbone_start = store.len();
        let (head, prefix, head_prefix) = match cfg.head {
            HeadKind::Abmil => {
                let acfg = AbmilConfig { in_dim, hidden: cfg.abmil_hidden, attn_dim: cfg.abmil_attn, out_dim: outputs };
                (MilHead::Abmil(GatedAbmil::new(&mut store, ABMIL_PREFIX, acfg, rng)?), ABMIL_PREFIX, format!("{ABMIL_PREFIX}.head."))
            }
            HeadKind::Roformer => {
                let wsi = WsiTransformer::new(&mut store, WSI_PREFIX, WsiConfig { in_dim, ..cfg.wsi }, rng)?;
                // the token classifier of pretraining is never read here
                store.set_trainable(wsi.head.w, false);
                if let Some(b) = wsi.head.b {
                    store.set_trainable(b, false);
                }
                let out = Linear::new_normal(&mut store, &format!("{WSI_PREFIX}.out"), cfg.wsi.width, outputs, 0.02, rng);
                (MilHead::Roformer { wsi, out }, WSI_PREFIX, format!("{WSI_PREFIX}.head."))
            }
        };
        let mut model = MilModel { adapter, head, store, outputs };
        // the readout starts at zero so a new head does not inject a random
        // ranking into the first predictions
        let readout = match &model.head {
            MilHead::Abmil(m) => m.head.w,
            MilHead::Roformer { out, .. } => out.w,
        };
        let shape = model.store.get(readout).shape().to_vec();
        model.store.set(readout, Tensor::zeros(&shape))?;
        if cfg.init == InitKind::Pretrained {
            let src = weights
                .slide
                .ok_or_else(|| Error::Config("pretrained init needs slide-level pretrained weights".into()))?;
            let copied = load_except(&mut model.store, src, &head_prefix)?;
            if copied == 0 {
                return Err(Error::Config(format!("pretrained weights share no tensors with the `{prefix}` model")));
            }
            let ids: Vec<_> = model.store.ids().skip(backbone_start).collect();
            for id in ids {
                model.store.set_trainable(id, false);
            }
            let linears = match &mut model.head {
                MilHead::Abmil(m) => m.backbone_linears_mut(),
                MilHead::Roformer { wsi, .. } => wsi.backbone_linears_mut(),
            };
            lora_wrap(&mut model.store, linears, cfg.lora_rank, cfg.lora_alpha, rng)?;
            let readout = match &model.head {
                MilHead::Abmil(m) => &m.head,
                MilHead::Roformer { out, .. } => out,
            };
            let (w, b) = (readout.w, readout.b);
            model.store.set_trainable(w, true);
            if let Some(b) = b {
                model.store.set_trainable(b, true);
            }
        }
        Ok(model)
    }

    fn adapter_trainable(&self) -> bool {
        match &self.adapter {
            Some(a) => a.convs.iter().any(|c| self.store.is_trainable(c.w)),
            None => false,
        }
    }

    /// Tile features of `bag` outside any graph.
    pub fn tile_features(&self, bag: &SlideBag) -> Result<Tensor<f32>> {
        match (&bag.tiles, &self.adapter) {
            (BagTiles::Features(f), _) => Ok(f.clone()),
            (BagTiles::Latents(l), Some(a)) => a.embed(&self.store, l),
            (BagTiles::Latents(_), None) => Err(Error::Config("model has no adapter for latent bags".into())),
        }
    }

    /// Logits `[1, outputs]` for one bag. `features` may hold
    /// precomputed tile features when the adapter is frozen.
    pub fn forward(&self, g: &mut Graph<f32>, bag: &SlideBag, features: Option<&Tensor<f32>>) -> Result<Var> {
        let x = match (features, &bag.tiles, &self.adapter) {
            (Some(f), _, _) => g.constant(f.clone()),
            (None, BagTiles::Features(f), _) => g.constant(f.clone()),
            (None, BagTiles::Latents(l), Some(a)) => {
                let vars: Vec<Var> = l.iter().map(|t| g.constant(t.clone())).collect();
                a.forward_many(g, &self.store, &vars)?
            }
            (None, BagTiles::Latents(_), None) => return Err(Error::Config("model has no adapter for latent bags".into())),
        };
        match &self.head {
            MilHead::Abmil(m) => Ok(m.forward(g, &self.store, x)?.logits),
            MilHead::Roformer { wsi, out } => {
                let h = wsi.encode(g, &self.store, x, &bag.rope_coords(), None)?;
                let cls = g.slice_rows(h, 0, 1)?;
                out.forward(g, &self.store, cls)
            }
        }
    }

    /// Logits of one bag as plain numbers.
    pub fn predict(&self, bag: &SlideBag, features: Option<&Tensor<f32>>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, bag, features)?;
        Ok(g.value(logits).data().iter().map(|&v| v as f64).collect())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy)]
enum Task {
    Classify { classes: usize },
    Survival { bins: usize },
}

impl Task {
    fn outputs(self) -> usize {
        match self {
            Task::Classify { classes } => classes,
            Task::Survival { bins } => bins,
        }
    }
}

fn bag_loss(g: &mut Graph<f32>, logits: Var, bag: &SlideBag, task: Task) -> Result<Var> {
    match task {
        Task::Classify { classes } => {
            let c = bag.class()?;
            let mut onehot = vec![0f32; classes];
            onehot[c] = 1.0;
            let t = g.constant(Tensor::new(vec![1, classes], onehot)?);
            g.cross_entropy_soft(logits, t)
        }
        Task::Survival { .. } => {
            let (_, event, bin) = bag.survival()?;
            hazard_nll(g, logits, &[bin], &[event])
        }
    }
}

/// Mean training loss of every epoch of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCurve {
    pub fold: usize,
    pub losses: Vec<f64>,
}

/// Train a fresh model on `train` and return it with its loss curve.
fn fit_fold(
    cfg: &FinetuneConfig,
    bags: &[SlideBag],
    train: &[usize],
    task: Task,
    weights: PretrainedWeights<'_>,
    fold: usize,
) -> Result<(MilModel, Vec<Option<Tensor<f32>>>, Vec<f64>)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut init_rng = labeled_rng(cfg.seed, "finetune-init", fold as u64);
    let model = MilModel::build(cfg, &bags[train[0]], task.outputs(), weights, &mut init_rng)?;
    let mut model = model;
    // a frozen adapter gives fixed tile features; compute them once
    let cache: Vec<Option<Tensor<f32>>> = if model.adapter.is_some() && !model.adapter_trainable() {
        bags.iter().map(|b| model.tile_features(b).map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; bags.len()]
    };
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.adam, LrSchedule { steps_per_epoch: steps, total_epochs: cfg.epochs, ..LrSchedule::constant(cfg.lr) });
    let mut order_rng = labeled_rng(cfg.seed, "finetune-order", fold as u64);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for chunk in shuffled(train.len(), &mut order_rng).chunks(cfg.batch_size) {
            let mut buf = GradBuffer::new(&model.store);
            for &p in chunk {
                let i = train[p];
                let mut g = Graph::new();
                let logits = model.forward(&mut g, &bags[i], cache[i].as_ref())?;
                let loss = bag_loss(&mut g, logits, &bags[i], task)?;
                let loss = g.scale(loss, 1.0 / chunk.len() as f32)?;
                let v = g.value(loss).item() as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite("fine-tuning loss"));
                }
                total += v * chunk.len() as f64;
                g.backward(loss)?.accumulate_into(&mut buf);
            }
            opt.step(&mut model.store, &buf)?;
        }
        losses.push(total / train.len() as f64);
    }
    Ok((model, cache, losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyFold {
    pub fold: usize,
    pub macro_f1: f64,
    pub macro_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub folds: Vec<ClassifyFold>,
    pub curves: Vec<FoldCurve>,
}

impl ClassifyReport {
    pub fn mean_auc(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.macro_auc))
    }

    pub fn mean_f1(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.macro_f1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalFold {
    pub fold: usize,
    pub cindex: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub folds: Vec<SurvivalFold>,
    pub curves: Vec<FoldCurve>,
}

impl SurvivalReport {
    pub fn mean_cindex(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.cindex))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values.iter().copied());
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

fn check_bags(bags: &[SlideBag]) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::Data("no slide bags".into()));
    }
    let kind = |b: &SlideBag| match &b.tiles {
        BagTiles::Latents(l) => (0, l[0].shape().to_vec()),
        BagTiles::Features(f) => (1, vec![f.cols()]),
    };
    let first = kind(&bags[0]);
    if bags.iter().any(|b| kind(b) != first) {
        return Err(Error::Data("bags mix tile input kinds or shapes".into()));
    }
    Ok(())
}

/// Cross-validated classification. Folds are stratified by class; every
/// training split must hold at least two classes.
pub fn classify_train(cfg: &FinetuneConfig, bags: &[SlideBag], weights: PretrainedWeights<'_>) -> Result<ClassifyReport> {
    check_bags(bags)?;
    let labels = bags.iter().map(SlideBag::class).collect::<Result<Vec<_>>>()?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let mut split_rng = labeled_rng(cfg.seed, "finetune-folds", 0);
    let folds = stratified_folds(&labels, cfg.folds, &mut split_rng)?;
    let mut report = ClassifyReport { folds: Vec::new(), curves: Vec::new() };
    for (k, Fold { train, test }) in folds.iter().enumerate() {
        if train.iter().all(|&i| labels[i] == labels[train[0]]) {
            return Err(Error::Data(format!("training split of fold {k} holds a single class")));
        }
        let (model, cache, losses) = fit_fold(cfg, bags, train, Task::Classify { classes }, weights, k)?;
        let probs: Vec<Vec<f64>> = test
            .iter()
            .map(|&i| model.predict(&bags[i], cache[i].as_ref()).map(|z| softmax(&z)))
            .collect::<Result<_>>()?;
        let y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        report.folds.push(ClassifyFold {
            fold: k,
            macro_f1: macro_f1(&y, &argmax_rows(&probs), classes)?,
            macro_auc: macro_auc(&y, &probs, classes)?,
        });
        report.curves.push(FoldCurve { fold: k, losses });
    }
    Ok(report)
}

/// Cross-validated discrete-time survival. Folds are stratified by the
/// event flag; the last-epoch model of each fold is scored.
pub fn survival_train(cfg: &FinetuneConfig, bags: &[SlideBag], weights: PretrainedWeights<'_>) -> Result<SurvivalReport> {
    check_bags(bags)?;
    let labels = bags.iter().map(SlideBag::survival).collect::<Result<Vec<_>>>()?;
    if let Some(&(_, _, b)) = labels.iter().find(|l| l.2 >= cfg.survival_bins) {
        return Err(Error::Data(format!("time bin {b} out of range for {} bins", cfg.survival_bins)));
    }
    let strata: Vec<usize> = labels.iter().map(|l| l.1 as usize).collect();
    let mut split_rng = labeled_rng(cfg.seed, "finetune-folds", 0);
    let folds = stratified_folds(&strata, cfg.folds, &mut split_rng)?;
    let mut report = SurvivalReport { folds: Vec::new(), curves: Vec::new() };
    for (k, Fold { train, test }) in folds.iter().enumerate() {
        let (model, cache, losses) = fit_fold(cfg, bags, train, Task::Survival { bins: cfg.survival_bins }, weights, k)?;
        let risks: Vec<f64> = test
            .iter()
            .map(|&i| model.predict(&bags[i], cache[i].as_ref()).map(|z| risk_score(&z)))
            .collect::<Result<_>>()?;
        let times: Vec<f64> = test.iter().map(|&i| labels[i].0).collect();
        let events: Vec<bool> = test.iter().map(|&i| labels[i].1).collect();
        let c = cindex(&times, &events, &risks).map_err(|e| Error::Data(format!("fold {k}: {e}")))?;
        report.folds.push(SurvivalFold { fold: k, cindex: c });
        report.curves.push(FoldCurve { fold: k, losses });
    }
    Ok(report)
}
