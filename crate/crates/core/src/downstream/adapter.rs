//! Strided convolutions that collapse a dequantized `p×p×d` latent into
//! one vector in the source feature space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::kernels::conv_out_extent;
use crate::diffmath::nn::Conv2d;
use crate::diffmath::rng::{labeled_rng, stream_rng};
use crate::diffmath::{AdamW, AdamWConfig, GradBuffer, Graph, LrSchedule, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::msvq::{shuffled, Tokenizer};
use crate::synth::TileST;

pub const ADAPTER_KERNEL: usize = 3;
pub const ADAPTER_STRIDE: usize = 2;
pub const ADAPTER_PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Side of the input latent.
    pub grid: usize,
    /// Code dimension `d`.
    pub in_channels: usize,
    /// Output channels of each layer; the last is the output width.
    pub channels: Vec<usize>,
}

impl AdapterConfig {
    /// `d → 128 → 256 → 512 → 1024` over a 14×14 latent.
    pub fn full_scale(in_channels: usize) -> Self {
        AdapterConfig { grid: 14, in_channels, channels: vec![128, 256, 512, 1024] }
    }

    pub fn out_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Spatial side after each layer, starting with the input.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut out = vec![self.grid];
        let mut s = self.grid;
        for _ in &self.channels {
            s = conv_out_extent(s, ADAPTER_KERNEL, ADAPTER_STRIDE, ADAPTER_PAD).unwrap_or(0);
            out.push(s);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 || self.grid == 0 {
            return Err(Error::Config("adapter channels and grid must be positive".into()));
        }
        if self.spatial_trace().last() != Some(&1) {
            return Err(Error::Config(format!(
                "adapter layers take a {0}x{0} latent to {1:?}, not 1x1",
                self.grid,
                self.spatial_trace()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvAdapter {
    pub cfg: AdapterConfig,
    pub convs: Vec<Conv2d>,
}

impl ConvAdapter {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(store, &format!("{name}.conv{i}"), cin, cout, ADAPTER_KERNEL, ADAPTER_STRIDE, ADAPTER_PAD, rng);
                cin = cout;
                c
            })
            .collect();
        Ok(ConvAdapter { cfg, convs })
    }

    /// Rebuild an adapter over a copy of weights saved under `name`,
    /// reading the layer widths from the kernel shapes.
    pub fn from_weights(weights: &ParamStore<f32>, name: &str, grid: usize) -> Result<(Self, ParamStore<f32>)> {
        let mut channels = Vec::new();
        let mut in_channels = None;
        while let Some(id) = weights.find(&format!("{name}.conv{}.w", channels.len())) {
            let s = weights.get(id).shape();
            if s.len() != 4 || s[0] != ADAPTER_KERNEL || s[1] != ADAPTER_KERNEL {
                return Err(Error::Format(format!("adapter kernel {} has shape {s:?}", channels.len())));
            }
            in_channels.get_or_insert(s[2]);
            channels.push(s[3]);
        }
        let in_channels = in_channels.ok_or_else(|| Error::Config(format!("no `{name}` adapter weights found")))?;
        let cfg = AdapterConfig { grid, in_channels, channels };
        let mut store = ParamStore::new();
        let adapter = ConvAdapter::new(&mut store, name, cfg, &mut stream_rng(0, 0))?;
        if store.load_matching(weights)? != store.len() {
            return Err(Error::Format(format!("`{name}` adapter weights are incomplete")));
        }
        Ok((adapter, store))
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    /// `x: [p, p, d]` to `[1, out]`; GELU between layers.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = self.cfg.grid;
        if g.shape(x) != [p, p, self.cfg.in_channels] {
            return Err(Error::shape(
                "conv_adapter",
                format!("input {:?}, expected [{p}, {p}, {}]", g.shape(x), self.cfg.in_channels),
            ));
        }
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, store, h)?;
            if i + 1 < self.convs.len() {
                h = g.gelu(h)?;
            }
        }
        g.reshape(h, &[1, self.out_dim()])
    }

    /// Stacked `[N, out]` outputs for `N` latents.
    pub fn forward_many<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, latents: &[Var]) -> Result<Var> {
        if latents.is_empty() {
            return Err(Error::EmptyBag);
        }
        let rows = latents.iter().map(|&l| self.forward(g, store, l)).collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat_rows(&rows)
        }
    }

    /// Outputs without recording gradients.
    pub fn embed(&self, store: &ParamStore<f32>, latents: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = latents.iter().map(|l| g.constant(l.clone())).collect();
        let out = self.forward_many(&mut g, store, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// How the adapter is initialised and whether it trains downstream:
/// random or alignment-pretrained, frozen or fine-tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterMode {
    RdFz,
    RdFt,
    PtFz,
    PtFt,
}

impl AdapterMode {
    pub fn pretrained(self) -> bool {
        matches!(self, AdapterMode::PtFz | AdapterMode::PtFt)
    }

    pub fn trainable(self) -> bool {
        matches!(self, AdapterMode::RdFt | AdapterMode::PtFt)
    }
}

impl FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rd-fz" => Ok(AdapterMode::RdFz),
            "rd-ft" => Ok(AdapterMode::RdFt),
            "pt-fz" => Ok(AdapterMode::PtFz),
            "pt-ft" => Ok(AdapterMode::PtFt),
            other => Err(Error::Config(format!("unknown adapter mode `{other}` (rd-fz, rd-ft, pt-fz, pt-ft)"))),
        }
    }
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMode::RdFz => "rd-fz",
            AdapterMode::RdFt => "rd-ft",
            AdapterMode::PtFz => "pt-fz",
            AdapterMode::PtFt => "pt-ft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamWConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { epochs: 20, batch_size: 16, lr: 1e-3, adam: AdamWConfig::finetune(), seed: 0 }
    }
}

/// Tile-level target of a tile: its summary vector when present,
/// otherwise the mean of its patch tokens.
pub fn tile_target(tile: &TileST) -> Vec<f32> {
    if let Some(c) = &tile.cls {
        return c.clone();
    }
    let mut out = vec![0f64; tile.dim];
    for i in 0..tile.n() {
        for (o, &v) in out.iter_mut().zip(tile.token(i)) {
            *o += v as f64;
        }
    }
    out.into_iter().map(|v| (v / tile.n() as f64) as f32).collect()
}

/// Dequantized latents of `tiles` through the frozen tokenizer.
pub fn dequantized_latents(tok: &Tokenizer<f32>, tiles: &[TileST]) -> Result<Vec<Tensor<f32>>> {
    tiles.iter().map(|t| tok.reconstruct_latent(&tok.msvq_encode(t)?)).collect()
}

fn check_alignment_inputs(adapter: &ConvAdapter, tok: &Tokenizer<f32>, tiles: &[TileST]) -> Result<()> {
    if !tok.is_frozen() {
        return Err(Error::Config("adapter alignment needs a frozen tokenizer".into()));
    }
    if tiles.is_empty() {
        return Err(Error::Data("no alignment tiles".into()));
    }
    if tok.cfg.dim != adapter.out_dim() {
        return Err(Error::Config(format!(
            "adapter outputs {} dims but tile features have {}",
            adapter.out_dim(),
            tok.cfg.dim
        )));
    }
    Ok(())
}

fn align_loss(
    g: &mut Graph<f32>,
    adapter: &ConvAdapter,
    store: &ParamStore<f32>,
    latents: &[&Tensor<f32>],
    targets: &[&[f32]],
) -> Result<Var> {
    let vars: Vec<Var> = latents.iter().map(|&l| g.constant(l.clone())).collect();
    let out = adapter.forward_many(g, store, &vars)?;
    let t: Vec<f32> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let t = g.constant(Tensor::new(vec![targets.len(), adapter.out_dim()], t)?);
    let cos = g.cosine_similarity(out, t)?;
    let m = g.mean(cos)?;
    let neg = g.scale(m, -1.0)?;
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, neg)
}

/// Train the adapter so its output matches each tile's tile-level
/// feature in cosine. Returns the mean loss `1 − cos` of every epoch.
pub fn adapter_align_pretrain(
    adapter: &ConvAdapter,
    store: &mut ParamStore<f32>,
    tok: &Tokenizer<f32>,
    tiles: &[TileST],
    cfg: &AlignConfig,
) -> Result<Vec<f64>> {
    check_alignment_inputs(adapter, tok, tiles)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let latents = dequantized_latents(tok, tiles)?;
    let targets: Vec<Vec<f32>> = tiles.iter().map(tile_target).collect();
    let steps = tiles.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(
        cfg.adam,
        LrSchedule { peak: cfg.lr, floor: cfg.lr * 0.05, warmup_epochs: 0, total_epochs: cfg.epochs, steps_per_epoch: steps },
    );
    let mut rng = labeled_rng(cfg.seed, "adapter-align", 0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for chunk in shuffled(tiles.len(), &mut rng).chunks(cfg.batch_size) {
            let ls: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &latents[i]).collect();
            let ts: Vec<&[f32]> = chunk.iter().map(|&i| targets[i].as_slice()).collect();
            let mut g = Graph::new();
            let loss = align_loss(&mut g, adapter, store, &ls, &ts)?;
            let v = g.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite("adapter alignment loss"));
            }
            total += v * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let mut buf = GradBuffer::new(store);
            grads.accumulate_into(&mut buf);
            opt.step(store, &buf)?;
        }
        curve.push(total / tiles.len() as f64);
    }
    Ok(curve)
}

/// Mean cosine between adapter outputs and tile-level targets.
pub fn alignment_cosine(adapter: &ConvAdapter, store: &ParamStore<f32>, tok: &Tokenizer<f32>, tiles: &[TileST]) -> Result<f64> {
    check_alignment_inputs(adapter, tok, tiles)?;
    let latents = dequantized_latents(tok, tiles)?;
    let targets: Vec<Vec<f32>> = tiles.iter().map(tile_target).collect();
    let mut g = Graph::new();
    let ls: Vec<&Tensor<f32>> = latents.iter().collect();
    let ts: Vec<&[f32]> = targets.iter().map(|t| t.as_slice()).collect();
    let loss = align_loss(&mut g, adapter, store, &ls, &ts)?;
    Ok(1.0 - g.value(loss).item() as f64)
}
