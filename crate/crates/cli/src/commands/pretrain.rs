//! Slide-level self-supervised pretraining on tokenized regions.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use vqtok_core::codec::{check_stream_matches, save_weights, IndexStream, TileIndices, WeightsFile};
use vqtok_core::diffmath::{AdamWConfig, ParamStore, Tensor};
use vqtok_core::downstream::{ConvAdapter, ADAPTER_PREFIX};
use vqtok_core::msvq::Tokenizer;
use vqtok_core::ssl::{mean_pool_latent, pretrain, write_metrics_csv, Objective, PretrainConfig, RegionBag, SslModel, TargetScale, WsiConfig};
use vqtok_core::synth::REGION_SIDE;

use super::common::{backbone, elapsed_line, load_tokenizer, RUN_KEYS, SYNTH_KEYS};
use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::svg::Series;

pub fn keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend(SYNTH_KEYS);
    k.extend([
        key("tokenizer", "", "PVQT tokenizer artifact"),
        key("input", "", "PVQI stream of whole regions, tiles consecutive per region; synthetic regions when unset"),
        key("regions", "200", "Synthetic region count"),
        key("first_region", "0", "Id of the first synthetic region"),
        key("region_side", "16", "Tiles per region side"),
        key("features", "latent", "Tile inputs: latent (mean-pooled dequantized latent) or adapter (aligned adapter from the artifact)"),
        key("objective", "mim", "mim (masked token prediction) or abmil (region token distribution)"),
        key("epochs", "20", "Training epochs"),
        key("mask", "96", "Masked tiles per region for mim"),
        key("batch_size", "", "Regions per step [default: 32 for mim, 64 for abmil]"),
        key("lr", "5e-4", "Peak learning rate"),
        key("min_lr", "1e-5", "Final learning rate"),
        key("warmup_epochs", "2", "Linear warmup epochs"),
        key("weight_decay", "1e-4", "AdamW weight decay"),
        key("target_scale", "coarsest", "Supervising scale: coarsest (one token per tile) or finest"),
        key("abmil_hidden", "128", "ABMIL embedding width"),
        key("abmil_attn", "64", "ABMIL attention width"),
        key("width", "512", "Transformer width"),
        key("depth", "6", "Transformer blocks"),
        key("heads", "8", "Transformer heads"),
        key("mlp_ratio", "4", "Transformer MLP expansion"),
    ]);
    k
}

fn target_scale(s: &str) -> CliResult<TargetScale> {
    match s {
        "coarsest" => Ok(TargetScale::Coarsest),
        "finest" => Ok(TargetScale::Finest),
        other => Err(CliError::Config(format!("unknown target_scale `{other}` (coarsest, finest)"))),
    }
}

pub fn pretrain_config(cfg: &RunConfig) -> CliResult<PretrainConfig> {
    let objective: Objective = cfg.get("objective")?;
    let d = PretrainConfig::default();
    let batch: Option<usize> = cfg.opt("batch_size")?;
    Ok(PretrainConfig {
        objective,
        epochs: cfg.get("epochs")?,
        abmil_batch: batch.unwrap_or(d.abmil_batch),
        mim_batch: batch.unwrap_or(d.mim_batch),
        mask_count: cfg.get("mask")?,
        peak_lr: cfg.get("lr")?,
        min_lr: cfg.get("min_lr")?,
        warmup_epochs: cfg.get("warmup_epochs")?,
        adam: AdamWConfig { weight_decay: cfg.get("weight_decay")?, ..d.adam },
        target_scale: target_scale(cfg.raw("target_scale"))?,
        abmil_hidden: cfg.get("abmil_hidden")?,
        abmil_attn: cfg.get("abmil_attn")?,
        wsi: WsiConfig {
            width: cfg.get("width")?,
            depth: cfg.get("depth")?,
            heads: cfg.get("heads")?,
            mlp_ratio: cfg.get("mlp_ratio")?,
            ..d.wsi
        },
        seed: cfg.get("seed")?,
    })
}

type Features = Box<dyn Fn(&Tensor<f32>) -> vqtok_core::Result<Vec<f32>>>;

fn feature_fn(cfg: &RunConfig, art: &vqtok_core::codec::TokenizerArtifact) -> CliResult<Features> {
    match cfg.raw("features") {
        "latent" => Ok(Box::new(|l| Ok(mean_pool_latent(l)))),
        "adapter" => {
            let weights = art
                .adapter
                .as_ref()
                .ok_or_else(|| CliError::Config("features = adapter needs a tokenizer trained with adapter_channels".into()))?;
            let (adapter, store) = ConvAdapter::from_weights(weights, ADAPTER_PREFIX, art.tokenizer.cfg.grid)?;
            Ok(Box::new(move |l| Ok(adapter.embed(&store, std::slice::from_ref(l))?.into_data())))
        }
        other => Err(CliError::Config(format!("unknown features `{other}` (latent, adapter)"))),
    }
}

/// One region from its tiles' indices; coordinates are taken relative to
/// the region's top-left tile.
fn region(tok: &Tokenizer<f32>, side: usize, tiles: &[TileIndices], features: &Features) -> CliResult<RegionBag> {
    let min_x = tiles.iter().map(|t| t.coords.0).min().unwrap_or(0);
    let min_y = tiles.iter().map(|t| t.coords.1).min().unwrap_or(0);
    let coords = tiles.iter().map(|t| ((t.coords.1 - min_y) as usize, (t.coords.0 - min_x) as usize)).collect();
    let mut data = Vec::new();
    for t in tiles {
        data.extend(features(&tok.reconstruct_latent(&t.map)?)?);
    }
    let width = data.len() / tiles.len().max(1);
    let maps = tiles.iter().map(|t| t.map.clone()).collect();
    Ok(RegionBag::new(side, coords, maps, Tensor::new(vec![tiles.len(), width], data)?)?)
}

fn load_regions(cfg: &RunConfig, art: &vqtok_core::codec::TokenizerArtifact) -> CliResult<Vec<RegionBag>> {
    let tok = &art.tokenizer;
    let side: usize = cfg.get("region_side")?;
    if side == 0 {
        return Err(CliError::Config("region_side must be positive".into()));
    }
    let features = feature_fn(cfg, art)?;
    let tiles: Vec<TileIndices> = match cfg.opt::<PathBuf>("input")? {
        Some(path) => {
            let stream = IndexStream::load(&path)?;
            check_stream_matches(tok, stream.codebook_size, &stream.schedule)
                .map_err(|e| CliError::Data(format!("{} does not match the tokenizer: {e}", path.display())))?;
            if stream.tiles.is_empty() || stream.tiles.len() % (side * side) != 0 {
                return Err(CliError::Data(format!(
                    "{} holds {} tiles, not a whole number of {side}x{side} regions",
                    path.display(),
                    stream.tiles.len()
                )));
            }
            stream.tiles
        }
        None => {
            if side != REGION_SIDE {
                return Err(CliError::Config(format!("synthetic regions have side {REGION_SIDE}")));
            }
            let bb = backbone(cfg, tok.cfg.dim, tok.cfg.grid)?;
            let first: u64 = cfg.get("first_region")?;
            let count: u64 = cfg.get("regions")?;
            let mut out = Vec::new();
            for r in first..first + count {
                for t in bb.generate_region(r) {
                    out.push(TileIndices { coords: t.coords, map: tok.msvq_encode(&t)? });
                }
            }
            out
        }
    };
    tiles.chunks(side * side).map(|c| region(tok, side, c, &features)).collect()
}

fn checkpoint(run: &RunDir, name: &str, store: &ParamStore<f32>, meta: &serde_json::Value) -> CliResult<()> {
    save_weights(run.checkpoint(name), &WeightsFile::new(store.clone(), meta.clone()))?;
    Ok(())
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let art = load_tokenizer(cfg)?;
    let pcfg = pretrain_config(cfg)?;
    let regions = load_regions(cfg, &art)?;
    let run = RunDir::create(cfg)?;
    let classes = art.tokenizer.cfg.codebook_size;
    let in_dim = regions[0].feature_dim();
    let meta = json!({
        "objective": cfg.raw("objective"),
        "features": cfg.raw("features"),
        "in_dim": in_dim,
        "classes": classes,
        "config": pcfg,
    });
    eprintln!("pretraining on {} regions of {} tiles, feature width {in_dim}", regions.len(), regions[0].len());

    let mut init = ParamStore::new();
    SslModel::new(&pcfg, &mut init, in_dim, classes)?;
    checkpoint(&run, "init.pvqw", &init, &meta)?;
    let out = pretrain(&pcfg, &regions, classes, |store, m| {
        let extra = match (m.masked_accuracy, m.gap) {
            (Some(a), _) => format!(" masked acc {a:.4}"),
            (None, Some(g)) => format!(" gap {g:.5}"),
            _ => String::new(),
        };
        eprintln!("epoch {} loss {:.5}{extra}", m.epoch, m.loss);
        checkpoint(&run, &format!("epoch-{:03}.pvqw", m.epoch), store, &meta)
            .map_err(|e| vqtok_core::Error::Data(format!("checkpoint: {e}")))
    })?;
    checkpoint(&run, "final.pvqw", &out.store, &meta)?;

    write_metrics_csv(BufWriter::new(File::create(run.root().join(crate::run::METRICS))?), &out.metrics)?;
    let loss: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    run.plot("loss.svg", "Pretraining loss", "epoch", "loss", &[Series::indexed(cfg.raw("objective"), &loss)])?;
    match pcfg.objective {
        Objective::Mim => {
            let acc: Vec<f64> = out.metrics.iter().filter_map(|m| m.masked_accuracy).collect();
            run.plot("accuracy.svg", "Masked token accuracy", "epoch", "top-1 accuracy", &[Series::indexed("masked", &acc)])?;
        }
        Objective::Abmil => {
            let gap: Vec<f64> = out.metrics.iter().filter_map(|m| m.gap).collect();
            run.plot("gap.svg", "Loss minus target entropy", "epoch", "gap", &[Series::indexed("gap", &gap)])?;
        }
    }
    if let Some(m) = out.metrics.last() {
        println!("final loss {:.5}", m.loss);
    }
    println!("weights written to {}", run.checkpoint("final.pvqw").display());
    elapsed_line("pretrain", start);
    Ok(())
}
