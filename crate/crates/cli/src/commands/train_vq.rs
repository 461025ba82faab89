//! Train a single- or multi-scale tokenizer and save it as PVQT.

use std::cell::RefCell;
use std::time::Instant;

use vqtok_core::codec::{save_artifact, TokenizerArtifact, TrainingFingerprint};
use vqtok_core::diffmath::nn::TransformerConfig;
use vqtok_core::diffmath::rng::labeled_rng;
use vqtok_core::diffmath::ParamStore;
use vqtok_core::downstream::{adapter_align_pretrain, alignment_cosine, AdapterConfig, AlignConfig, ConvAdapter, ADAPTER_PREFIX};
use vqtok_core::msvq::{fit, reconstruction_fidelity, FitConfig, ScaleSchedule, Tokenizer, TokenizerConfig};
use vqtok_core::synth::{read_feature_file, TileST};

use super::common::{backbone, elapsed_line, synthetic_tiles, GEOMETRY_KEYS, RUN_KEYS, SYNTH_KEYS};
use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{num, RunDir};
use crate::svg::Series;

/// First id of synthetic held-out tiles, far from the training ids.
pub const EVAL_FIRST_ID: u64 = 1_000_000_000;

pub fn keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend(GEOMETRY_KEYS);
    k.extend(SYNTH_KEYS);
    k.extend([
        key("mode", "msvq", "msvq (multi-scale) or vq (single patch-level scale)"),
        key("scales", "", "Scale list such as 1,2,4,7,14; unset uses the default list for the grid"),
        key("input", "", "PVQF training tiles; synthetic tiles when unset"),
        key("tiles", "1024", "Synthetic training tiles"),
        key("eval_tiles", "256", "Held-out tiles (taken from the end of the input file when one is given)"),
        key("codebook_size", "512", "Codebook size C"),
        key("code_dim", "16", "Code dimension d"),
        key("enc_hidden", "128", "Encoder hidden width"),
        key("dec_width", "64", "Decoder width"),
        key("dec_depth", "2", "Decoder blocks"),
        key("dec_heads", "4", "Decoder attention heads"),
        key("dec_mlp_ratio", "2", "Decoder MLP expansion"),
        key("beta", "0.25", "Commitment weight"),
        key("phi_kernel", "3", "Kernel of the per-scale refinement convolutions"),
        key("epochs", "20", "Training epochs"),
        key("batch_size", "16", "Tiles per step"),
        key("lr", "2e-4", "Peak learning rate"),
        key("min_lr", "1e-5", "Final learning rate of the cosine schedule"),
        key("warmup_epochs", "5", "Linear warmup epochs"),
        key("weight_decay", "1e-4", "AdamW weight decay"),
        key("reinit_dead", "true", "Re-seed unused codes after each epoch"),
        key("data_init", "true", "Seed the codebook from encoder outputs before training"),
        key("adapter_channels", "", "Channels of a conv adapter aligned after training, e.g. 16,32; none when unset"),
        key("adapter_epochs", "20", "Adapter alignment epochs"),
        key("adapter_lr", "1e-3", "Adapter alignment learning rate"),
        key("adapter_batch", "16", "Adapter alignment batch size"),
        key("output", "", "PVQT path [default: <run_dir>/checkpoints/tokenizer.pvqt]"),
    ]);
    k
}

fn schedule(cfg: &RunConfig, grid: usize) -> CliResult<ScaleSchedule> {
    let given: Option<ScaleSchedule> = cfg.opt("scales")?;
    match cfg.raw("mode") {
        "msvq" => Ok(given.unwrap_or_else(|| ScaleSchedule::default_for(grid))),
        "vq" => {
            let patch = ScaleSchedule::patch_only(grid);
            match given {
                Some(s) if s != patch => Err(CliError::Config(format!("mode vq uses the single scale {patch}, got scales {s}"))),
                _ => Ok(patch),
            }
        }
        other => Err(CliError::Config(format!("unknown mode `{other}` (msvq, vq)"))),
    }
}

/// Training and held-out tiles.
fn load_tiles(cfg: &RunConfig) -> CliResult<(Vec<TileST>, Vec<TileST>)> {
    let held: usize = cfg.get("eval_tiles")?;
    match cfg.opt::<std::path::PathBuf>("input")? {
        Some(path) => {
            let mut tiles = read_feature_file(&path)?;
            if tiles.len() <= held {
                return Err(CliError::Data(format!("{} holds {} tiles, need more than eval_tiles = {held}", path.display(), tiles.len())));
            }
            let eval = tiles.split_off(tiles.len() - held);
            Ok((tiles, eval))
        }
        None => {
            let bb = backbone(cfg, cfg.get("synth.dim")?, cfg.get("synth.grid")?)?;
            Ok((synthetic_tiles(&bb, 0, cfg.get("tiles")?), synthetic_tiles(&bb, EVAL_FIRST_ID, held)))
        }
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let (train, eval) = load_tiles(cfg)?;
    let first = train.first().ok_or_else(|| CliError::Data("no training tiles".into()))?;
    let (dim, grid) = (first.dim, first.grid);
    let sched = schedule(cfg, grid)?;
    let seed: u64 = cfg.get("seed")?;
    let tcfg = TokenizerConfig {
        dim,
        grid,
        code_dim: cfg.get("code_dim")?,
        codebook_size: cfg.get("codebook_size")?,
        enc_hidden: cfg.get("enc_hidden")?,
        decoder: TransformerConfig {
            width: cfg.get("dec_width")?,
            depth: cfg.get("dec_depth")?,
            heads: cfg.get("dec_heads")?,
            mlp_ratio: cfg.get("dec_mlp_ratio")?,
        },
        beta: cfg.get("beta")?,
        schedule: sched.clone(),
        phi_kernel: cfg.get("phi_kernel")?,
        seed,
    };
    let defaults = FitConfig::default();
    let fcfg = FitConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        peak_lr: cfg.get("lr")?,
        min_lr: cfg.get("min_lr")?,
        warmup_epochs: cfg.get("warmup_epochs")?,
        adam: vqtok_core::diffmath::AdamWConfig { weight_decay: cfg.get("weight_decay")?, ..defaults.adam },
        reinit_dead: cfg.get("reinit_dead")?,
        data_init: cfg.get("data_init")?,
        seed,
        ..defaults
    };
    let adapter_channels: Vec<usize> = cfg.list("adapter_channels")?;
    let adapter_cfg = (!adapter_channels.is_empty())
        .then(|| AdapterConfig { grid, in_channels: tcfg.code_dim, channels: adapter_channels });
    if let Some(a) = &adapter_cfg {
        a.validate()?;
    }
    let run = RunDir::create(cfg)?;

    let mut tok = Tokenizer::<f32>::new(tcfg)?;
    let eval_cos = RefCell::new(Vec::new());
    let history = fit(&mut tok, &train, &sched, &fcfg, |t, m| {
        let c = if eval.is_empty() { f64::NAN } else { reconstruction_fidelity(t, &eval, &sched)? };
        eprintln!("epoch {} loss {:.5} cos {:.4} eval {:.4} ppl {:.1}", m.epoch, m.loss, m.cosine, c, m.perplexity);
        eval_cos.borrow_mut().push(c);
        Ok(())
    })?;
    let eval_cos = eval_cos.into_inner();
    tok.freeze();

    let mut m = run.metrics()?;
    m.write_record(["epoch", "loss", "cosine", "commitment", "perplexity", "dead_codes", "reinitialized", "lr", "eval_cosine"])?;
    for (h, &c) in history.iter().zip(&eval_cos) {
        m.write_record([
            h.epoch.to_string(),
            num(h.loss),
            num(h.cosine),
            num(h.commitment),
            num(h.perplexity),
            h.dead_codes.to_string(),
            h.reinitialized.to_string(),
            num(h.lr),
            num(c.is_finite().then_some(c)),
        ])?;
    }
    m.flush()?;
    let col = |f: fn(&vqtok_core::msvq::EpochMetrics) -> f64| history.iter().map(f).collect::<Vec<_>>();
    run.plot("loss.svg", "Tokenizer loss", "epoch", "loss", &[Series::indexed("total", &col(|h| h.loss)), Series::indexed("commitment", &col(|h| h.commitment))])?;
    run.plot(
        "fidelity.svg",
        "Reconstruction cosine",
        "epoch",
        "mean cosine",
        &[Series::indexed("train", &col(|h| h.cosine)), Series::indexed("held-out", &eval_cos)],
    )?;
    run.plot("perplexity.svg", "Codebook perplexity", "epoch", "perplexity", &[Series::indexed("perplexity", &col(|h| h.perplexity))])?;

    let fingerprint = TrainingFingerprint {
        mode: cfg.raw("mode").to_string(),
        seed,
        epochs: fcfg.epochs,
        steps: (fcfg.epochs * fcfg.steps_per_epoch(train.len())) as u64,
        tiles: train.len() as u64,
        data_crc: None,
        final_loss: history.last().map(|h| h.loss),
    };
    let mut art = TokenizerArtifact::new(tok, fingerprint);
    if let Some(acfg) = adapter_cfg {
        let mut store = ParamStore::new();
        let adapter = ConvAdapter::new(&mut store, ADAPTER_PREFIX, acfg, &mut labeled_rng(seed, "adapter-init", 0))?;
        let align = AlignConfig {
            epochs: cfg.get("adapter_epochs")?,
            batch_size: cfg.get("adapter_batch")?,
            lr: cfg.get("adapter_lr")?,
            seed,
            ..AlignConfig::default()
        };
        let curve = adapter_align_pretrain(&adapter, &mut store, &art.tokenizer, &train, &align)?;
        let held = if eval.is_empty() { &train } else { &eval };
        let cos = alignment_cosine(&adapter, &store, &art.tokenizer, held)?;
        println!("adapter alignment cosine {cos:.4}");
        let mut am = csv::Writer::from_path(run.root().join("adapter_metrics.csv"))?;
        am.write_record(["epoch", "loss"])?;
        for (e, l) in curve.iter().enumerate() {
            am.write_record([e.to_string(), num(*l)])?;
        }
        am.flush()?;
        run.plot("adapter.svg", "Adapter alignment", "epoch", "1 - cosine", &[Series::indexed("loss", &curve)])?;
        art.adapter = Some(store);
    }
    let out = run.output(cfg, "output", "checkpoints/tokenizer.pvqt")?;
    save_artifact(&out, &art)?;
    if let (Some(h), Some(c)) = (history.last(), eval_cos.last()) {
        println!("final loss {:.5}, train cosine {:.4}, held-out cosine {c:.4}", h.loss, h.cosine);
    }
    println!("tokenizer written to {}", out.display());
    elapsed_line("train-vq", start);
    Ok(())
}
