//! Cross-validated slide classification or survival training.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vqtok_core::codec::{check_stream_matches, load_weights, IndexStream, TokenizerArtifact, WeightsFile};
use vqtok_core::diffmath::{AdamWConfig, Tensor};
use vqtok_core::downstream::{
    classify_train, mean_std, planted_benchmark, quantile_cuts, survival_train, time_bin, AdapterMode, BagTiles, ConvAdapter,
    FinetuneConfig, FoldCurve, HeadKind, InitKind, Label, PlantedConfig, PlantedSignal, PretrainedWeights, SlideBag, ADAPTER_PREFIX,
};
use vqtok_core::ssl::{mean_pool_latent, PretrainConfig, WsiConfig};

use super::common::{backbone, elapsed_line, load_tokenizer, RUN_KEYS, SYNTH_KEYS};
use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{num, RunDir};
use crate::svg::Series;

pub fn keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend(SYNTH_KEYS);
    k.extend([
        key("tokenizer", "", "PVQT tokenizer artifact"),
        key("task", "classify", "classify or surv"),
        key("source", "planted", "planted (synthetic benchmark) or manifest"),
        key("manifest", "", "CSV with path,x,y,slide and label (classify) or time,event (surv); optional index column"),
        key("bags", "30", "Planted slides"),
        key("signal", "composition", "Planted signal: composition or projection"),
        key("margin", "0", "Fraction of planted slides around the median score left out of classification"),
        key("censor_rate", "0.3", "Fraction of planted slides with censored survival"),
        key("features", "adapter", "Tile inputs: adapter (conv adapter over latents) or latent (mean-pooled latents)"),
        key("head", "abmil", "abmil or roformer"),
        key("init", "scratch", "scratch or pretrained"),
        key("pretrained", "", "PVQW weights from pretrain, required for init = pretrained"),
        key("adapter", "pt-ft", "Adapter mode: rd-fz, rd-ft, pt-fz or pt-ft"),
        key("adapter_channels", "", "Adapter widths [default: those of the artifact adapter, else 128,256,512,1024]"),
        key("epochs", "20", "Epochs per fold"),
        key("batch_size", "1", "Slides per step"),
        key("lr", "1e-4", "Learning rate"),
        key("weight_decay", "1e-4", "AdamW weight decay"),
        key("folds", "5", "Cross-validation folds"),
        key("lora_rank", "16", "LoRA rank for pretrained init"),
        key("lora_alpha", "16", "LoRA scale numerator"),
        key("abmil_hidden", "128", "ABMIL embedding width (taken from the checkpoint when pretrained)"),
        key("abmil_attn", "64", "ABMIL attention width (taken from the checkpoint when pretrained)"),
        key("width", "512", "Transformer width (taken from the checkpoint when pretrained)"),
        key("depth", "6", "Transformer blocks (taken from the checkpoint when pretrained)"),
        key("heads", "8", "Transformer heads (taken from the checkpoint when pretrained)"),
        key("mlp_ratio", "4", "Transformer MLP expansion (taken from the checkpoint when pretrained)"),
        key("bins", "4", "Discrete survival time bins"),
    ]);
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Classify,
    Survival,
}

fn task(s: &str) -> CliResult<Task> {
    match s {
        "classify" | "cls" => Ok(Task::Classify),
        "surv" | "survival" => Ok(Task::Survival),
        other => Err(CliError::Config(format!("unknown task `{other}` (classify, surv)"))),
    }
}

/// Head settings stored with pretrained weights override the config so
/// the resolved file reproduces the run.
fn adopt_checkpoint(cfg: &mut RunConfig, w: &WeightsFile) -> CliResult<()> {
    let objective = w.meta["objective"].as_str().unwrap_or("");
    let head = match objective {
        "abmil" => "abmil",
        "mim" => "roformer",
        other => return Err(CliError::Data(format!("checkpoint objective `{other}` is not abmil or mim"))),
    };
    if cfg.raw("head") != head {
        return Err(CliError::Config(format!("checkpoint holds a {objective} model; set head = {head}")));
    }
    let p: PretrainConfig = serde_json::from_value(w.meta["config"].clone())
        .map_err(|e| CliError::Data(format!("checkpoint metadata lacks its pretraining config: {e}")))?;
    cfg.set("abmil_hidden", p.abmil_hidden.to_string())?;
    cfg.set("abmil_attn", p.abmil_attn.to_string())?;
    cfg.set("width", p.wsi.width.to_string())?;
    cfg.set("depth", p.wsi.depth.to_string())?;
    cfg.set("heads", p.wsi.heads.to_string())?;
    cfg.set("mlp_ratio", p.wsi.mlp_ratio.to_string())?;
    Ok(())
}

fn finetune_config(cfg: &RunConfig, art: &TokenizerArtifact) -> CliResult<FinetuneConfig> {
    let d = FinetuneConfig::default();
    let mut channels: Vec<usize> = cfg.list("adapter_channels")?;
    if channels.is_empty() {
        channels = match &art.adapter {
            Some(w) => ConvAdapter::from_weights(w, ADAPTER_PREFIX, art.tokenizer.cfg.grid)?.0.cfg.channels,
            None => d.adapter_channels.clone(),
        };
    }
    Ok(FinetuneConfig {
        head: cfg.get::<HeadKind>("head")?,
        init: cfg.get::<InitKind>("init")?,
        adapter_mode: cfg.get::<AdapterMode>("adapter")?,
        adapter_channels: channels,
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        adam: AdamWConfig { weight_decay: cfg.get("weight_decay")?, ..d.adam },
        folds: cfg.get("folds")?,
        lora_rank: cfg.get("lora_rank")?,
        lora_alpha: cfg.get("lora_alpha")?,
        abmil_hidden: cfg.get("abmil_hidden")?,
        abmil_attn: cfg.get("abmil_attn")?,
        wsi: WsiConfig { width: cfg.get("width")?, depth: cfg.get("depth")?, heads: cfg.get("heads")?, mlp_ratio: cfg.get("mlp_ratio")?, ..d.wsi },
        survival_bins: cfg.get("bins")?,
        seed: cfg.get("seed")?,
    })
}

/// Mean-pooled latents in place of the latents themselves.
fn pooled(bag: SlideBag) -> CliResult<SlideBag> {
    let BagTiles::Latents(ls) = &bag.tiles else { return Ok(bag) };
    let width = ls[0].shape()[2];
    let data: Vec<f32> = ls.iter().flat_map(mean_pool_latent).collect();
    Ok(SlideBag::new(BagTiles::Features(Tensor::new(vec![ls.len(), width], data)?), bag.coords, bag.label)?)
}

fn planted_bags(cfg: &RunConfig, art: &TokenizerArtifact, t: Task) -> CliResult<Vec<SlideBag>> {
    let tok = &art.tokenizer;
    let signal = match cfg.raw("signal") {
        "composition" => PlantedSignal::Composition,
        "projection" => PlantedSignal::Projection,
        other => return Err(CliError::Config(format!("unknown signal `{other}` (composition, projection)"))),
    };
    let pc = PlantedConfig {
        signal,
        bags: cfg.get("bags")?,
        margin: cfg.get("margin")?,
        censor_rate: cfg.get("censor_rate")?,
        bins: cfg.get("bins")?,
        seed: cfg.get("data_seed")?,
        ..PlantedConfig::default()
    };
    let bench = planted_benchmark(&backbone(cfg, tok.cfg.dim, tok.cfg.grid)?, tok, &pc)?;
    Ok(match t {
        Task::Classify => bench.classify,
        Task::Survival => bench.survival,
    })
}

struct Row {
    path: PathBuf,
    index: usize,
    xy: (i32, i32),
    slide: String,
    label: Vec<String>,
}

fn read_manifest(path: &Path, t: Task) -> CliResult<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| CliError::Data(format!("manifest lacks a `{name}` column")));
    let (p, x, y, s) = (need("path")?, need("x")?, need("y")?, need("slide")?);
    let label_cols = match t {
        Task::Classify => vec![need("label")?],
        Task::Survival => vec![need("time")?, need("event")?],
    };
    let index = col("index");
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let parse = |c: usize, what: &str| -> CliResult<i64> {
            field(c).parse().map_err(|_| CliError::Data(format!("manifest row {}: bad {what} `{}`", i + 1, field(c))))
        };
        rows.push(Row {
            path: base.join(field(p)),
            index: index.map(|c| parse(c, "index")).transpose()?.unwrap_or(0) as usize,
            xy: (parse(x, "x")? as i32, parse(y, "y")? as i32),
            slide: field(s),
            label: label_cols.iter().map(|&c| field(c)).collect(),
        });
    }
    Ok(rows)
}

fn manifest_bags(cfg: &RunConfig, art: &TokenizerArtifact, t: Task) -> CliResult<Vec<SlideBag>> {
    let path: PathBuf = cfg.get("manifest")?;
    let rows = read_manifest(&path, t)?;
    let tok = &art.tokenizer;
    let mut streams: HashMap<PathBuf, IndexStream> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut slides: HashMap<String, (Vec<Tensor<f32>>, Vec<(i32, i32)>, Vec<String>)> = HashMap::new();
    for r in &rows {
        if !streams.contains_key(&r.path) {
            let s = IndexStream::load(&r.path)?;
            check_stream_matches(tok, s.codebook_size, &s.schedule)
                .map_err(|e| CliError::Data(format!("{} does not match the tokenizer: {e}", r.path.display())))?;
            streams.insert(r.path.clone(), s);
        }
        let stream = &streams[&r.path];
        let tile = stream.tiles.get(r.index).ok_or_else(|| {
            CliError::Data(format!("{} has no tile {} ({} tiles)", r.path.display(), r.index, stream.tiles.len()))
        })?;
        let entry = slides.entry(r.slide.clone()).or_insert_with(|| {
            order.push(r.slide.clone());
            (Vec::new(), Vec::new(), r.label.clone())
        });
        if entry.2 != r.label {
            return Err(CliError::Data(format!("slide `{}` has inconsistent labels", r.slide)));
        }
        entry.0.push(tok.reconstruct_latent(&tile.map)?);
        entry.1.push(r.xy);
    }
    if order.is_empty() {
        return Err(CliError::Data(format!("{} lists no tiles", path.display())));
    }
    let labels: Vec<Label> = match t {
        Task::Classify => {
            let mut names: Vec<&String> = order.iter().map(|s| &slides[s].2[0]).collect();
            names.sort();
            names.dedup();
            order.iter().map(|s| Label::Class(names.binary_search(&&slides[s].2[0]).expect("present"))).collect()
        }
        Task::Survival => {
            let mut times = Vec::new();
            let mut events = Vec::new();
            for s in &order {
                let l = &slides[s].2;
                let time: f64 = l[0].parse().map_err(|_| CliError::Data(format!("slide `{s}`: bad time `{}`", l[0])))?;
                let event = match l[1].as_str() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => return Err(CliError::Data(format!("slide `{s}`: bad event `{other}`"))),
                };
                times.push(time);
                events.push(event);
            }
            let cuts = quantile_cuts(&times, &events, cfg.get("bins")?)?;
            times.iter().zip(&events).map(|(&time, &event)| Label::Survival { time, event, bin: time_bin(time, &cuts) }).collect()
        }
    };
    order
        .iter()
        .zip(labels)
        .map(|(s, label)| {
            let (latents, coords, _) = slides.remove(s).expect("present");
            Ok(SlideBag::new(BagTiles::Latents(latents), coords, label)?)
        })
        .collect()
}

fn summary(name: &str, values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{name} {m:.4} ± {s:.4}")
}

fn curves_plot(run: &RunDir, curves: &[FoldCurve]) -> CliResult<()> {
    let series: Vec<Series> = curves.iter().map(|c| Series::indexed(format!("fold {}", c.fold), &c.losses)).collect();
    run.plot("loss.svg", "Training loss per fold", "epoch", "loss", &series)
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    let t = task(cfg.raw("task"))?;
    let art = load_tokenizer(&cfg)?;
    let init: InitKind = cfg.get("init")?;
    let slide_weights = match (init, cfg.opt::<PathBuf>("pretrained")?) {
        (InitKind::Pretrained, None) => return Err(CliError::Config("init = pretrained needs `pretrained`".into())),
        (InitKind::Pretrained, Some(p)) => {
            let w = load_weights(p)?;
            adopt_checkpoint(&mut cfg, &w)?;
            Some(w)
        }
        (InitKind::Scratch, _) => None,
    };
    let fcfg = finetune_config(&cfg, &art)?;
    let mut bags = match cfg.raw("source") {
        "planted" => planted_bags(&cfg, &art, t)?,
        "manifest" => manifest_bags(&cfg, &art, t)?,
        other => return Err(CliError::Config(format!("unknown source `{other}` (planted, manifest)"))),
    };
    match cfg.raw("features") {
        "adapter" => {}
        "latent" => bags = bags.into_iter().map(pooled).collect::<CliResult<_>>()?,
        other => return Err(CliError::Config(format!("unknown features `{other}` (adapter, latent)"))),
    }
    let run = RunDir::create(&cfg)?;
    let weights = PretrainedWeights { slide: slide_weights.as_ref().map(|w| &w.store), adapter: art.adapter.as_ref() };
    eprintln!("{} slides, {} folds, head {}, init {}, adapter {}", bags.len(), fcfg.folds, fcfg.head, fcfg.init, fcfg.adapter_mode);

    let mut m = run.metrics()?;
    match t {
        Task::Classify => {
            let report = classify_train(&fcfg, &bags, weights)?;
            m.write_record(["fold", "macro_auc", "macro_f1"])?;
            for f in &report.folds {
                m.write_record([f.fold.to_string(), num(f.macro_auc), num(f.macro_f1)])?;
            }
            let auc: Vec<f64> = report.folds.iter().map(|f| f.macro_auc).collect();
            let f1: Vec<f64> = report.folds.iter().map(|f| f.macro_f1).collect();
            let ((am, asd), (fm, fsd)) = (mean_std(&auc), mean_std(&f1));
            m.write_record(["mean".to_string(), num(am), num(fm)])?;
            m.write_record(["std".to_string(), num(asd), num(fsd)])?;
            curves_plot(&run, &report.curves)?;
            let x = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect();
            run.plot("folds.svg", "Held-out metrics per fold", "fold", "score", &[Series::new("macro AUC", x(&auc)), Series::new("macro F1", x(&f1))])?;
            println!("{}", summary("macro AUC", &auc));
            println!("{}", summary("macro F1", &f1));
        }
        Task::Survival => {
            let report = survival_train(&fcfg, &bags, weights)?;
            m.write_record(["fold", "cindex"])?;
            for f in &report.folds {
                m.write_record([f.fold.to_string(), num(f.cindex)])?;
            }
            let c: Vec<f64> = report.folds.iter().map(|f| f.cindex).collect();
            let (cm, csd) = mean_std(&c);
            m.write_record(["mean".to_string(), num(cm)])?;
            m.write_record(["std".to_string(), num(csd)])?;
            curves_plot(&run, &report.curves)?;
            run.plot("folds.svg", "Held-out c-index per fold", "fold", "c-index", &[Series::indexed("c-index", &c)])?;
            println!("{}", summary("c-index", &c));
        }
    }
    m.flush()?;
    elapsed_line("finetune", start);
    Ok(())
}
