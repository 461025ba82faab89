use std::path::PathBuf;

use vqtok_core::codec::{load_artifact, TokenizerArtifact};
use vqtok_core::synth::{SynthBackbone, SynthConfig, TileST};

use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};

pub const RUN_KEYS: [Key; 2] = [
    key("run_dir", "", "Directory for config.resolved, metrics.csv, plots/ and checkpoints/"),
    key("seed", "0", "Seed for model init and data order"),
];

/// Generator keys other than the geometry.
pub const SYNTH_KEYS: [Key; 9] = [
    key("data_seed", "0", "Seed of the synthetic feature generator"),
    key("synth.prototypes", "8", "Number of prototype feature vectors"),
    key("synth.smoothness", "12", "Length scale of the mixture field in patch units"),
    key("synth.noise", "0.01", "Std of additive token noise"),
    key("synth.intrinsic_dim", "16", "Rank of the prototype subspace"),
    key("synth.temperature", "0.5", "Softmax temperature of the mixture weights"),
    key("synth.fourier_features", "32", "Random Fourier features in the field"),
    key("synth.detail_ratio", "0.25", "Length-scale ratio of the fine field component"),
    key("synth.with_cls", "true", "Attach a summary vector to each tile"),
];

pub const GEOMETRY_KEYS: [Key; 2] = [
    key("synth.dim", "64", "Feature dimension of synthetic tiles"),
    key("synth.grid", "14", "Patch grid side of synthetic tiles"),
];

pub fn synth_config(cfg: &RunConfig, dim: usize, grid: usize) -> CliResult<SynthConfig> {
    let sc = SynthConfig {
        seed: cfg.get("data_seed")?,
        dim,
        grid,
        prototypes: cfg.get("synth.prototypes")?,
        smoothness: cfg.get("synth.smoothness")?,
        noise: cfg.get("synth.noise")?,
        intrinsic_dim: cfg.get("synth.intrinsic_dim")?,
        temperature: cfg.get("synth.temperature")?,
        fourier_features: cfg.get("synth.fourier_features")?,
        detail_ratio: cfg.get("synth.detail_ratio")?,
        with_cls: cfg.get("synth.with_cls")?,
    };
    sc.validate()?;
    Ok(sc)
}

pub fn backbone(cfg: &RunConfig, dim: usize, grid: usize) -> CliResult<SynthBackbone> {
    Ok(SynthBackbone::new(synth_config(cfg, dim, grid)?)?)
}

/// Tiles `first..first + count` of the generator.
pub fn synthetic_tiles(bb: &SynthBackbone, first: u64, count: usize) -> Vec<TileST> {
    (first..first + count as u64).map(|i| bb.generate_tile(i)).collect()
}

pub fn load_tokenizer(cfg: &RunConfig) -> CliResult<TokenizerArtifact> {
    let path: PathBuf = cfg.get("tokenizer")?;
    let mut art = load_artifact(&path)?;
    art.tokenizer.freeze();
    Ok(art)
}

/// Tiles must match the tokenizer geometry.
pub fn check_geometry(tiles: &[TileST], dim: usize, grid: usize) -> CliResult<()> {
    if let Some(t) = tiles.iter().find(|t| t.dim != dim || t.grid != grid) {
        return Err(CliError::Data(format!(
            "tile {} has geometry {}x{}x{}, tokenizer expects {grid}x{grid}x{dim}",
            t.tile_id, t.grid, t.grid, t.dim
        )));
    }
    Ok(())
}

pub fn elapsed_line(what: &str, start: std::time::Instant) {
    eprintln!("{what} in {:.2}s", start.elapsed().as_secs_f64());
}
