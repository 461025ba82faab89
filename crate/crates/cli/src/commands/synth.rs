//! Write synthetic tiles or regions to a PVQF file.

use std::time::Instant;

use vqtok_core::synth::{write_feature_file, TileST};

use super::common::{backbone, elapsed_line, synthetic_tiles, GEOMETRY_KEYS, RUN_KEYS, SYNTH_KEYS};
use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;

pub fn keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend(GEOMETRY_KEYS);
    k.extend(SYNTH_KEYS);
    k.extend([
        key("kind", "tiles", "tiles (independent tiles) or regions (16x16 tile blocks, row-major)"),
        key("count", "1024", "Number of tiles or regions"),
        key("first_id", "0", "Id of the first tile or region"),
        key("output", "", "PVQF path [default: <run_dir>/features.pvqf]"),
    ]);
    k
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let start = Instant::now();
    let run = RunDir::create(cfg)?;
    let bb = backbone(cfg, cfg.get("synth.dim")?, cfg.get("synth.grid")?)?;
    let count: usize = cfg.get("count")?;
    let first: u64 = cfg.get("first_id")?;
    let tiles: Vec<TileST> = match cfg.raw("kind") {
        "tiles" => synthetic_tiles(&bb, first, count),
        "regions" => (first..first + count as u64).flat_map(|r| bb.generate_region(r)).collect(),
        other => return Err(CliError::Config(format!("unknown kind `{other}` (tiles, regions)"))),
    };
    let out = run.output(cfg, "output", "features.pvqf")?;
    let c = bb.config();
    let written = write_feature_file(&out, &tiles, Some((c.dim, c.grid, c.with_cls)))?;
    let mut m = run.metrics()?;
    m.write_record(["kind", "count", "tiles", "bytes"])?;
    let bytes = std::fs::metadata(&out)?.len();
    m.write_record([cfg.raw("kind").to_string(), count.to_string(), written.to_string(), bytes.to_string()])?;
    m.flush()?;
    println!("wrote {written} tiles ({bytes} bytes) to {}", out.display());
    elapsed_line("synth", start);
    Ok(())
}
