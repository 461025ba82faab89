//! `compress`: features to PVQI indices; `decompress`: indices back to
//! PVQF features.

use std::path::PathBuf;
use std::time::Instant;

use vqtok_core::codec::{check_stream_matches, compress_tiles, compression_report, decompress_tiles, CompressionReport, IndexStream};
use vqtok_core::diffmath::DType;
use vqtok_core::synth::{read_feature_file, write_feature_file, TileST};

use super::common::{backbone, check_geometry, elapsed_line, load_tokenizer, synthetic_tiles, RUN_KEYS, SYNTH_KEYS};
use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{num, RunDir};

pub fn compress_keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend(SYNTH_KEYS);
    k.extend([
        key("tokenizer", "", "PVQT tokenizer artifact"),
        key("input", "", "PVQF tiles; synthetic tiles at the tokenizer geometry when unset"),
        key("tiles", "1024", "Synthetic tile count"),
        key("first_id", "0", "Id of the first synthetic tile"),
        key("output", "", "PVQI path [default: <run_dir>/tiles.pvqi]"),
    ]);
    k
}

pub fn decompress_keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend([
        key("tokenizer", "", "PVQT tokenizer artifact"),
        key("input", "", "PVQI index stream"),
        key("output", "", "PVQF path [default: <run_dir>/tiles.pvqf]"),
    ]);
    k
}

pub fn print_report(r: &CompressionReport) {
    println!("compression report");
    println!("  geometry        {}x{} grid, D = {}, d = {}", r.grid, r.grid, r.dim, r.code_dim);
    println!("  schedule        {} ({} indices per tile)", r.schedule, r.index_bytes / 2);
    println!("  dim ratio       {:.2}", r.dim_ratio);
    println!("  bytes per tile  {} raw, {} indices", r.raw_bytes, r.index_bytes);
    println!("  byte ratio      {:.2}", r.byte_ratio);
}

pub fn run_compress(cfg: &RunConfig) -> CliResult<()> {
    let art = load_tokenizer(cfg)?;
    let tok = &art.tokenizer;
    let tiles: Vec<TileST> = match cfg.opt::<PathBuf>("input")? {
        Some(p) => read_feature_file(p)?,
        None => synthetic_tiles(&backbone(cfg, tok.cfg.dim, tok.cfg.grid)?, cfg.get("first_id")?, cfg.get("tiles")?),
    };
    check_geometry(&tiles, tok.cfg.dim, tok.cfg.grid)?;
    let run = RunDir::create(cfg)?;
    let start = Instant::now();
    let stream = compress_tiles(tok, &tiles)?;
    let out = run.output(cfg, "output", "tiles.pvqi")?;
    stream.save(&out)?;
    let secs = start.elapsed().as_secs_f64();
    let report = compression_report(tok.cfg.dim, tok.cfg.code_dim, tok.cfg.grid, &tok.cfg.schedule, DType::F32)?;
    let stream_bytes = std::fs::metadata(&out)?.len();
    let mut m = run.metrics()?;
    m.write_record(["tiles", "raw_bytes", "index_bytes", "stream_bytes", "dim_ratio", "byte_ratio", "seconds", "tiles_per_second"])?;
    m.write_record([
        tiles.len().to_string(),
        (report.raw_bytes * tiles.len()).to_string(),
        (report.index_bytes * tiles.len()).to_string(),
        stream_bytes.to_string(),
        num(report.dim_ratio),
        num(report.byte_ratio),
        num(secs),
        num(tiles.len() as f64 / secs.max(1e-9)),
    ])?;
    m.flush()?;
    print_report(&report);
    println!("compressed {} tiles to {} ({stream_bytes} bytes)", tiles.len(), out.display());
    elapsed_line("compress", start);
    Ok(())
}

pub fn run_decompress(cfg: &RunConfig) -> CliResult<()> {
    let art = load_tokenizer(cfg)?;
    let input: PathBuf = cfg.get("input")?;
    let run = RunDir::create(cfg)?;
    let start = Instant::now();
    let stream = IndexStream::load(&input)?;
    check_stream_matches(&art.tokenizer, stream.codebook_size, &stream.schedule)
        .map_err(|e| CliError::Data(format!("{} does not match the tokenizer: {e}", input.display())))?;
    let tiles = decompress_tiles(&art.tokenizer, &stream)?;
    let out = run.output(cfg, "output", "tiles.pvqf")?;
    let c = &art.tokenizer.cfg;
    write_feature_file(&out, &tiles, Some((c.dim, c.grid, false)))?;
    let secs = start.elapsed().as_secs_f64();
    let mut m = run.metrics()?;
    m.write_record(["tiles", "feature_bytes", "seconds", "tiles_per_second"])?;
    m.write_record([
        tiles.len().to_string(),
        std::fs::metadata(&out)?.len().to_string(),
        num(secs),
        num(tiles.len() as f64 / secs.max(1e-9)),
    ])?;
    m.flush()?;
    println!("decompressed {} tiles to {}", tiles.len(), out.display());
    elapsed_line("decompress", start);
    Ok(())
}
