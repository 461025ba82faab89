//! Compression accounting for a tokenizer or a bare geometry, plus
//! charts of another run's metrics.

use std::path::PathBuf;

use vqtok_core::codec::{compression_report, CompressionReport, QUOTED_REGION_INDEX_MB};
use vqtok_core::diffmath::DType;
use vqtok_core::msvq::ScaleSchedule;
use vqtok_core::synth::REGION_TILES;

use super::common::{load_tokenizer, RUN_KEYS};
use super::compress::print_report;
use crate::config::{key, Key, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{num, RunDir, METRICS};
use crate::svg::Series;

pub fn keys() -> Vec<Key> {
    let mut k = RUN_KEYS.to_vec();
    k.extend([
        key("tokenizer", "", "PVQT artifact whose geometry is reported; the keys below are used when unset"),
        key("dim", "1024", "Feature dimension D"),
        key("code_dim", "16", "Code dimension d"),
        key("grid", "14", "Patch grid side"),
        key("scales", "", "Scale list [default: the default list for the grid]"),
        key("dtype", "f32", "Raw feature element type: f32 or f64"),
        key("regions", "250000", "Region count for storage totals"),
        key("source", "", "Run directory whose metrics.csv is charted into plots/"),
    ]);
    k
}

fn geometry(cfg: &RunConfig) -> CliResult<(usize, usize, usize, ScaleSchedule)> {
    if cfg.is_set("tokenizer") {
        let t = load_tokenizer(cfg)?.tokenizer.cfg;
        return Ok((t.dim, t.code_dim, t.grid, t.schedule));
    }
    let grid: usize = cfg.get("grid")?;
    let sched = cfg.opt::<ScaleSchedule>("scales")?.unwrap_or_else(|| ScaleSchedule::default_for(grid));
    Ok((cfg.get("dim")?, cfg.get("code_dim")?, grid, sched))
}

/// Every numeric column of `source/metrics.csv` against its first column.
fn chart_source(run: &RunDir, source: &std::path::Path) -> CliResult<usize> {
    let mut rdr = csv::Reader::from_path(source.join(METRICS))?;
    let headers = rdr.headers()?.clone();
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .filter_map(|r| r.ok())
        .filter_map(|r| r.iter().map(|v| if v.is_empty() { Ok(f64::NAN) } else { v.parse::<f64>() }).collect::<Result<Vec<_>, _>>().ok())
        .collect();
    let mut charts = 0;
    for (c, name) in headers.iter().enumerate().skip(1) {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[c])).filter(|p| p.1.is_finite()).collect();
        if pts.is_empty() {
            continue;
        }
        run.plot(&format!("source-{name}.svg"), name, &headers[0], name, &[Series::new(name, pts)])?;
        charts += 1;
    }
    Ok(charts)
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let (dim, code_dim, grid, sched) = geometry(cfg)?;
    let dtype = match cfg.raw("dtype") {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(CliError::Config(format!("unknown dtype `{other}` (f32, f64)"))),
    };
    let regions: u64 = cfg.get("regions")?;
    let report = compression_report(dim, code_dim, grid, &sched, dtype)?;
    let run = RunDir::create(cfg)?;

    let mut m = run.metrics()?;
    m.write_record(["scales", "tokens_per_tile", "raw_bytes", "index_bytes", "byte_ratio", "dim_ratio", "region_index_bytes"])?;
    // truncating the schedule after k scales
    let mut bytes = Vec::new();
    for k in 1..=sched.len() {
        let s = sched.prefix(k)?;
        let index_bytes = s.tokens_per_tile() * 2;
        m.write_record([
            s.to_string(),
            s.tokens_per_tile().to_string(),
            report.raw_bytes.to_string(),
            index_bytes.to_string(),
            num(report.raw_bytes as f64 / index_bytes as f64),
            num(report.dim_ratio),
            (regions * REGION_TILES as u64 * index_bytes as u64).to_string(),
        ])?;
        bytes.push((k as f64, index_bytes as f64));
    }
    m.flush()?;
    run.plot("index_bytes.svg", "Index bytes per tile", "scales kept", "bytes", &[Series::new("u16 indices", bytes)])?;

    print_report(&report);
    let mb = |b: u64| b as f64 / 1e6;
    println!("  {regions} regions");
    println!("    tile-level tokens   {:.1} MB", mb(CompressionReport::region_token_bytes(regions)));
    println!("    full indices        {:.1} MB", mb(report.region_index_bytes(regions)));
    println!("    quoted index size   {QUOTED_REGION_INDEX_MB} MB");
    if let Some(src) = cfg.opt::<PathBuf>("source")? {
        let n = chart_source(&run, &src)?;
        println!("charted {n} columns of {}", src.join(METRICS).display());
    }
    Ok(())
}
