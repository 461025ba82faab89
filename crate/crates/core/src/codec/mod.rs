//! Serialization of tokenizers and compressed index streams, plus the
//! byte accounting that goes with them.

mod artifact;
mod stream;
mod weights;

use serde::{Deserialize, Serialize};

use crate::diffmath::DType;
use crate::error::{Error, Result};
use crate::msvq::{ScaleSchedule, Tokenizer};
use crate::synth::{TileST, REGION_TILES};

pub use artifact::{load_artifact, save_artifact, TokenizerArtifact, TrainingFingerprint, PVQT_MAGIC, PVQT_VERSION};
pub use stream::{
    open_index_stream, IndexStream, IndexStreamReader, IndexStreamWriter, TileIndices, PVQI_MAGIC, PVQI_VERSION,
};
pub use weights::{load_weights, save_weights, WeightsFile, PVQW_MAGIC, PVQW_VERSION};

/// Storage figure quoted for the index of 250k regions, in megabytes.
/// It does not follow from one u16 tile token per tile (that gives
/// 128 MB), so reports print both.
pub const QUOTED_REGION_INDEX_MB: f64 = 65.0;

/// Encode every tile under the tokenizer's schedule. Work is split over
/// the available cores; the output order matches `tiles`.
pub fn compress_tiles(tok: &Tokenizer<f32>, tiles: &[TileST]) -> Result<IndexStream> {
    let mut stream = IndexStream::new(tok.cfg.codebook_size, tok.cfg.schedule.clone());
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(tiles.len().max(1));
    let chunk = tiles.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<TileIndices>>> = std::thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|t| Ok(TileIndices { coords: t.coords, map: tok.msvq_encode(t)? }))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("compression worker panicked")).collect()
    });
    for p in parts {
        stream.tiles.extend(p?);
    }
    Ok(stream)
}

/// Decode one tile's indices back to patch tokens.
pub fn decompress_tile(tok: &Tokenizer<f32>, tile: &TileIndices, tile_id: u64) -> Result<TileST> {
    let rec = tok.decode(&tile.map)?;
    TileST::new(tile_id, tile.coords, tok.cfg.grid, tok.cfg.dim, rec.into_data(), None)
}

/// Decode every tile of `stream`. Tile ids are stream positions.
pub fn decompress_tiles(tok: &Tokenizer<f32>, stream: &IndexStream) -> Result<Vec<TileST>> {
    check_stream_matches(tok, stream.codebook_size, &stream.schedule)?;
    stream.tiles.iter().enumerate().map(|(i, t)| decompress_tile(tok, t, i as u64)).collect()
}

pub fn check_stream_matches(tok: &Tokenizer<f32>, codebook_size: usize, schedule: &ScaleSchedule) -> Result<()> {
    if *schedule != tok.cfg.schedule {
        return Err(Error::Schedule(format!("stream schedule {schedule} differs from tokenizer schedule {}", tok.cfg.schedule)));
    }
    if codebook_size != tok.cfg.codebook_size {
        return Err(Error::Schedule(format!(
            "stream codebook size {codebook_size} differs from tokenizer size {}",
            tok.cfg.codebook_size
        )));
    }
    Ok(())
}

/// Size bookkeeping for one tile and for whole regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub dim: usize,
    pub code_dim: usize,
    pub grid: usize,
    pub schedule: ScaleSchedule,
    /// `D / d`.
    pub dim_ratio: f64,
    /// Raw patch-token bytes of one tile.
    pub raw_bytes: usize,
    /// u16 index bytes of one tile under the schedule.
    pub index_bytes: usize,
    pub byte_ratio: f64,
}

impl CompressionReport {
    /// Bytes for the tile-level tokens of `regions` regions.
    pub fn region_token_bytes(regions: u64) -> u64 {
        regions * REGION_TILES as u64 * 2
    }

    /// Bytes for the full multi-scale indices of `regions` regions.
    pub fn region_index_bytes(&self, regions: u64) -> u64 {
        regions * REGION_TILES as u64 * self.index_bytes as u64
    }
}

pub fn compression_report(
    dim: usize,
    code_dim: usize,
    grid: usize,
    schedule: &ScaleSchedule,
    dtype: DType,
) -> Result<CompressionReport> {
    if dim == 0 || code_dim == 0 {
        return Err(Error::Config("feature and code dims must be positive".into()));
    }
    schedule.check_grid(grid)?;
    let elem = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let raw_bytes = grid * grid * dim * elem;
    let index_bytes = schedule.tokens_per_tile() * 2;
    Ok(CompressionReport {
        dim,
        code_dim,
        grid,
        schedule: schedule.clone(),
        dim_ratio: dim as f64 / code_dim as f64,
        raw_bytes,
        index_bytes,
        byte_ratio: raw_bytes as f64 / index_bytes as f64,
    })
}
