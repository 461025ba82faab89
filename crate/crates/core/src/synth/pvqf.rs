//! PVQF feature files.
//!
//! Layout (little-endian): magic `PVQF`, u32 version, u32 D, u32 p,
//! u32 tile_count, u8 has_cls, then per tile i32 x, i32 y and
//! `(n [+1]) × D` f32 values. When present the summary token comes first,
//! followed by the `n = p²` patch tokens in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::TileST;
use crate::binio::{read_f32s, read_i32, read_magic, read_u32, read_u8, write_f32s};
use crate::error::{Error, Result};

pub const PVQF_MAGIC: [u8; 4] = *b"PVQF";
pub const PVQF_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 * 4 + 1;
const COUNT_OFFSET: u64 = 4 + 4 * 3;

/// Streaming writer; the tile count is patched in by [`FeatureWriter::finish`].
pub struct FeatureWriter<W: Write + Seek> {
    inner: W,
    dim: usize,
    grid: usize,
    has_cls: bool,
    count: u32,
}

impl<W: Write + Seek> FeatureWriter<W> {
    pub fn new(mut inner: W, dim: usize, grid: usize, has_cls: bool) -> Result<Self> {
        inner.write_all(&PVQF_MAGIC)?;
        inner.write_all(&PVQF_VERSION.to_le_bytes())?;
        inner.write_all(&(dim as u32).to_le_bytes())?;
        inner.write_all(&(grid as u32).to_le_bytes())?;
        inner.write_all(&0u32.to_le_bytes())?;
        inner.write_all(&[has_cls as u8])?;
        Ok(FeatureWriter { inner, dim, grid, has_cls, count: 0 })
    }

    pub fn write(&mut self, tile: &TileST) -> Result<()> {
        if tile.dim != self.dim || tile.grid != self.grid {
            return Err(Error::Format(format!(
                "tile {} is {}x{}x{}, file holds {}x{}x{}",
                tile.tile_id, tile.grid, tile.grid, tile.dim, self.grid, self.grid, self.dim
            )));
        }
        if tile.tokens.len() != tile.n() * tile.dim {
            return Err(Error::Format(format!("tile {} token buffer has wrong length", tile.tile_id)));
        }
        self.inner.write_all(&tile.coords.0.to_le_bytes())?;
        self.inner.write_all(&tile.coords.1.to_le_bytes())?;
        match (&tile.cls, self.has_cls) {
            (Some(c), true) => write_f32s(&mut self.inner, c)?,
            (None, false) => {}
            (None, true) => return Err(Error::MissingCls(tile.tile_id)),
            (Some(_), false) => {
                return Err(Error::Format(format!("tile {} has a cls token but the file does not", tile.tile_id)))
            }
        }
        write_f32s(&mut self.inner, &tile.tokens)?;
        self.count = self
            .count
            .checked_add(1)
            .ok_or_else(|| Error::Format("tile count overflows u32".into()))?;
        Ok(())
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    /// Patch the tile count into the header and hand back the sink.
    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(COUNT_OFFSET))?;
        self.inner.write_all(&self.count.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader yielding one tile at a time.
pub struct FeatureReader<R: Read> {
    inner: R,
    pub dim: usize,
    pub grid: usize,
    pub has_cls: bool,
    pub tile_count: u32,
    next: u32,
}

impl<R: Read> FeatureReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        read_magic(&mut inner, PVQF_MAGIC)?;
        let version = read_u32(&mut inner, "version")?;
        if version != PVQF_VERSION {
            return Err(Error::Version(version));
        }
        let dim = read_u32(&mut inner, "dim")? as usize;
        let grid = read_u32(&mut inner, "grid")? as usize;
        let tile_count = read_u32(&mut inner, "tile count")?;
        let has_cls = match read_u8(&mut inner, "cls flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("cls flag must be 0 or 1, got {other}"))),
        };
        if dim == 0 || grid == 0 {
            return Err(Error::Format(format!("degenerate geometry D={dim} p={grid}")));
        }
        Ok(FeatureReader { inner, dim, grid, has_cls, tile_count, next: 0 })
    }

    /// Bytes per tile record.
    pub fn record_len(&self) -> u64 {
        8 + ((self.grid * self.grid + self.has_cls as usize) * self.dim * 4) as u64
    }

    pub fn next_tile(&mut self) -> Result<Option<TileST>> {
        if self.next >= self.tile_count {
            return Ok(None);
        }
        let what = format!("tile {} of {}", self.next, self.tile_count);
        let x = read_i32(&mut self.inner, &what)?;
        let y = read_i32(&mut self.inner, &what)?;
        let cls = if self.has_cls {
            let mut c = vec![0f32; self.dim];
            read_f32s(&mut self.inner, &mut c, &what)?;
            Some(c)
        } else {
            None
        };
        let mut tokens = vec![0f32; self.grid * self.grid * self.dim];
        read_f32s(&mut self.inner, &mut tokens, &what)?;
        let tile = TileST { tile_id: self.next as u64, coords: (x, y), grid: self.grid, dim: self.dim, tokens, cls };
        self.next += 1;
        Ok(Some(tile))
    }
}

impl<R: Read> Iterator for FeatureReader<R> {
    type Item = Result<TileST>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_tile() {
            Ok(Some(t)) => Some(Ok(t)),
            Ok(None) => None,
            Err(e) => {
                self.next = self.tile_count;
                Some(Err(e))
            }
        }
    }
}

/// Open a file for streaming, checking the header against the file size.
pub fn open_feature_file(path: impl AsRef<Path>) -> Result<FeatureReader<BufReader<File>>> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let reader = FeatureReader::new(BufReader::new(file))?;
    let expected = HEADER_LEN + reader.tile_count as u64 * reader.record_len();
    if len < expected {
        return Err(Error::Truncated(format!("file has {len} bytes, header implies {expected}")));
    }
    if len > expected {
        return Err(Error::Format(format!("file has {len} bytes, header implies {expected}")));
    }
    Ok(reader)
}

/// Read every tile of a file.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Vec<TileST>> {
    open_feature_file(path)?.collect()
}

/// Write `tiles` to `path`; geometry is taken from the first tile.
pub fn write_feature_file<'a>(
    path: impl AsRef<Path>,
    tiles: impl IntoIterator<Item = &'a TileST>,
    geometry: Option<(usize, usize, bool)>,
) -> Result<u32> {
    let mut iter = tiles.into_iter().peekable();
    let (dim, grid, has_cls) = match (geometry, iter.peek()) {
        (Some(g), _) => g,
        (None, Some(t)) => (t.dim, t.grid, t.cls.is_some()),
        (None, None) => return Err(Error::Format("cannot infer geometry of an empty tile list".into())),
    };
    let mut w = FeatureWriter::new(BufWriter::new(File::create(path)?), dim, grid, has_cls)?;
    for t in iter {
        w.write(t)?;
    }
    let count = w.count();
    w.finish()?;
    Ok(count)
}
