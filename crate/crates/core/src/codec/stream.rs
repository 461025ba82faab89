//! PVQI index streams.
//!
//! Layout, all little-endian: magic `PVQI`, u32 version, u32 codebook
//! size, u8 scale count K, K × (u16 H, u16 W), u32 tile count, then per
//! tile `i32 x, i32 y` followed by `Σ H_k·W_k` u16 indices in schedule
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::binio::{read_i32, read_magic, read_u16, read_u16s, read_u32, read_u8, write_u16s};
use crate::error::{Error, Result};
use crate::msvq::{MultiScaleTokenMap, ScaleSchedule};

pub const PVQI_MAGIC: [u8; 4] = *b"PVQI";
pub const PVQI_VERSION: u32 = 1;

/// Indices of one tile together with its slide coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileIndices {
    pub coords: (i32, i32),
    pub map: MultiScaleTokenMap,
}

/// A whole stream held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexStream {
    pub codebook_size: usize,
    pub schedule: ScaleSchedule,
    pub tiles: Vec<TileIndices>,
}

fn header_len(k: usize) -> u64 {
    4 + 4 + 4 + 1 + 4 * k as u64 + 4
}

fn check_indices(map: &MultiScaleTokenMap, schedule: &ScaleSchedule, size: usize) -> Result<()> {
    if !map.conforms_to(schedule) {
        return Err(Error::Schedule(format!("tile map {:?} does not match stream schedule {schedule}", map.resolutions())));
    }
    if let Some(m) = map.max_index() {
        if m as usize >= size {
            return Err(Error::IndexOutOfRange { index: m as usize, size });
        }
    }
    Ok(())
}

impl IndexStream {
    pub fn new(codebook_size: usize, schedule: ScaleSchedule) -> Self {
        IndexStream { codebook_size, schedule, tiles: Vec::new() }
    }

    /// Bytes of index payload per tile (coordinates excluded).
    pub fn index_bytes_per_tile(&self) -> usize {
        self.schedule.tokens_per_tile() * 2
    }

    pub fn write_to<W: Write + Seek>(&self, w: W) -> Result<W> {
        let mut sw = IndexStreamWriter::new(w, self.codebook_size, &self.schedule)?;
        for t in &self.tiles {
            sw.write(t)?;
        }
        sw.finish()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.write_to(std::io::Cursor::new(Vec::new()))?.into_inner())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = IndexStreamReader::new(r)?;
        let mut tiles = Vec::with_capacity(reader.tile_count as usize);
        for t in reader.by_ref() {
            tiles.push(t?);
        }
        Ok(IndexStream { codebook_size: reader.codebook_size, schedule: reader.schedule, tiles })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let s = Self::read_from(bytes)?;
        let used = header_len(s.schedule.len()) as usize + s.tiles.len() * (8 + s.index_bytes_per_tile());
        if used != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after index stream", bytes.len() - used)));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = self.write_to(BufWriter::new(File::create(path)?))?;
        w.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = open_index_stream(path)?;
        let (codebook_size, schedule) = (reader.codebook_size, reader.schedule.clone());
        let tiles = reader.collect::<Result<Vec<_>>>()?;
        Ok(IndexStream { codebook_size, schedule, tiles })
    }
}

/// Streaming writer; the tile count is patched in by
/// [`IndexStreamWriter::finish`].
pub struct IndexStreamWriter<W: Write + Seek> {
    inner: W,
    codebook_size: usize,
    schedule: ScaleSchedule,
    count_offset: u64,
    count: u32,
}

impl<W: Write + Seek> IndexStreamWriter<W> {
    pub fn new(mut inner: W, codebook_size: usize, schedule: &ScaleSchedule) -> Result<Self> {
        if codebook_size == 0 || codebook_size > crate::vq::MAX_CODEBOOK_SIZE {
            return Err(Error::Format(format!("codebook size {codebook_size} not addressable by u16 indices")));
        }
        for &(h, w) in schedule.scales() {
            if h > u16::MAX as usize || w > u16::MAX as usize {
                return Err(Error::Schedule(format!("scale {h}x{w} exceeds u16")));
            }
        }
        let start = inner.stream_position()?;
        inner.write_all(&PVQI_MAGIC)?;
        inner.write_all(&PVQI_VERSION.to_le_bytes())?;
        inner.write_all(&(codebook_size as u32).to_le_bytes())?;
        inner.write_all(&[schedule.len() as u8])?;
        for &(h, w) in schedule.scales() {
            inner.write_all(&(h as u16).to_le_bytes())?;
            inner.write_all(&(w as u16).to_le_bytes())?;
        }
        let count_offset = start + header_len(schedule.len()) - 4;
        inner.write_all(&0u32.to_le_bytes())?;
        Ok(IndexStreamWriter { inner, codebook_size, schedule: schedule.clone(), count_offset, count: 0 })
    }

    pub fn write(&mut self, tile: &TileIndices) -> Result<()> {
        check_indices(&tile.map, &self.schedule, self.codebook_size)?;
        if self.count == u32::MAX {
            return Err(Error::Format("tile count overflows u32".into()));
        }
        self.inner.write_all(&tile.coords.0.to_le_bytes())?;
        self.inner.write_all(&tile.coords.1.to_le_bytes())?;
        write_u16s(&mut self.inner, &tile.map.flat())?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(self.count_offset))?;
        self.inner.write_all(&self.count.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Tile-by-tile reader.
pub struct IndexStreamReader<R: Read> {
    inner: R,
    pub codebook_size: usize,
    pub schedule: ScaleSchedule,
    pub tile_count: u32,
    read: u32,
}

impl<R: Read> IndexStreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        read_magic(&mut inner, PVQI_MAGIC)?;
        let version = read_u32(&mut inner, "version")?;
        if version != PVQI_VERSION {
            return Err(Error::Version(version));
        }
        let codebook_size = read_u32(&mut inner, "codebook size")? as usize;
        if codebook_size == 0 || codebook_size > crate::vq::MAX_CODEBOOK_SIZE {
            return Err(Error::Format(format!("codebook size {codebook_size} not addressable by u16 indices")));
        }
        let k = read_u8(&mut inner, "scale count")? as usize;
        let mut scales = Vec::with_capacity(k);
        for _ in 0..k {
            let h = read_u16(&mut inner, "scale height")? as usize;
            let w = read_u16(&mut inner, "scale width")? as usize;
            scales.push((h, w));
        }
        let schedule = ScaleSchedule::new(scales)?;
        let tile_count = read_u32(&mut inner, "tile count")?;
        Ok(IndexStreamReader { inner, codebook_size, schedule, tile_count, read: 0 })
    }

    pub fn next_tile(&mut self) -> Result<Option<TileIndices>> {
        if self.read == self.tile_count {
            return Ok(None);
        }
        let what = format!("tile {} of {}", self.read, self.tile_count);
        let x = read_i32(&mut self.inner, &what)?;
        let y = read_i32(&mut self.inner, &what)?;
        let mut flat = vec![0u16; self.schedule.tokens_per_tile()];
        read_u16s(&mut self.inner, &mut flat, &what)?;
        let map = MultiScaleTokenMap::from_flat(&self.schedule, &flat)?;
        check_indices(&map, &self.schedule, self.codebook_size)?;
        self.read += 1;
        Ok(Some(TileIndices { coords: (x, y), map }))
    }

    /// Consume one byte past the last record to make sure none remain.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after index stream".into())),
        }
    }
}

impl<R: Read> Iterator for IndexStreamReader<R> {
    type Item = Result<TileIndices>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_tile().transpose()
    }
}

/// Open a stream file and check its length against the header.
pub fn open_index_stream(path: impl AsRef<Path>) -> Result<IndexStreamReader<BufReader<File>>> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let reader = IndexStreamReader::new(BufReader::new(file))?;
    let record = 8 + reader.schedule.tokens_per_tile() as u64 * 2;
    let expected = header_len(reader.schedule.len()) + reader.tile_count as u64 * record;
    if len < expected {
        return Err(Error::Truncated(format!("stream has {len} bytes, header implies {expected}")));
    }
    if len > expected {
        return Err(Error::Format(format!("stream has {len} bytes, header implies {expected}")));
    }
    Ok(reader)
}
