//! Classic little-endian TIFF: tiled or striped reading, tiled pyramid writing.
//!
//! Pyramids are stored as chained IFDs in descending resolution. The writer
//! emits Deflate-compressed square tiles and builds each reduced level from
//! the previous one with a 2x2 box mean. Level-0 tiles are written as they
//! arrive; each reduced level buffers one tile row.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;

use super::{check_channels, LevelDescriptor, PyramidImage, Raster, TileProvider};
use crate::error::{Error, Result};

const TAG_NEW_SUBFILE_TYPE: u16 = 254;
const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_PREDICTOR: u16 = 317;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_TILE_OFFSETS: u16 = 324;
const TAG_TILE_BYTE_COUNTS: u16 = 325;
const TAG_SAMPLE_FORMAT: u16 = 339;

const TYPE_BYTE: u16 = 1;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;

const COMPRESSION_NONE: u16 = 1;
const COMPRESSION_DEFLATE: u16 = 8;
const COMPRESSION_DEFLATE_OLD: u16 = 32946;

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Entry {
    typ: u16,
    count: u32,
    raw: [u8; 4],
}

fn type_size(typ: u16) -> Option<u64> {
    match typ {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

struct IfdReader<'a> {
    file: &'a mut File,
    len: u64,
}

impl IfdReader<'_> {
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<()> {
        if offset + buf.len() as u64 > self.len {
            return Err(Error::format(
                "TIFF",
                format!("offset {offset} + {} beyond end of file", buf.len()),
            ));
        }
        self.file.seek(SeekFrom::Start(offset))?;
        self.file.read_exact(buf)?;
        Ok(())
    }

    fn read_ifd(&mut self, offset: u64) -> Result<(HashMap<u16, Entry>, u64)> {
        let mut n = [0u8; 2];
        self.read_at(offset, &mut n)?;
        let count = u16::from_le_bytes(n) as usize;
        let mut body = vec![0u8; count * 12 + 4];
        self.read_at(offset + 2, &mut body)?;
        let mut entries = HashMap::with_capacity(count);
        for e in body[..count * 12].chunks_exact(12) {
            let tag = u16::from_le_bytes([e[0], e[1]]);
            entries.insert(
                tag,
                Entry {
                    typ: u16::from_le_bytes([e[2], e[3]]),
                    count: u32::from_le_bytes([e[4], e[5], e[6], e[7]]),
                    raw: [e[8], e[9], e[10], e[11]],
                },
            );
        }
        let t = &body[count * 12..];
        let next = u32::from_le_bytes([t[0], t[1], t[2], t[3]]) as u64;
        Ok((entries, next))
    }

    fn values(&mut self, tag: u16, e: &Entry) -> Result<Vec<u64>> {
        let size = type_size(e.typ)
            .ok_or_else(|| Error::format("TIFF", format!("tag {tag} has unknown type {}", e.typ)))?;
        if !matches!(e.typ, TYPE_BYTE | TYPE_SHORT | TYPE_LONG) {
            return Err(Error::format(
                "TIFF",
                format!("tag {tag} has non-integer type {}", e.typ),
            ));
        }
        let total = size * e.count as u64;
        if total > self.len {
            return Err(Error::format("TIFF", format!("tag {tag} count {} too large", e.count)));
        }
        let bytes = if total <= 4 {
            e.raw[..total as usize].to_vec()
        } else {
            let mut buf = vec![0u8; total as usize];
            self.read_at(u32::from_le_bytes(e.raw) as u64, &mut buf)?;
            buf
        };
        Ok(match e.typ {
            TYPE_BYTE => bytes.iter().map(|&b| b as u64).collect(),
            TYPE_SHORT => bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u64)
                .collect(),
            _ => bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as u64)
                .collect(),
        })
    }
}

#[derive(Debug)]
struct TiffLevel {
    width: usize,
    height: usize,
    chunk_width: usize,
    chunk_height: usize,
    tiled: bool,
    compression: u16,
    offsets: Vec<u64>,
    counts: Vec<u64>,
}

struct TiffTiles {
    file: Mutex<File>,
    channels: usize,
    levels: Vec<TiffLevel>,
}

fn required(
    r: &mut IfdReader<'_>,
    entries: &HashMap<u16, Entry>,
    tag: u16,
    name: &str,
    ifd: usize,
) -> Result<Vec<u64>> {
    let e = entries
        .get(&tag)
        .ok_or_else(|| Error::format("TIFF", format!("IFD {ifd} lacks {name}")))?;
    r.values(tag, e)
}

fn optional_scalar(
    r: &mut IfdReader<'_>,
    entries: &HashMap<u16, Entry>,
    tag: u16,
    default: u64,
) -> Result<u64> {
    match entries.get(&tag) {
        Some(e) => Ok(r.values(tag, e)?.first().copied().unwrap_or(default)),
        None => Ok(default),
    }
}

fn parse_level(
    r: &mut IfdReader<'_>,
    entries: &HashMap<u16, Entry>,
    ifd: usize,
) -> Result<(TiffLevel, usize)> {
    let width = required(r, entries, TAG_IMAGE_WIDTH, "ImageWidth", ifd)?[0] as usize;
    let height = required(r, entries, TAG_IMAGE_LENGTH, "ImageLength", ifd)?[0] as usize;
    let channels = optional_scalar(r, entries, TAG_SAMPLES_PER_PIXEL, 1)? as usize;
    check_channels(channels)?;
    if let Some(e) = entries.get(&TAG_BITS_PER_SAMPLE) {
        let bps = r.values(TAG_BITS_PER_SAMPLE, e)?;
        if bps.iter().any(|&b| b != 8) {
            return Err(Error::Unsupported(format!(
                "TIFF bits per sample {bps:?} in IFD {ifd} (only 8-bit)"
            )));
        }
    }
    let sample_format = optional_scalar(r, entries, TAG_SAMPLE_FORMAT, 1)?;
    if sample_format != 1 {
        return Err(Error::Unsupported(format!(
            "TIFF sample format {sample_format} in IFD {ifd} (only unsigned integer)"
        )));
    }
    let photometric = optional_scalar(r, entries, TAG_PHOTOMETRIC, if channels == 3 { 2 } else { 1 })?;
    let expected_photometric = if channels == 3 { 2 } else { 1 };
    if photometric != expected_photometric {
        return Err(Error::Unsupported(format!(
            "TIFF photometric interpretation {photometric} with {channels} samples in IFD {ifd}"
        )));
    }
    if channels > 1 && optional_scalar(r, entries, TAG_PLANAR_CONFIG, 1)? != 1 {
        return Err(Error::Unsupported(format!(
            "planar TIFF sample layout in IFD {ifd}"
        )));
    }
    if optional_scalar(r, entries, TAG_PREDICTOR, 1)? != 1 {
        return Err(Error::Unsupported(format!("TIFF predictor in IFD {ifd}")));
    }
    let compression = optional_scalar(r, entries, TAG_COMPRESSION, 1)? as u16;
    if !matches!(
        compression,
        COMPRESSION_NONE | COMPRESSION_DEFLATE | COMPRESSION_DEFLATE_OLD
    ) {
        return Err(Error::Unsupported(format!(
            "TIFF compression {compression} in IFD {ifd} (only none or Deflate)"
        )));
    }

    let tiled = entries.contains_key(&TAG_TILE_WIDTH);
    let (chunk_width, chunk_height, offsets, counts) = if tiled {
        let tw = required(r, entries, TAG_TILE_WIDTH, "TileWidth", ifd)?[0] as usize;
        let th = required(r, entries, TAG_TILE_LENGTH, "TileLength", ifd)?[0] as usize;
        let offsets = required(r, entries, TAG_TILE_OFFSETS, "TileOffsets", ifd)?;
        let counts = required(r, entries, TAG_TILE_BYTE_COUNTS, "TileByteCounts", ifd)?;
        (tw, th, offsets, counts)
    } else {
        let rps = optional_scalar(r, entries, TAG_ROWS_PER_STRIP, u32::MAX as u64)? as usize;
        let offsets = required(r, entries, TAG_STRIP_OFFSETS, "StripOffsets", ifd)?;
        let counts = required(r, entries, TAG_STRIP_BYTE_COUNTS, "StripByteCounts", ifd)?;
        (width, rps.min(height).max(1), offsets, counts)
    };
    if width == 0 || height == 0 || chunk_width == 0 || chunk_height == 0 {
        return Err(Error::format("TIFF", format!("IFD {ifd} has zero dimensions")));
    }
    let chunks = width.div_ceil(chunk_width) * height.div_ceil(chunk_height);
    if offsets.len() != chunks || counts.len() != chunks {
        return Err(Error::format(
            "TIFF",
            format!(
                "IFD {ifd} lists {} offsets / {} byte counts for {chunks} chunks",
                offsets.len(),
                counts.len()
            ),
        ));
    }
    Ok((
        TiffLevel {
            width,
            height,
            chunk_width,
            chunk_height,
            tiled,
            compression,
            offsets,
            counts,
        },
        channels,
    ))
}

pub(crate) fn open_tiff(path: &Path) -> Result<PyramidImage> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut header = [0u8; 8];
    if len < 8 {
        return Err(Error::format("TIFF", "file shorter than header"));
    }
    file.read_exact(&mut header)?;
    if &header[..2] == b"MM" {
        return Err(Error::Unsupported("big-endian TIFF".into()));
    }
    if &header[..2] != b"II" {
        return Err(Error::format("TIFF", "bad byte-order mark"));
    }
    match u16::from_le_bytes([header[2], header[3]]) {
        42 => {}
        43 => return Err(Error::Unsupported("BigTIFF".into())),
        v => return Err(Error::format("TIFF", format!("bad magic {v}"))),
    }
    let mut next = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as u64;
    let mut levels = Vec::new();
    let mut channels = None;
    let mut seen = std::collections::HashSet::new();
    {
        let mut reader = IfdReader {
            file: &mut file,
            len,
        };
        while next != 0 {
            if !seen.insert(next) {
                return Err(Error::format("TIFF", "IFD chain loops"));
            }
            let (entries, after) = reader.read_ifd(next)?;
            let (level, ch) = parse_level(&mut reader, &entries, levels.len())?;
            match channels {
                None => channels = Some(ch),
                Some(c) if c != ch => {
                    return Err(Error::format(
                        "TIFF",
                        format!("IFD {} has {ch} channels, level 0 has {c}", levels.len()),
                    ))
                }
                _ => {}
            }
            levels.push(level);
            next = after;
        }
    }
    let channels = channels.ok_or_else(|| Error::format("TIFF", "no IFDs"))?;
    let descriptors = levels
        .iter()
        .map(|l| LevelDescriptor {
            width: l.width,
            height: l.height,
            tile_width: l.chunk_width,
            tile_height: l.chunk_height,
        })
        .collect();
    let provider = TiffTiles {
        file: Mutex::new(file),
        channels,
        levels,
    };
    PyramidImage::from_provider(channels, descriptors, Arc::new(provider))
}

impl TileProvider for TiffTiles {
    fn read_tile(&self, level: usize, col: usize, row: usize) -> Result<Raster> {
        let l = self
            .levels
            .get(level)
            .ok_or_else(|| Error::invalid(format!("level {level} does not exist")))?;
        let across = l.width.div_ceil(l.chunk_width);
        if col >= across || row >= l.height.div_ceil(l.chunk_height) {
            return Err(Error::invalid(format!("tile ({col}, {row}) out of range")));
        }
        let index = row * across + col;
        let (offset, count) = (l.offsets[index], l.counts[index] as usize);
        let mut encoded = vec![0u8; count];
        {
            let mut f = self.file.lock().expect("tiff file lock poisoned");
            f.seek(SeekFrom::Start(offset))?;
            f.read_exact(&mut encoded)?;
        }
        let ch = self.channels;
        let valid_w = l.chunk_width.min(l.width - col * l.chunk_width);
        let valid_h = l.chunk_height.min(l.height - row * l.chunk_height);
        // Tiles are always stored full size; strips only as tall as they are.
        let stored_h = if l.tiled { l.chunk_height } else { valid_h };
        let expected = l.chunk_width * stored_h * ch;
        let decoded = match l.compression {
            COMPRESSION_NONE => encoded,
            _ => {
                let mut out = Vec::with_capacity(expected);
                ZlibDecoder::new(&encoded[..])
                    .read_to_end(&mut out)
                    .map_err(|e| Error::format("TIFF", format!("tile {index} of level {level}: {e}")))?;
                out
            }
        };
        if decoded.len() < l.chunk_width * (valid_h - 1) * ch + valid_w * ch {
            return Err(Error::format(
                "TIFF",
                format!(
                    "tile {index} of level {level} decodes to {} bytes, expected {expected}",
                    decoded.len()
                ),
            ));
        }
        if valid_w == l.chunk_width && decoded.len() >= valid_w * valid_h * ch {
            let mut data = decoded;
            data.truncate(valid_w * valid_h * ch);
            return Raster::new(valid_w, valid_h, ch, data);
        }
        let mut data = Vec::with_capacity(valid_w * valid_h * ch);
        for y in 0..valid_h {
            let s = y * l.chunk_width * ch;
            data.extend_from_slice(&decoded[s..s + valid_w * ch]);
        }
        Raster::new(valid_w, valid_h, ch, data)
    }
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Level-0 pixel supplier for [`save_pyramid_tiff`].
///
/// Tiles are requested in row-major order; returning `None` means the source
/// ran out before covering its declared dimensions.
pub trait TileSource {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn channels(&self) -> usize;
    fn next_tile(&mut self, x: usize, y: usize, w: usize, h: usize) -> Result<Option<Raster>>;
}

impl TileSource for Raster {
    fn width(&self) -> usize {
        Raster::width(self)
    }

    fn height(&self) -> usize {
        Raster::height(self)
    }

    fn channels(&self) -> usize {
        Raster::channels(self)
    }

    fn next_tile(&mut self, x: usize, y: usize, w: usize, h: usize) -> Result<Option<Raster>> {
        self.crop(x, y, w, h).map(Some)
    }
}

/// Copies level 0 of a pyramid.
impl TileSource for PyramidImage {
    fn width(&self) -> usize {
        PyramidImage::width(self)
    }

    fn height(&self) -> usize {
        PyramidImage::height(self)
    }

    fn channels(&self) -> usize {
        PyramidImage::channels(self)
    }

    fn next_tile(&mut self, x: usize, y: usize, w: usize, h: usize) -> Result<Option<Raster>> {
        self.read_region(0, x as i64, y as i64, w, h).map(Some)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteStats {
    pub tiles_written: usize,
    pub bytes_written: u64,
    /// (width, height) of every written level.
    pub level_dims: Vec<(usize, usize)>,
}

struct LevelBand {
    width: usize,
    height: usize,
    // Rows [band_y, band_y + rows) of the level, `tile` rows at most.
    buf: Vec<u8>,
    rows: usize,
    band_y: usize,
    offsets: Vec<u32>,
    counts: Vec<u32>,
}

struct PyramidWriter<W: Write + Seek> {
    out: W,
    pos: u64,
    tile: usize,
    channels: usize,
    levels: Vec<LevelBand>,
    scratch: Vec<u8>,
    encoded: Vec<u8>,
    stats: WriteStats,
}

impl<W: Write + Seek> PyramidWriter<W> {
    fn write_bytes(&mut self, bytes: &[u8]) -> Result<u64> {
        let at = self.pos;
        self.out.write_all(bytes)?;
        self.pos += bytes.len() as u64;
        Ok(at)
    }

    fn align(&mut self) -> Result<()> {
        if self.pos % 2 == 1 {
            self.write_bytes(&[0])?;
        }
        Ok(())
    }

    fn offset32(&self, at: u64) -> Result<u32> {
        u32::try_from(at).map_err(|_| {
            Error::Unsupported("classic TIFF larger than 4 GiB (BigTIFF output not supported)".into())
        })
    }

    fn push_rows(&mut self, k: usize, mut rows: &[u8]) -> Result<()> {
        let stride = self.levels[k].width * self.channels;
        while !rows.is_empty() {
            let level = &mut self.levels[k];
            let space = self.tile - level.rows;
            let n = (rows.len() / stride).min(space);
            let start = level.rows * stride;
            level.buf[start..start + n * stride].copy_from_slice(&rows[..n * stride]);
            level.rows += n;
            rows = &rows[n * stride..];
            if level.rows == self.tile || level.band_y + level.rows == level.height {
                self.flush_band(k)?;
            }
        }
        Ok(())
    }

    /// Compresses `scratch` (one padded tile) and records it for level `k`.
    fn emit_scratch(&mut self, k: usize) -> Result<()> {
        let mut encoder_buf = std::mem::take(&mut self.encoded);
        encoder_buf.clear();
        let mut enc = ZlibEncoder::new(&mut encoder_buf, Compression::fast());
        enc.write_all(&self.scratch)?;
        enc.finish()?;
        let at = self.write_bytes(&encoder_buf)?;
        let at = self.offset32(at)?;
        let level = &mut self.levels[k];
        level.offsets.push(at);
        level.counts.push(encoder_buf.len() as u32);
        self.stats.tiles_written += 1;
        self.encoded = encoder_buf;
        Ok(())
    }

    /// Writes a level-0 tile as it arrives and folds its 2x2 means into the
    /// level-1 band. Tile sizes are even, so no 2x2 block spans two tiles.
    fn push_base_tile(&mut self, x: usize, t: &Raster) -> Result<()> {
        let ch = self.channels;
        let (w, h) = t.dims();
        self.scratch.fill(0);
        for y in 0..h {
            let d = y * self.tile * ch;
            self.scratch[d..d + w * ch].copy_from_slice(t.row(y));
        }
        self.emit_scratch(0)?;
        if self.levels.len() > 1 {
            let next = &mut self.levels[1];
            let stride = next.width * ch;
            let at = next.rows * stride + (x / 2) * ch;
            box_reduce(t.data(), w, h, ch, &mut next.buf[at..], stride);
        }
        Ok(())
    }

    /// Marks a full row of level-0 tiles, `h` pixels tall, as written.
    fn finish_base_row(&mut self, h: usize) -> Result<()> {
        self.levels[0].band_y += h;
        if self.levels.len() > 1 {
            let next = &mut self.levels[1];
            next.rows += h.div_ceil(2);
            if next.rows == self.tile || next.band_y + next.rows == next.height {
                self.flush_band(1)?;
            }
        }
        Ok(())
    }

    fn flush_band(&mut self, k: usize) -> Result<()> {
        let tile = self.tile;
        let ch = self.channels;
        let (width, rows) = (self.levels[k].width, self.levels[k].rows);
        let stride = width * ch;
        for tc in 0..width.div_ceil(tile) {
            let x0 = tc * tile;
            let w = tile.min(width - x0);
            self.scratch.fill(0);
            for y in 0..rows {
                let s = y * stride + x0 * ch;
                let d = y * tile * ch;
                self.scratch[d..d + w * ch].copy_from_slice(&self.levels[k].buf[s..s + w * ch]);
            }
            self.emit_scratch(k)?;
        }

        if k + 1 < self.levels.len() {
            let next_w = self.levels[k + 1].width;
            let out_rows = rows.div_ceil(2);
            let mut down = vec![0u8; out_rows * next_w * ch];
            box_reduce(&self.levels[k].buf[..rows * stride], width, rows, ch, &mut down, next_w * ch);
            let level = &mut self.levels[k];
            level.band_y += level.rows;
            level.rows = 0;
            self.push_rows(k + 1, &down)?;
        } else {
            let level = &mut self.levels[k];
            level.band_y += level.rows;
            level.rows = 0;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<WriteStats> {
        for (k, l) in self.levels.iter().enumerate() {
            if l.band_y != l.height {
                return Err(Error::SourceExhausted(format!(
                    "level {k} received {} of {} rows",
                    l.band_y, l.height
                )));
            }
        }
        let specs: Vec<IfdSpec> = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| IfdSpec {
                width: l.width as u32,
                height: l.height as u32,
                channels: self.channels as u16,
                tile: self.tile as u32,
                reduced: k > 0,
                offsets: l.offsets.clone(),
                counts: l.counts.clone(),
            })
            .collect();
        self.align()?;
        let first = write_ifd_chain(&mut self.out, &mut self.pos, &specs)?;
        self.out.seek(SeekFrom::Start(4))?;
        self.out.write_all(&first.to_le_bytes())?;
        self.out.flush()?;
        self.stats.bytes_written = self.pos;
        self.stats.level_dims = self.levels.iter().map(|l| (l.width, l.height)).collect();
        Ok(self.stats)
    }
}

/// 2x2 box means of a `w`x`h` block (row stride `w * ch`) written to `dst`
/// with row stride `dst_stride`; edge pixels of odd sizes average what
/// exists, rounding half up.
fn box_reduce(src: &[u8], w: usize, h: usize, ch: usize, dst: &mut [u8], dst_stride: usize) {
    let stride = w * ch;
    for r in 0..h.div_ceil(2) {
        let y0 = 2 * r;
        let y1 = (2 * r + 1).min(h - 1);
        let ny = if y1 != y0 { 2 } else { 1 };
        for c in 0..w.div_ceil(2) {
            let x0 = 2 * c;
            let x1 = (2 * c + 1).min(w - 1);
            let nx = if x1 != x0 { 2 } else { 1 };
            let n = (nx * ny) as u32;
            for s in 0..ch {
                let mut sum = src[y0 * stride + x0 * ch + s] as u32;
                if nx == 2 {
                    sum += src[y0 * stride + x1 * ch + s] as u32;
                }
                if ny == 2 {
                    sum += src[y1 * stride + x0 * ch + s] as u32;
                    if nx == 2 {
                        sum += src[y1 * stride + x1 * ch + s] as u32;
                    }
                }
                dst[r * dst_stride + c * ch + s] = ((2 * sum + n) / (2 * n)) as u8;
            }
        }
    }
}

pub(crate) struct IfdSpec {
    pub width: u32,
    pub height: u32,
    pub channels: u16,
    pub tile: u32,
    pub reduced: bool,
    pub offsets: Vec<u32>,
    pub counts: Vec<u32>,
}

/// Writes out-of-line arrays and then the chained IFDs; returns the offset of
/// the first IFD. `pos` must be the current (even) write position.
pub(crate) fn write_ifd_chain<W: Write>(out: &mut W, pos: &mut u64, specs: &[IfdSpec]) -> Result<u32> {
    fn put(out: &mut impl Write, pos: &mut u64, bytes: &[u8]) -> Result<u64> {
        let at = *pos;
        out.write_all(bytes)?;
        *pos += bytes.len() as u64;
        if *pos % 2 == 1 {
            out.write_all(&[0])?;
            *pos += 1;
        }
        Ok(at)
    }
    let to32 = |v: u64| {
        u32::try_from(v).map_err(|_| {
            Error::Unsupported("classic TIFF larger than 4 GiB (BigTIFF output not supported)".into())
        })
    };

    let mut tables = Vec::with_capacity(specs.len());
    for s in specs {
        let bps = if s.channels > 2 {
            let bytes: Vec<u8> = (0..s.channels).flat_map(|_| 8u16.to_le_bytes()).collect();
            Some(to32(put(out, pos, &bytes)?)?)
        } else {
            None
        };
        let arr = |v: &[u32]| -> Vec<u8> { v.iter().flat_map(|x| x.to_le_bytes()).collect() };
        let (offs, cnts) = if s.offsets.len() > 1 {
            (
                Some(to32(put(out, pos, &arr(&s.offsets))?)?),
                Some(to32(put(out, pos, &arr(&s.counts))?)?),
            )
        } else {
            (None, None)
        };
        tables.push((bps, offs, cnts));
    }

    const ENTRIES: usize = 12;
    let ifd_size = (2 + ENTRIES * 12 + 4) as u64;
    let first = to32(*pos)?;
    for (i, (s, (bps, offs, cnts))) in specs.iter().zip(tables).enumerate() {
        let short = |v: u16| -> [u8; 4] {
            let b = v.to_le_bytes();
            [b[0], b[1], 0, 0]
        };
        let long = |v: u32| v.to_le_bytes();
        let bps_raw = match bps {
            Some(at) => long(at),
            None => short(8),
        };
        let single = |v: &[u32], at: Option<u32>| at.map(long).unwrap_or_else(|| long(v[0]));
        let entries: [(u16, u16, u32, [u8; 4]); ENTRIES] = [
            (TAG_NEW_SUBFILE_TYPE, TYPE_LONG, 1, long(s.reduced as u32)),
            (TAG_IMAGE_WIDTH, TYPE_LONG, 1, long(s.width)),
            (TAG_IMAGE_LENGTH, TYPE_LONG, 1, long(s.height)),
            (TAG_BITS_PER_SAMPLE, TYPE_SHORT, s.channels as u32, bps_raw),
            (TAG_COMPRESSION, TYPE_SHORT, 1, short(COMPRESSION_DEFLATE)),
            (TAG_PHOTOMETRIC, TYPE_SHORT, 1, short(if s.channels == 3 { 2 } else { 1 })),
            (TAG_SAMPLES_PER_PIXEL, TYPE_SHORT, 1, short(s.channels)),
            (TAG_PLANAR_CONFIG, TYPE_SHORT, 1, short(1)),
            (TAG_TILE_WIDTH, TYPE_LONG, 1, long(s.tile)),
            (TAG_TILE_LENGTH, TYPE_LONG, 1, long(s.tile)),
            (TAG_TILE_OFFSETS, TYPE_LONG, s.offsets.len() as u32, single(&s.offsets, offs)),
            (TAG_TILE_BYTE_COUNTS, TYPE_LONG, s.counts.len() as u32, single(&s.counts, cnts)),
        ];
        let mut ifd = Vec::with_capacity(ifd_size as usize);
        ifd.extend_from_slice(&(ENTRIES as u16).to_le_bytes());
        for (tag, typ, count, raw) in entries {
            ifd.extend_from_slice(&tag.to_le_bytes());
            ifd.extend_from_slice(&typ.to_le_bytes());
            ifd.extend_from_slice(&count.to_le_bytes());
            ifd.extend_from_slice(&raw);
        }
        let next = if i + 1 < specs.len() {
            to32(*pos + ifd_size)?
        } else {
            0
        };
        ifd.extend_from_slice(&next.to_le_bytes());
        put(out, pos, &ifd)?;
    }
    Ok(first)
}

/// Streams `source` into a tiled, Deflate-compressed pyramidal TIFF.
///
/// Level `k+1` is the 2x2 box mean of level `k`, each output sample being
/// the rounded-half-up mean of the (up to four) covering samples. Level 0
/// is never buffered beyond the current tile; each reduced level holds one
/// tile row.
pub fn save_pyramid_tiff(
    source: &mut dyn TileSource,
    path: impl AsRef<Path>,
    tile_size: usize,
    num_levels: usize,
) -> Result<WriteStats> {
    if num_levels == 0 {
        return Err(Error::invalid("num_levels must be at least 1"));
    }
    if tile_size == 0 || tile_size % 16 != 0 {
        return Err(Error::invalid(format!(
            "TIFF tile size {tile_size} must be a positive multiple of 16"
        )));
    }
    let (width, height, ch) = (source.width(), source.height(), source.channels());
    check_channels(ch)?;
    if width == 0 || height == 0 {
        return Err(Error::invalid("cannot save an empty image"));
    }
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    out.write_all(b"II")?;
    out.write_all(&42u16.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;

    let levels = (0..num_levels)
        .map(|k| {
            let (w, h) = super::level_dims(width, height, k);
            LevelBand {
                width: w,
                height: h,
                // Level 0 is written tile by tile and needs no band.
                buf: if k == 0 { Vec::new() } else { vec![0u8; tile_size * w * ch] },
                rows: 0,
                band_y: 0,
                offsets: Vec::new(),
                counts: Vec::new(),
            }
        })
        .collect();
    let mut writer = PyramidWriter {
        out,
        pos: 8,
        tile: tile_size,
        channels: ch,
        levels,
        scratch: vec![0u8; tile_size * tile_size * ch],
        encoded: Vec::new(),
        stats: WriteStats::default(),
    };

    for ty in 0..height.div_ceil(tile_size) {
        let y = ty * tile_size;
        let h = tile_size.min(height - y);
        for tx in 0..width.div_ceil(tile_size) {
            let x = tx * tile_size;
            let w = tile_size.min(width - x);
            let t = source.next_tile(x, y, w, h)?.ok_or_else(|| {
                Error::SourceExhausted(format!("no tile at ({x}, {y}) of {width}x{height}"))
            })?;
            if t.dims() != (w, h) || t.channels() != ch {
                return Err(Error::DimensionMismatch(format!(
                    "tile at ({x}, {y}) is {}x{}x{}, expected {w}x{h}x{ch}",
                    t.width(),
                    t.height(),
                    t.channels()
                )));
            }
            writer.push_base_tile(x, &t)?;
        }
        writer.finish_base_row(h)?;
    }
    writer.finish()
}
