//! Multi-level tiled rasters.
//!
//! A [`PyramidImage`] never holds pixel data itself: every read goes through a
//! [`TileProvider`], and [`PyramidImage::read_region`] only touches the tiles
//! that intersect the request. Level `k` of every pyramid has dimensions
//! `ceil(level0 / 2^k)`; loaders reject files that break this law.

mod png_io;
mod raster;
mod resample;
pub mod tiff;

use std::path::Path;
use std::sync::Arc;

pub use png_io::{load_png, save_png};
pub use raster::{pad_to_common, Raster};
pub(crate) use raster::{check_channels, pad_to};
pub use resample::resample;
pub(crate) use resample::{resample_mapped, Filter};
pub use tiff::{save_pyramid_tiff, TileSource, WriteStats};

use crate::error::{Error, Result};

/// Default value for samples requested outside an image: white slide background.
pub const DEFAULT_FILL: u8 = 255;

/// Geometry of one pyramid level. Edge tiles may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelDescriptor {
    pub width: usize,
    pub height: usize,
    pub tile_width: usize,
    pub tile_height: usize,
}

impl LevelDescriptor {
    pub fn tiles_across(&self) -> usize {
        self.width.div_ceil(self.tile_width)
    }

    pub fn tiles_down(&self) -> usize {
        self.height.div_ceil(self.tile_height)
    }

    /// Tile grid covering `[x, x+w) x [y, y+h)` clipped to the level, as
    /// inclusive-exclusive column and row ranges.
    pub fn tiles_covering(
        &self,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    ) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w as i64).min(self.width as i64);
        let y1 = (y + h as i64).min(self.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        let tw = self.tile_width as i64;
        let th = self.tile_height as i64;
        Some((
            (x0 / tw) as usize..((x1 - 1) / tw + 1) as usize,
            (y0 / th) as usize..((y1 - 1) / th + 1) as usize,
        ))
    }
}

/// Random access to decoded tiles.
///
/// `read_tile` returns the valid part of the tile: edge tiles come back
/// clipped to the level bounds.
pub trait TileProvider: Send + Sync {
    fn read_tile(&self, level: usize, col: usize, row: usize) -> Result<Raster>;
}

/// Level-0 dimensions at pyramid level `k`.
pub fn level_dims(width: usize, height: usize, k: usize) -> (usize, usize) {
    let d = 1usize << k;
    (width.div_ceil(d), height.div_ceil(d))
}

#[derive(Clone)]
pub struct PyramidImage {
    channels: usize,
    levels: Vec<LevelDescriptor>,
    fill: u8,
    provider: Arc<dyn TileProvider>,
}

impl std::fmt::Debug for PyramidImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PyramidImage")
            .field("channels", &self.channels)
            .field("levels", &self.levels)
            .field("fill", &self.fill)
            .finish_non_exhaustive()
    }
}

impl PyramidImage {
    /// Wraps a tile provider after checking the level chain.
    pub fn from_provider(
        channels: usize,
        levels: Vec<LevelDescriptor>,
        provider: Arc<dyn TileProvider>,
    ) -> Result<Self> {
        check_channels(channels)?;
        validate_levels(&levels)?;
        Ok(Self {
            channels,
            levels,
            fill: DEFAULT_FILL,
            provider,
        })
    }

    /// Single-level pyramid over an in-memory raster.
    pub fn from_raster(raster: Raster) -> Self {
        Self::from_raster_tiled(raster, 512)
    }

    pub fn from_raster_tiled(raster: Raster, tile: usize) -> Self {
        let tile = tile.max(1);
        let level = LevelDescriptor {
            width: raster.width(),
            height: raster.height(),
            tile_width: tile,
            tile_height: tile,
        };
        Self {
            channels: raster.channels(),
            levels: vec![level],
            fill: DEFAULT_FILL,
            provider: Arc::new(MemoryTiles {
                raster,
                tile_width: tile,
                tile_height: tile,
            }),
        }
    }

    pub fn with_fill(mut self, fill: u8) -> Self {
        self.fill = fill;
        self
    }

    pub fn fill(&self) -> u8 {
        self.fill
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[LevelDescriptor] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> Result<&LevelDescriptor> {
        self.levels.get(k).ok_or_else(|| {
            Error::invalid(format!(
                "level {k} does not exist ({} levels)",
                self.levels.len()
            ))
        })
    }

    pub fn read_tile(&self, level: usize, col: usize, row: usize) -> Result<Raster> {
        self.provider.read_tile(level, col, row)
    }

    /// Reads a `w`x`h` window of `level` at (`x`, `y`); samples outside the
    /// level are set to the fill value.
    pub fn read_region(&self, level: usize, x: i64, y: i64, w: usize, h: usize) -> Result<Raster> {
        let desc = *self.level(level)?;
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!("empty region {w}x{h}")));
        }
        let mut out = Raster::filled(w, h, self.channels, self.fill);
        if let Some((cols, rows)) = desc.tiles_covering(x, y, w, h) {
            for row in rows {
                for col in cols.clone() {
                    let tile = self.provider.read_tile(level, col, row)?;
                    let tx = (col * desc.tile_width) as i64;
                    let ty = (row * desc.tile_height) as i64;
                    out.blit(&tile, tx - x, ty - y);
                }
            }
        }
        Ok(out)
    }

    pub fn read_level(&self, level: usize) -> Result<Raster> {
        let desc = *self.level(level)?;
        self.read_region(level, 0, 0, desc.width, desc.height)
    }
}

fn validate_levels(levels: &[LevelDescriptor]) -> Result<()> {
    let first = levels
        .first()
        .ok_or_else(|| Error::format("pyramid", "no levels"))?;
    for (k, level) in levels.iter().enumerate() {
        if level.width == 0 || level.height == 0 {
            return Err(Error::format("pyramid", format!("level {k} is empty")));
        }
        if level.tile_width == 0 || level.tile_height == 0 {
            return Err(Error::format("pyramid", format!("level {k} has zero tile size")));
        }
        let (ew, eh) = level_dims(first.width, first.height, k);
        if (level.width, level.height) != (ew, eh) {
            return Err(Error::NonHalvingPyramid {
                level: k,
                expected_width: ew,
                expected_height: eh,
                found_width: level.width,
                found_height: level.height,
            });
        }
    }
    Ok(())
}

struct MemoryTiles {
    raster: Raster,
    tile_width: usize,
    tile_height: usize,
}

impl TileProvider for MemoryTiles {
    fn read_tile(&self, level: usize, col: usize, row: usize) -> Result<Raster> {
        if level != 0 {
            return Err(Error::invalid(format!("level {level} does not exist")));
        }
        let x = col * self.tile_width;
        let y = row * self.tile_height;
        if x >= self.raster.width() || y >= self.raster.height() {
            return Err(Error::invalid(format!("tile ({col}, {row}) out of range")));
        }
        let w = self.tile_width.min(self.raster.width() - x);
        let h = self.tile_height.min(self.raster.height() - y);
        self.raster.crop(x, y, w, h)
    }
}

/// Opens a pyramidal TIFF or a PNG, picked by file signature.
pub fn load_image(path: impl AsRef<Path>) -> Result<PyramidImage> {
    let path = path.as_ref();
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        let n = f.read(&mut magic)?;
        if n < 4 {
            return Err(Error::format("image", format!("{} is too short", path.display())));
        }
    }
    if magic.starts_with(b"\x89PNG") {
        Ok(PyramidImage::from_raster(load_png(path)?))
    } else if magic.starts_with(b"II") || magic.starts_with(b"MM") {
        tiff::open_tiff(path)
    } else {
        Err(Error::Unsupported(format!(
            "file format of {} (expected TIFF or PNG)",
            path.display()
        )))
    }
}
