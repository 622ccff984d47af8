use std::fmt;

use crate::error::{Error, Result};

/// Owned 8-bit raster, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

pub(crate) fn check_channels(channels: usize) -> Result<()> {
    if channels == 1 || channels == 3 {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "channel count {channels} (expected 1 or 3)"
        )))
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        check_channels(channels)?;
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("empty raster {width}x{height}")));
        }
        let needed = width * height * channels;
        if data.len() != needed {
            return Err(Error::DimensionMismatch(format!(
                "raster {width}x{height}x{channels} needs {needed} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Raster with every sample set to `value`.
    ///
    /// Panics on a zero dimension or a channel count other than 1 or 3.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "empty raster");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds a 1-channel raster by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data).expect("valid gray raster")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * self.channels;
        &self.data[y * stride..(y + 1) * stride]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [u8] {
        let stride = self.width * self.channels;
        &mut self.data[y * stride..(y + 1) * stride]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `w`x`h` window at (`x`, `y`). The window must lie inside the raster.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Raster> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let ch = self.channels;
        let mut data = Vec::with_capacity(w * h * ch);
        for row in y..y + h {
            let start = (row * self.width + x) * ch;
            data.extend_from_slice(&self.data[start..start + w * ch]);
        }
        Raster::new(w, h, ch, data)
    }

    /// Copies `src` into `self` with its top-left corner at (`x`, `y`),
    /// clipping whatever falls outside.
    pub fn blit(&mut self, src: &Raster, x: i64, y: i64) {
        debug_assert_eq!(src.channels, self.channels);
        let ch = self.channels;
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + src.width as i64).min(self.width as i64);
        let y1 = (y + src.height as i64).min(self.height as i64);
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        let span = (x1 - x0) as usize * ch;
        for dy in y0..y1 {
            let sy = (dy - y) as usize;
            let sx = (x0 - x) as usize;
            let s = (sy * src.width + sx) * ch;
            let d = (dy as usize * self.width + x0 as usize) * ch;
            self.data[d..d + span].copy_from_slice(&src.data[s..s + span]);
        }
    }
}

/// Pads both rasters to the per-dimension maximum, originals at the top-left.
pub fn pad_to_common(a: &Raster, b: &Raster, fill: u8) -> Result<(Raster, Raster)> {
    if a.channels() != b.channels() {
        return Err(Error::DimensionMismatch(format!(
            "channel counts differ: {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let w = a.width().max(b.width());
    let h = a.height().max(b.height());
    Ok((pad_to(a, w, h, fill), pad_to(b, w, h, fill)))
}

pub(crate) fn pad_to(r: &Raster, w: usize, h: usize, fill: u8) -> Raster {
    if r.dims() == (w, h) {
        return r.clone();
    }
    let mut out = Raster::filled(w, h, r.channels(), fill);
    out.blit(r, 0, 0);
    out
}
