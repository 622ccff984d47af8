//! Brings a slide pair to registration resolution: one shared scale,
//! grayscale, percentile stretch with inversion (tissue bright, glass dark),
//! and zero padding to a common shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid_io::{pad_to, resample_mapped, Filter, PyramidImage, Raster};

/// Rec. 601 luma, rounded half up. Gray input is returned unchanged.
pub fn to_grayscale(r: &Raster) -> Raster {
    if r.channels() == 1 {
        return r.clone();
    }
    let data = r
        .data()
        .chunks_exact(3)
        .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
        .collect();
    Raster::new(r.width(), r.height(), 1, data).expect("gray raster")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub raster: Raster,
    /// Set when the low and high percentiles coincide; the raster is then all zero.
    pub degenerate: bool,
}

pub const DEFAULT_PERCENTILE_LOW: f64 = 1.0;
pub const DEFAULT_PERCENTILE_HIGH: f64 = 99.0;

/// Nearest-rank percentile of a 256-bin histogram.
pub fn histogram_percentile(hist: &[u64; 256], p: f64) -> u8 {
    let total: u64 = hist.iter().sum();
    let rank = ((p / 100.0) * total as f64).ceil().max(1.0) as u64;
    let mut cum = 0u64;
    for (v, &n) in hist.iter().enumerate() {
        cum += n;
        if cum >= rank {
            return v as u8;
        }
    }
    255
}

pub fn histogram(r: &Raster) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in r.data() {
        hist[v as usize] += 1;
    }
    hist
}

pub fn normalize_intensity(r: &Raster) -> Result<Normalized> {
    normalize_intensity_with(r, DEFAULT_PERCENTILE_LOW, DEFAULT_PERCENTILE_HIGH)
}

/// `255 - stretch(v)`, where stretch maps the `[low, high]` percentile range
/// linearly onto `[0, 255]` with clamping.
pub fn normalize_intensity_with(r: &Raster, low_pct: f64, high_pct: f64) -> Result<Normalized> {
    if r.channels() != 1 {
        return Err(Error::invalid("normalize_intensity needs a 1-channel raster"));
    }
    if !(0.0..=100.0).contains(&low_pct) || !(0.0..=100.0).contains(&high_pct) || low_pct >= high_pct {
        return Err(Error::invalid(format!(
            "percentiles must satisfy 0 <= low < high <= 100, got {low_pct}, {high_pct}"
        )));
    }
    let hist = histogram(r);
    let lo = histogram_percentile(&hist, low_pct) as f64;
    let hi = histogram_percentile(&hist, high_pct) as f64;
    if hi <= lo {
        return Ok(Normalized {
            raster: Raster::filled(r.width(), r.height(), 1, 0),
            degenerate: true,
        });
    }
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        let stretched = (255.0 * (v as f64 - lo) / (hi - lo)).round().clamp(0.0, 255.0);
        *out = 255 - stretched as u8;
    }
    let data = r.data().iter().map(|&v| lut[v as usize]).collect();
    Ok(Normalized {
        raster: Raster::new(r.width(), r.height(), 1, data)?,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub target_long_side: usize,
    pub percentile_low: f64,
    pub percentile_high: f64,
    /// Slide background, used for samples outside either image.
    pub fill: u8,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            target_long_side: 1024,
            percentile_low: DEFAULT_PERCENTILE_LOW,
            percentile_high: DEFAULT_PERCENTILE_HIGH,
            fill: crate::pyramid_io::DEFAULT_FILL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedPair {
    pub fixed: Raster,
    pub moving: Raster,
    /// Level-0 pixels per preprocessed pixel, shared by both images and axes.
    pub scale: f64,
    /// Unpadded extents of the two images at this scale.
    pub fixed_extent: (usize, usize),
    pub moving_extent: (usize, usize),
    /// Level-0 dimensions of the fixed image.
    pub fixed_level0: (usize, usize),
    pub fixed_degenerate: bool,
    pub moving_degenerate: bool,
}

impl PreprocessedPair {
    pub fn dims(&self) -> (usize, usize) {
        self.fixed.dims()
    }

    /// Wraps two already-normalized rasters of equal size; the fixed level-0
    /// extent is taken as the raster size times `scale`.
    pub fn from_rasters(fixed: Raster, moving: Raster, scale: f64) -> Result<Self> {
        if fixed.dims() != moving.dims() || fixed.channels() != 1 || moving.channels() != 1 {
            return Err(Error::DimensionMismatch(
                "preprocessed rasters must be 1-channel and equally sized".into(),
            ));
        }
        if !(scale > 0.0) {
            return Err(Error::invalid(format!("scale {scale} must be > 0")));
        }
        let (w, h) = fixed.dims();
        Ok(Self {
            fixed_level0: (
                ((w as f64 * scale).round() as usize).max(1),
                ((h as f64 * scale).round() as usize).max(1),
            ),
            fixed_extent: fixed.dims(),
            moving_extent: moving.dims(),
            fixed,
            moving,
            scale,
            fixed_degenerate: false,
            moving_degenerate: false,
        })
    }
}

pub fn preprocess_pair(
    fixed: &PyramidImage,
    moving: &PyramidImage,
    target_long_side: usize,
) -> Result<PreprocessedPair> {
    preprocess_pair_with(
        fixed,
        moving,
        &PreprocessParams {
            target_long_side,
            ..PreprocessParams::default()
        },
    )
}

pub fn preprocess_pair_with(
    fixed: &PyramidImage,
    moving: &PyramidImage,
    params: &PreprocessParams,
) -> Result<PreprocessedPair> {
    if params.target_long_side < 64 {
        return Err(Error::invalid(format!(
            "target long side {} must be at least 64",
            params.target_long_side
        )));
    }
    let long = fixed
        .width()
        .max(fixed.height())
        .max(moving.width())
        .max(moving.height());
    let scale = long as f64 / params.target_long_side as f64;
    let f = gray_at_scale(fixed, scale)?;
    let m = gray_at_scale(moving, scale)?;
    let fixed_extent = f.dims();
    let moving_extent = m.dims();
    let fnorm = normalize_intensity_with(&f, params.percentile_low, params.percentile_high)?;
    let mnorm = normalize_intensity_with(&m, params.percentile_low, params.percentile_high)?;
    let w = fixed_extent.0.max(moving_extent.0);
    let h = fixed_extent.1.max(moving_extent.1);
    Ok(PreprocessedPair {
        fixed: pad_to(&fnorm.raster, w, h, 0),
        moving: pad_to(&mnorm.raster, w, h, 0),
        scale,
        fixed_extent,
        moving_extent,
        fixed_level0: (fixed.width(), fixed.height()),
        fixed_degenerate: fnorm.degenerate,
        moving_degenerate: mnorm.degenerate,
    })
}

/// Grayscale rendition of `img` at `scale` level-0 pixels per output pixel,
/// read from the coarsest pyramid level that still has enough pixels.
pub fn gray_at_scale(img: &PyramidImage, scale: f64) -> Result<Raster> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("scale {scale} must be > 0")));
    }
    let out_w = ((img.width() as f64 / scale).round() as usize).max(1);
    let out_h = ((img.height() as f64 / scale).round() as usize).max(1);
    let out_long = out_w.max(out_h);
    let level = img
        .levels()
        .iter()
        .rposition(|l| l.width.max(l.height) >= out_long)
        .unwrap_or(0);
    let gray = to_grayscale(&img.read_level(level)?);
    let d = (1u64 << level) as f64;
    // Level-k pixel j is the mean of level-0 pixels around d * j + (d - 1) / 2.
    let step = scale / d;
    let offset = -(d - 1.0) / (2.0 * d);
    if level == 0 && (out_w, out_h) == gray.dims() && scale == 1.0 {
        return Ok(gray);
    }
    Ok(resample_mapped(
        &gray,
        out_w,
        out_h,
        step,
        (offset, offset),
        Filter::for_step(step),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid_io::{LevelDescriptor, TileProvider};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn grayscale_reference_points() {
        let r = Raster::new(3, 1, 3, vec![255, 255, 255, 0, 0, 0, 255, 0, 0]).unwrap();
        assert_eq!(to_grayscale(&r).data(), &[255, 0, 76]);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let n = normalize_intensity(&Raster::filled(10, 10, 1, 77)).unwrap();
        assert!(n.degenerate);
        assert!(n.raster.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn full_range_is_pure_inversion() {
        // 0 and 255 each occupy more than 1% of the samples.
        let r = Raster::from_fn(256, 4, |x, _| x as u8);
        let mut data = r.into_data();
        data.extend(std::iter::repeat(0).take(100));
        data.extend(std::iter::repeat(255).take(100));
        let r = Raster::new(data.len(), 1, 1, data).unwrap();
        let n = normalize_intensity(&r).unwrap();
        assert!(!n.degenerate);
        for (a, b) in r.data().iter().zip(n.raster.data()) {
            assert_eq!(*b, 255 - *a);
        }
    }

    #[test]
    fn two_value_image_percentile_oracle() {
        // Oracle: sorted samples, nearest-rank 1st and 99th percentiles.
        let mut data = vec![50u8; 900];
        data.extend(vec![200u8; 100]);
        let mut sorted = data.clone();
        sorted.sort_unstable();
        let rank = |p: f64| sorted[((p / 100.0 * 1000.0).ceil() as usize).max(1) - 1];
        assert_eq!((rank(1.0), rank(99.0)), (50, 200));

        let r = Raster::new(1000, 1, 1, data).unwrap();
        let n = normalize_intensity(&r).unwrap();
        assert_eq!(n.raster.data()[0], 255);
        assert_eq!(n.raster.data()[999], 0);
    }

    proptest! {
        #[test]
        fn normalization_invariant_under_positive_affine(
            values in proptest::collection::vec(0u8..100, 64..256),
            a in 1u32..3,
            b in 0u32..40,
        ) {
            let n = values.len();
            let r = Raster::new(n, 1, 1, values.clone()).unwrap();
            let mapped: Vec<u8> = values.iter().map(|&v| (a * v as u32 + b) as u8).collect();
            let r2 = Raster::new(n, 1, 1, mapped).unwrap();
            let x = normalize_intensity(&r).unwrap();
            let y = normalize_intensity(&r2).unwrap();
            prop_assert_eq!(x.degenerate, y.degenerate);
            for (p, q) in x.raster.data().iter().zip(y.raster.data()) {
                prop_assert!((*p as i32 - *q as i32).abs() <= 1);
            }
        }
    }

    /// Virtual constant-valued pyramid of arbitrary size.
    struct Constant {
        levels: Vec<LevelDescriptor>,
        value: u8,
        channels: usize,
    }

    impl TileProvider for Constant {
        fn read_tile(&self, level: usize, col: usize, row: usize) -> Result<Raster> {
            let l = self.levels[level];
            let w = l.tile_width.min(l.width - col * l.tile_width);
            let h = l.tile_height.min(l.height - row * l.tile_height);
            Ok(Raster::filled(w, h, self.channels, self.value))
        }
    }

    fn constant_pyramid(w: usize, h: usize, levels: usize, value: u8) -> PyramidImage {
        let levels: Vec<LevelDescriptor> = (0..levels)
            .map(|k| {
                let (lw, lh) = crate::pyramid_io::level_dims(w, h, k);
                LevelDescriptor {
                    width: lw,
                    height: lh,
                    tile_width: 1024,
                    tile_height: 1024,
                }
            })
            .collect();
        let provider = Arc::new(Constant {
            levels: levels.clone(),
            value,
            channels: 3,
        });
        PyramidImage::from_provider(3, levels, provider).unwrap()
    }

    #[test]
    fn identical_images_give_identical_outputs() {
        let r = Raster::new(
            300,
            200,
            3,
            (0..300 * 200 * 3).map(|i| ((i / 3) % 300 / 2 + (i / 900) % 50) as u8).collect(),
        )
        .unwrap();
        let a = PyramidImage::from_raster(r.clone());
        let b = PyramidImage::from_raster(r);
        let pair = preprocess_pair(&a, &b, 100).unwrap();
        assert_eq!(pair.fixed, pair.moving);
        assert_eq!(pair.scale, 3.0);
        assert_eq!(pair.dims(), (100, 67));
    }

    #[test]
    fn shared_scale_and_padding_for_unequal_slides() {
        let fixed = constant_pyramid(40_000, 40_000, 6, 200);
        let moving = constant_pyramid(20_000, 40_000, 6, 180);
        let pair = preprocess_pair(&fixed, &moving, 4096).unwrap();
        assert!((pair.scale - 40_000.0 / 4096.0).abs() < 1e-12);
        assert!((pair.scale - 9.765_625).abs() < 1e-9);
        assert_eq!(pair.fixed.dims(), (4096, 4096));
        assert_eq!(pair.moving.dims(), (4096, 4096));
        assert_eq!(pair.moving_extent, (2048, 4096));
        assert_eq!(pair.fixed_extent, (4096, 4096));
    }

    #[test]
    fn upsampling_keeps_constants() {
        let fixed = constant_pyramid(100, 80, 1, 90);
        let out = gray_at_scale(&fixed, 0.25).unwrap();
        assert_eq!(out.dims(), (400, 320));
        assert!(out.data().iter().all(|&v| v == 90));
        let pair = preprocess_pair(&fixed, &fixed, 400).unwrap();
        assert!(pair.fixed_degenerate);
        assert!(pair.fixed.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn rejects_tiny_target() {
        let a = constant_pyramid(100, 80, 1, 90);
        assert!(preprocess_pair(&a, &a, 63).is_err());
    }

    #[test]
    fn deterministic() {
        let r = Raster::new(
            129,
            77,
            3,
            (0..129 * 77 * 3).map(|i| (i * 37 % 256) as u8).collect(),
        )
        .unwrap();
        let a = PyramidImage::from_raster(r);
        let p1 = preprocess_pair(&a, &a, 64).unwrap();
        let p2 = preprocess_pair(&a, &a, 64).unwrap();
        assert_eq!(p1, p2);
    }
}
