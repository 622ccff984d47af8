//! Synthetic slide pairs with exact ground truth.
//!
//! The fixed slide is a procedural RGB texture (a lobed tissue section on
//! white). The moving slide is the same texture seen through a random
//! affine composed with a smooth random displacement, rendered by
//! evaluating the texture at the exact preimage of every moving pixel, so
//! no resampling error enters the ground truth.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::annotations::{write_landmarks_csv, Frame, LandmarkSet};
use crate::error::{Error, Result};
use crate::initial_alignment::AffineTransform;
use crate::nonrigid::{gaussian_kernel, sample2, smooth2};
use crate::pyramid_io::{save_pyramid_tiff, Raster, TileSource};
use crate::warping::{compose_affine_with_field, write_dhdf, DisplacementField};

/// Control-grid cells per side of the random deformation.
pub const CONTROL_CELLS: usize = 32;
/// Upper bound on the ground-truth field grid.
pub const MAX_FIELD_GRID: usize = 512;
pub const LANDMARK_GRID: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AffineRanges {
    /// Rotation drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Horizontal shear drawn from `[-max, max]`.
    pub max_shear: f64,
    /// Translation per axis, as a fraction of the image side.
    pub max_translation: f64,
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            max_shear: 0.0,
            max_translation: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..=180.0).contains(&self.max_rotation_deg)
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.scale_max.is_finite()
            && (0.0..=0.5).contains(&self.max_shear)
            && (0.0..=0.5).contains(&self.max_translation);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate affine ranges {self:?}")))
        }
    }
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 180.0,
            scale_min: 0.9,
            scale_max: 1.1,
            max_shear: 0.1,
            max_translation: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynthParams {
    pub seed: u64,
    /// Side of the square slides, level-0 pixels.
    pub size: usize,
    pub ranges: AffineRanges,
    /// Largest displacement magnitude of the nonrigid part, level-0 pixels.
    pub max_deform: f64,
    /// Smoothing of the random control values, in control-grid cells.
    pub smoothness_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 2048,
            ranges: AffineRanges::default(),
            max_deform: 30.0,
            smoothness_sigma: 2.0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ (ix as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7) ^ (iy as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothstep-interpolated value noise in [0, 1] with lattice spacing `cell`.
#[inline]
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (fx, fy) = (gx.floor(), gy.floor());
    let (tx, ty) = (gx - fx, gy - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let a = lattice(ix, iy, seed);
    let b = lattice(ix + 1, iy, seed);
    let c = lattice(ix, iy + 1, seed);
    let d = lattice(ix + 1, iy + 1, seed);
    let top = a + sx * (b - a);
    let bot = c + sx * (d - c);
    top + sy * (bot - top)
}

/// Procedural stained-tissue texture over a square of side `size`.
#[derive(Debug, Clone, Copy)]
pub struct TissueTexture {
    seed: u64,
    size: f64,
}

const EOSIN: [f64; 3] = [222.0, 128.0, 176.0];
const HEMATOXYLIN: [f64; 3] = [82.0, 52.0, 142.0];

impl TissueTexture {
    pub fn new(seed: u64, size: usize) -> Self {
        Self {
            seed: splitmix(seed ^ 0x7155_u64),
            size: size as f64,
        }
    }

    /// RGB at continuous level-0 position (x, y).
    pub fn rgb(&self, x: f64, y: f64) -> [u8; 3] {
        let s = self.size;
        let k = self.seed;
        let (dx, dy) = (x - 0.5 * s, y - 0.5 * s);
        let r2 = (dx * dx + dy * dy) / (0.3 * s).powi(2);
        let shape = 1.0 - r2
            + 0.9 * (value_noise(x, y, s / 5.0, k) - 0.5)
            + 0.4 * (value_noise(x, y, s / 13.0, k ^ 1) - 0.5);
        if shape <= 0.0 {
            return [255, 255, 255];
        }
        let edge = (shape / 0.08).min(1.0);
        let alpha = edge * edge * (3.0 - 2.0 * edge);
        let n1 = value_noise(x, y, s / 40.0, k ^ 2);
        let n2 = value_noise(x, y, s / 150.0, k ^ 3);
        let n3 = value_noise(x, y, 5.0, k ^ 4);
        let density = alpha * (0.35 + 0.4 * n1 + 0.15 * n2 + 0.1 * n3);
        let nuclei = value_noise(x, y, s / 90.0, k ^ 5);
        let h = ((nuclei - 0.5) * 4.0).clamp(0.0, 1.0);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let stain = EOSIN[c] + h * (HEMATOXYLIN[c] - EOSIN[c]);
            let v = 255.0 + density * (stain - 255.0);
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// Ground truth for one synthetic pair; pixels are rendered on demand.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub params: SynthParams,
    /// Affine part of the backward map.
    pub affine: AffineTransform,
    /// Nonrigid part `u`, applied before the affine.
    pub deformation: DisplacementField,
    /// Total backward map `A(x + u(x)) - x`.
    pub total: DisplacementField,
    pub fixed_landmarks: LandmarkSet,
    pub moving_landmarks: LandmarkSet,
    texture: TissueTexture,
    affine_inverse: AffineTransform,
}

/// Builds the ground truth for `params`. The same parameters always give
/// the same pair.
pub fn generate_synthetic_pair(params: &SynthParams) -> Result<SyntheticPair> {
    if params.size < 256 {
        return Err(Error::invalid(format!("synthetic size {} is below 256", params.size)));
    }
    params.ranges.validate()?;
    if !(params.max_deform >= 0.0 && params.max_deform.is_finite()) {
        return Err(Error::invalid(format!("max_deform {} must be >= 0", params.max_deform)));
    }
    if !(params.smoothness_sigma >= 0.0 && params.smoothness_sigma.is_finite()) {
        return Err(Error::invalid("smoothness sigma must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let size = params.size;
    let s = size as f64;
    let mut draw = |lo: f64, hi: f64| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let r = params.ranges;
    let theta = draw(-r.max_rotation_deg, r.max_rotation_deg).to_radians();
    let k = draw(r.scale_min, r.scale_max);
    let shear = draw(-r.max_shear, r.max_shear);
    let tx = draw(-r.max_translation, r.max_translation) * s;
    let ty = draw(-r.max_translation, r.max_translation) * s;
    let (sn, cs) = theta.sin_cos();
    // L = k R(theta) [[1, shear], [0, 1]], about the image centre.
    let l = [[k * cs, k * (cs * shear - sn)], [k * sn, k * (sn * shear + cs)]];
    let c = 0.5 * (s - 1.0);
    let affine = AffineTransform::new([
        [l[0][0], l[0][1], c - (l[0][0] * c + l[0][1] * c) + tx],
        [l[1][0], l[1][1], c - (l[1][0] * c + l[1][1] * c) + ty],
    ])?;
    let texture_seed: u64 = rng.gen();

    let n = CONTROL_CELLS + 1;
    let mut control: Vec<f64> = (0..n * n * 2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    control = smooth2(&control, n, n, &gaussian_kernel(params.smoothness_sigma));
    let peak = control.chunks_exact(2).map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
    let gain = if peak > 0.0 { params.max_deform / peak } else { 0.0 };
    control.iter_mut().for_each(|v| *v *= gain);

    let g = size.min(MAX_FIELD_GRID);
    let cell = s / CONTROL_CELLS as f64;
    let deformation = DisplacementField::from_fn(g, g, size, size, |x, y| {
        sample2(&control, n, n, x / cell, y / cell)
    })?;
    let total = compose_affine_with_field(&affine, &deformation)?;

    let spacing = deformation.spacing();
    let mut fixed_pts = Vec::with_capacity(LANDMARK_GRID * LANDMARK_GRID);
    let mut moving_pts = Vec::with_capacity(LANDMARK_GRID * LANDMARK_GRID);
    let at = |i: usize| {
        let v = s * (0.3 + 0.4 * i as f64 / (LANDMARK_GRID - 1) as f64);
        (v / spacing).round() * spacing
    };
    for j in 0..LANDMARK_GRID {
        for i in 0..LANDMARK_GRID {
            let p = (at(i), at(j));
            let (ux, uy) = deformation.sample(p.0, p.1);
            fixed_pts.push(p);
            moving_pts.push(affine.apply(p.0 + ux, p.1 + uy));
        }
    }
    Ok(SyntheticPair {
        params: *params,
        affine_inverse: affine.inverse()?,
        affine,
        deformation,
        total,
        fixed_landmarks: LandmarkSet::new(fixed_pts, Frame::Fixed)?,
        moving_landmarks: LandmarkSet::new(moving_pts, Frame::Moving)?,
        texture: TissueTexture::new(texture_seed, size),
    })
}

const PREIMAGE_TOLERANCE: f64 = 1e-6;
const PREIMAGE_ITERATIONS: usize = 100;

/// Files written by [`SyntheticPair::write`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthFiles {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub field: PathBuf,
    pub fixed_landmarks: PathBuf,
    pub moving_landmarks: PathBuf,
    pub metadata: PathBuf,
}

impl SyntheticPair {
    pub fn size(&self) -> usize {
        self.params.size
    }

    pub fn fixed_pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.texture.rgb(x as f64, y as f64)
    }

    /// Fixed-frame point that the total map sends to moving point `q`.
    pub fn preimage(&self, q: (f64, f64)) -> (f64, f64) {
        let z = self.affine_inverse.apply(q.0, q.1);
        let mut x = z;
        for _ in 0..PREIMAGE_ITERATIONS {
            let (ux, uy) = self.deformation.sample(x.0, x.1);
            let next = (z.0 - ux, z.1 - uy);
            let step = (next.0 - x.0).hypot(next.1 - x.1);
            x = next;
            if step < PREIMAGE_TOLERANCE {
                break;
            }
        }
        x
    }

    pub fn moving_pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let p = self.preimage((x as f64, y as f64));
        self.texture.rgb(p.0, p.1)
    }

    fn render(&self, x: usize, y: usize, w: usize, h: usize, moving: bool) -> Raster {
        let mut data = Vec::with_capacity(w * h * 3);
        for j in y..y + h {
            for i in x..x + w {
                let px = if moving { self.moving_pixel(i, j) } else { self.fixed_pixel(i, j) };
                data.extend_from_slice(&px);
            }
        }
        Raster::new(w, h, 3, data).expect("rendered tile is well formed")
    }

    pub fn render_fixed(&self) -> Raster {
        self.render(0, 0, self.size(), self.size(), false)
    }

    pub fn render_moving(&self) -> Raster {
        self.render(0, 0, self.size(), self.size(), true)
    }

    pub fn fixed_source(&self) -> SynthSource<'_> {
        SynthSource { pair: self, moving: false }
    }

    pub fn moving_source(&self) -> SynthSource<'_> {
        SynthSource { pair: self, moving: true }
    }

    /// Writes both slides as pyramidal TIFFs, the ground-truth total field,
    /// the landmark grids, and a JSON description.
    pub fn write(&self, dir: &Path, tile_size: usize) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir)?;
        let files = SynthFiles {
            fixed: dir.join("fixed.tif"),
            moving: dir.join("moving.tif"),
            field: dir.join("ground_truth.dhdf"),
            fixed_landmarks: dir.join("fixed_landmarks.csv"),
            moving_landmarks: dir.join("moving_landmarks.csv"),
            metadata: dir.join("ground_truth.json"),
        };
        let mut levels = 1;
        while self.size() >> levels >= 256 {
            levels += 1;
        }
        save_pyramid_tiff(&mut self.fixed_source(), &files.fixed, tile_size, levels)?;
        save_pyramid_tiff(&mut self.moving_source(), &files.moving, tile_size, levels)?;
        write_dhdf(&self.total, &files.field)?;
        write_landmarks_csv(&files.fixed_landmarks, &self.fixed_landmarks, None)?;
        write_landmarks_csv(&files.moving_landmarks, &self.moving_landmarks, None)?;
        let meta = serde_json::json!({
            "params": self.params,
            "affine": self.affine,
            "max_deformation": self.deformation.max_magnitude(),
        });
        std::fs::write(&files.metadata, serde_json::to_string_pretty(&meta).expect("json") + "\n")?;
        Ok(files)
    }
}

/// Streams one slide of a [`SyntheticPair`] tile by tile.
pub struct SynthSource<'a> {
    pair: &'a SyntheticPair,
    moving: bool,
}

impl TileSource for SynthSource<'_> {
    fn width(&self) -> usize {
        self.pair.size()
    }

    fn height(&self) -> usize {
        self.pair.size()
    }

    fn channels(&self) -> usize {
        3
    }

    fn next_tile(&mut self, x: usize, y: usize, w: usize, h: usize) -> Result<Option<Raster>> {
        Ok(Some(self.pair.render(x, y, w, h, self.moving)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{transform_points, Direction};

    fn small(seed: u64) -> SynthParams {
        SynthParams {
            seed,
            size: 256,
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic_pair(&small(5)).unwrap();
        let b = generate_synthetic_pair(&small(5)).unwrap();
        assert_eq!(a.affine, b.affine);
        assert_eq!(a.total, b.total);
        assert_eq!(a.render_moving(), b.render_moving());
        let c = generate_synthetic_pair(&small(6)).unwrap();
        assert_ne!(a.affine, c.affine);
    }

    #[test]
    fn identity_ranges_and_no_deformation_copy_the_slide() {
        let p = SynthParams {
            ranges: AffineRanges::identity(),
            max_deform: 0.0,
            ..small(3)
        };
        let pair = generate_synthetic_pair(&p).unwrap();
        assert_eq!(pair.affine, AffineTransform::identity());
        assert_eq!(pair.render_fixed(), pair.render_moving());
    }

    #[test]
    fn landmarks_follow_the_stored_field() {
        let pair = generate_synthetic_pair(&small(11)).unwrap();
        let stored = pair.total.quantized();
        let moved = transform_points(&pair.fixed_landmarks, &stored, Direction::FixedToMoving).unwrap();
        for (a, b) in moved.points.points().iter().zip(pair.moving_landmarks.points()) {
            assert!((a.0 - b.0).hypot(a.1 - b.1) < 0.1);
        }
    }

    #[test]
    fn deformation_is_capped_and_reaches_the_cap() {
        let pair = generate_synthetic_pair(&SynthParams { max_deform: 12.0, ..small(2) }).unwrap();
        let m = pair.deformation.max_magnitude();
        assert!(m <= 12.0 + 1e-9 && m > 6.0, "{m}");
    }

    #[test]
    fn moving_pixels_invert_the_total_map() {
        let pair = generate_synthetic_pair(&small(4)).unwrap();
        for &(x, y) in &[(40.0, 50.0), (128.0, 128.0), (200.0, 90.0)] {
            let (vx, vy) = pair.deformation.sample(x, y);
            let q = pair.affine.apply(x + vx, y + vy);
            let back = pair.preimage(q);
            assert!((back.0 - x).hypot(back.1 - y) < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_synthetic_pair(&SynthParams { size: 100, ..small(0) }).is_err());
        let mut r = AffineRanges::default();
        r.scale_min = 1.2;
        assert!(generate_synthetic_pair(&SynthParams { ranges: r, ..small(0) }).is_err());
        assert!(generate_synthetic_pair(&SynthParams { max_deform: -1.0, ..small(0) }).is_err());
    }

    #[test]
    fn texture_has_tissue_and_background() {
        let t = TissueTexture::new(1, 512);
        assert_eq!(t.rgb(2.0, 2.0), [255, 255, 255]);
        let centre = t.rgb(256.0, 256.0);
        assert!(centre.iter().any(|&v| v < 230));
    }
}
