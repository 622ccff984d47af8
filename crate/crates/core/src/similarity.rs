//! Similarity measures: global normalized cross-correlation for the affine
//! stage and a 4-neighbour self-similarity descriptor whose SSD drives the
//! dense stage across stains.

use crate::error::{Error, Result};
use crate::pyramid_io::Raster;
use crate::warping::DisplacementField;

/// Minimum number of masked samples for a meaningful correlation.
pub const MIN_MASKED_SAMPLES: usize = 16;

/// Streaming Pearson correlation. Samples are shifted by the first pair seen
/// to keep the single-pass sums well conditioned.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Correlation {
    n: f64,
    shift_a: f64,
    shift_b: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl Correlation {
    #[inline]
    pub(crate) fn push(&mut self, a: f64, b: f64) {
        if self.n == 0.0 {
            self.shift_a = a;
            self.shift_b = b;
        }
        let a = a - self.shift_a;
        let b = b - self.shift_b;
        self.n += 1.0;
        self.sa += a;
        self.sb += b;
        self.saa += a * a;
        self.sbb += b * b;
        self.sab += a * b;
    }

    /// Merges sums of samples already shifted by (`shift_a`, `shift_b`).
    pub(crate) fn from_shifted_sums(shift_a: f64, shift_b: f64, n: f64, s: [f64; 5]) -> Self {
        Self {
            n,
            shift_a,
            shift_b,
            sa: s[0],
            sb: s[1],
            saa: s[2],
            sbb: s[3],
            sab: s[4],
        }
    }

    pub(crate) fn count(&self) -> usize {
        self.n as usize
    }

    /// Pearson coefficient; 0 when either side has no variance.
    pub(crate) fn value(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let va = self.saa - self.sa * self.sa / self.n;
        let vb = self.sbb - self.sb * self.sb / self.n;
        if va <= 1e-12 * self.saa.max(1.0) || vb <= 1e-12 * self.sbb.max(1.0) {
            return 0.0;
        }
        let cov = self.sab - self.sa * self.sb / self.n;
        (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Pearson correlation of two equally sized gray rasters, optionally over a
/// mask. Returns 0 when either side is constant or when the mask selects
/// fewer than [`MIN_MASKED_SAMPLES`] pixels.
pub fn ncc_global(a: &Raster, b: &Raster, mask: Option<&[bool]>) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != 1 || b.channels() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "ncc needs equal 1-channel rasters, got {:?}x{} and {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    let mut acc = Correlation::default();
    match mask {
        Some(m) => {
            if m.len() != a.data().len() {
                return Err(Error::DimensionMismatch(format!(
                    "mask has {} entries for {} pixels",
                    m.len(),
                    a.data().len()
                )));
            }
            for ((&x, &y), &keep) in a.data().iter().zip(b.data()).zip(m) {
                if keep {
                    acc.push(x as f64, y as f64);
                }
            }
            if acc.count() < MIN_MASKED_SAMPLES {
                return Ok(0.0);
            }
        }
        None => {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                acc.push(x as f64, y as f64);
            }
        }
    }
    Ok(acc.value())
}

/// Neighbour offsets of the descriptor channels, in channel order.
pub const MIND_OFFSETS: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Relative variance floor; the absolute floor is this times the squared
/// intensity range of the input (255² for a full-range image).
pub const MIND_EPSILON_REL: f64 = 1e-5;

/// Per-pixel 4-channel self-similarity descriptor, values in [0, 1].
#[derive(Clone, PartialEq)]
pub struct DescriptorImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for DescriptorImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DescriptorImage({}x{}x4)", self.width, self.height)
    }
}

impl DescriptorImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Interleaved channels, row-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    /// Bilinear sample with clamp-to-edge.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> [f64; 4] {
        let (i0, i1, fx) = bilinear_axis(x, self.width);
        let (j0, j1, fy) = bilinear_axis(y, self.height);
        let w = self.width;
        let p00 = &self.data[(j0 * w + i0) * 4..][..4];
        let p10 = &self.data[(j0 * w + i1) * 4..][..4];
        let p01 = &self.data[(j1 * w + i0) * 4..][..4];
        let p11 = &self.data[(j1 * w + i1) * 4..][..4];
        let mut out = [0.0; 4];
        for c in 0..4 {
            let top = (1.0 - fx) * p00[c] as f64 + fx * p10[c] as f64;
            let bottom = (1.0 - fx) * p01[c] as f64 + fx * p11[c] as f64;
            out[c] = (1.0 - fy) * top + fy * bottom;
        }
        out
    }
}

/// Clamped bilinear neighbours and weight along one axis of length `n`.
#[inline]
pub(crate) fn bilinear_axis(p: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, (n - 1) as f64) };
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64)
}

pub fn mind_descriptors(r: &Raster) -> Result<DescriptorImage> {
    if r.channels() != 1 {
        return Err(Error::invalid("descriptors need a 1-channel raster"));
    }
    let (w, h) = r.dims();
    if w < 8 || h < 8 {
        return Err(Error::invalid(format!("descriptor input {w}x{h} is smaller than 8x8")));
    }
    let px = |x: i64, y: i64| -> f64 {
        let cx = x.clamp(0, w as i64 - 1) as usize;
        let cy = y.clamp(0, h as i64 - 1) as usize;
        r.data()[cy * w + cx] as f64
    };
    let (lo, hi) = r
        .data()
        .iter()
        .fold((255u8, 0u8), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi as f64 - lo as f64).max(1.0);
    let eps = MIND_EPSILON_REL * range * range;

    // Squared differences on the grid extended by one pixel, then 3x3 sums.
    let (ew, eh) = (w + 2, h + 2);
    let mut dist = vec![[0f64; 4]; w * h];
    let mut sq = vec![0f64; ew * eh];
    let mut rows = vec![0f64; w * eh];
    for (n, &(dx, dy)) in MIND_OFFSETS.iter().enumerate() {
        for ey in 0..eh {
            let y = ey as i64 - 1;
            for ex in 0..ew {
                let x = ex as i64 - 1;
                let d = px(x, y) - px(x + dx, y + dy);
                sq[ey * ew + ex] = d * d;
            }
        }
        for ey in 0..eh {
            let s = &sq[ey * ew..(ey + 1) * ew];
            for x in 0..w {
                rows[ey * w + x] = s[x] + s[x + 1] + s[x + 2];
            }
        }
        for y in 0..h {
            for x in 0..w {
                dist[y * w + x][n] = rows[y * w + x] + rows[(y + 1) * w + x] + rows[(y + 2) * w + x];
            }
        }
    }

    let mut data = Vec::with_capacity(w * h * 4);
    for d in &dist {
        let v = (d[0] + d[1] + d[2] + d[3]) / 4.0;
        let dmin = d[0].min(d[1]).min(d[2]).min(d[3]);
        let denom = v + eps;
        // exp(-d/denom) / max_n exp(-d_n/denom)
        for &dn in d {
            data.push((-(dn - dmin) / denom).exp() as f32);
        }
    }
    Ok(DescriptorImage {
        width: w,
        height: h,
        data,
    })
}

/// Mean over pixels of the squared descriptor difference between `df(x)`
/// and `dm(x + u(x) / scale)`.
pub fn mind_data_cost(
    df: &DescriptorImage,
    dm: &DescriptorImage,
    field: &DisplacementField,
    scale: f64,
) -> Result<f64> {
    check_cost_dims(df, dm, field)?;
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("scale {scale} must be > 0")));
    }
    Ok(data_cost_unchecked(df, dm, field.components(), scale))
}

pub(crate) fn check_cost_dims(
    df: &DescriptorImage,
    dm: &DescriptorImage,
    field: &DisplacementField,
) -> Result<()> {
    if df.dims() != dm.dims() || df.dims() != field.grid_dims() {
        return Err(Error::DimensionMismatch(format!(
            "descriptors {:?} / {:?} and field grid {:?} must agree",
            df.dims(),
            dm.dims(),
            field.grid_dims()
        )));
    }
    Ok(())
}

/// `u` holds interleaved (dx, dy) per descriptor pixel.
pub(crate) fn data_cost_unchecked(df: &DescriptorImage, dm: &DescriptorImage, u: &[f64], scale: f64) -> f64 {
    let (w, h) = df.dims();
    let inv = 1.0 / scale;
    let mut total = 0.0;
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            let i = y * w + x;
            let s = dm.sample(x as f64 + u[2 * i] * inv, y as f64 + u[2 * i + 1] * inv);
            let f = &df.data[i * 4..i * 4 + 4];
            for c in 0..4 {
                let d = s[c] - f[c] as f64;
                row += d * d;
            }
        }
        total += row;
    }
    total / (w * h) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[u8]) -> Raster {
        Raster::new(values.len(), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn self_correlation_is_one() {
        let a = Raster::from_fn(20, 10, |x, y| (x * y % 17) as u8);
        assert!((ncc_global(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_ramp_is_minus_one() {
        let v = ncc_global(&row(&[1, 2, 3]), &row(&[3, 2, 1]), None).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_sample_hand_evaluation() {
        // a = [0,1,0,1], b = [1,1,0,0]: means 0.5, deviations (-.5,.5,-.5,.5)
        // and (.5,.5,-.5,-.5); covariance sum 0 -> r = 0.
        let v = ncc_global(&row(&[0, 1, 0, 1]), &row(&[1, 1, 0, 0]), None).unwrap();
        assert!(v.abs() < 1e-12);
        // a = [0,1,2,4], b = [1,1,0,3]: direct Pearson.
        let a = [0.0, 1.0, 2.0, 4.0];
        let b = [1.0, 1.0, 0.0, 3.0];
        let ma = a.iter().sum::<f64>() / 4.0;
        let mb = b.iter().sum::<f64>() / 4.0;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let expected = cov / (va * vb).sqrt();
        let v = ncc_global(&row(&[0, 1, 2, 4]), &row(&[1, 1, 0, 3]), None).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_side_gives_zero() {
        let a = Raster::filled(5, 5, 1, 9);
        let b = Raster::from_fn(5, 5, |x, _| x as u8);
        assert_eq!(ncc_global(&a, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn mask_is_respected_and_small_masks_give_zero() {
        let a = Raster::from_fn(8, 8, |x, y| (x + 8 * y) as u8);
        let mut b = a.clone();
        b.data_mut()[0] = 255;
        let mut mask = vec![true; 64];
        mask[0] = false;
        assert!((ncc_global(&a, &b, Some(&mask)).unwrap() - 1.0).abs() < 1e-12);
        let tiny: Vec<bool> = (0..64).map(|i| i < 10).collect();
        assert_eq!(ncc_global(&a, &b, Some(&tiny)).unwrap(), 0.0);
        assert!(ncc_global(&a, &b, Some(&mask[..10])).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Raster::filled(5, 5, 1, 9);
        let b = Raster::filled(5, 4, 1, 9);
        assert!(matches!(ncc_global(&a, &b, None), Err(Error::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn ncc_symmetric_bounded_and_affine_invariant(
            a in proptest::collection::vec(0u8..100, 32),
            b in proptest::collection::vec(0u8..255, 32),
            alpha in 1u8..3,
            beta in 0u8..50,
        ) {
            let ra = row(&a);
            let rb = row(&b);
            let ab = ncc_global(&ra, &rb, None).unwrap();
            let ba = ncc_global(&rb, &ra, None).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab.abs() <= 1.0);
            let scaled: Vec<u8> = a.iter().map(|&v| v * alpha + beta).collect();
            let self_corr = ncc_global(&ra, &row(&scaled), None).unwrap();
            if a.iter().any(|&v| v != a[0]) {
                prop_assert!((self_corr - 1.0).abs() < 1e-9);
            }
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(w, h, |_, _| rng.gen_range(0..120))
    }

    #[test]
    fn constant_image_hits_floor() {
        let d = mind_descriptors(&Raster::filled(10, 9, 1, 40)).unwrap();
        for p in d.data().chunks_exact(4) {
            assert!(p.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn descriptors_invariant_under_positive_affine_intensity() {
        let r = noise(32, 24, 3);
        let scaled = Raster::from_fn(32, 24, |x, y| r.get(x, y, 0) * 2 + 7);
        let a = mind_descriptors(&r).unwrap();
        let b = mind_descriptors(&scaled).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn single_bright_pixel_is_symmetric() {
        let r = Raster::from_fn(15, 15, |x, y| if (x, y) == (7, 7) { 255 } else { 0 });
        let d = mind_descriptors(&r).unwrap();
        let p = d.get(7, 7);
        assert!(p.iter().all(|&v| v == p[0]));
        assert!(p.iter().cloned().fold(0f32, f32::max) == 1.0);
    }

    #[test]
    fn descriptors_are_max_normalized() {
        let d = mind_descriptors(&noise(16, 16, 9)).unwrap();
        for p in d.data().chunks_exact(4) {
            let m = p.iter().cloned().fold(0f32, f32::max);
            assert_eq!(m, 1.0);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn too_small_input_rejected() {
        assert!(mind_descriptors(&Raster::filled(7, 20, 1, 0)).is_err());
    }

    #[test]
    fn zero_field_on_identical_descriptors_costs_nothing() {
        let d = mind_descriptors(&noise(16, 12, 1)).unwrap();
        let f = DisplacementField::zeros(16, 12, 32, 24).unwrap();
        assert_eq!(mind_data_cost(&d, &d, &f, f.spacing()).unwrap(), 0.0);
    }

    #[test]
    fn one_pixel_shift_is_compensated_away_from_borders() {
        let base = noise(40, 20, 5);
        let shifted = Raster::from_fn(40, 20, |x, y| if x == 0 { 0 } else { base.get(x - 1, y, 0) });
        let df = mind_descriptors(&base).unwrap();
        let dm = mind_descriptors(&shifted).unwrap();
        let s = 2.0;
        let f = DisplacementField::from_fn(40, 20, 80, 40, |_, _| (s, 0.0)).unwrap();
        // Cost restricted to the interior, where the shift is exact.
        let mut interior = 0.0;
        for y in 2..18 {
            for x in 2..37 {
                let v = dm.sample(x as f64 + 1.0, y as f64);
                let t = df.get(x, y);
                for c in 0..4 {
                    interior += (v[c] - t[c] as f64).powi(2);
                }
            }
        }
        assert!(interior < 1e-20);
        assert!(mind_data_cost(&df, &dm, &f, s).unwrap() >= 0.0);
    }

    #[test]
    fn data_cost_matches_naive_double_loop() {
        let df = mind_descriptors(&noise(24, 20, 11)).unwrap();
        let dm = mind_descriptors(&noise(24, 20, 12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = 3.0;
        let f = DisplacementField::from_fn(24, 20, 72, 60, |_, _| {
            (rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0))
        })
        .unwrap();
        let fast = mind_data_cost(&df, &dm, &f, s).unwrap();
        let oracle = naive_cost(&df, &dm, &f, s);
        assert!((fast - oracle).abs() <= 1e-10 * oracle.abs());
    }

    fn naive_cost(df: &DescriptorImage, dm: &DescriptorImage, f: &DisplacementField, s: f64) -> f64 {
        let (w, h) = df.dims();
        let at = |x: usize, y: usize, c: usize| dm.data()[(y * w + x) * 4 + c] as f64;
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let (ux, uy) = f.node(x, y);
                let px = (x as f64 + ux / s).clamp(0.0, (w - 1) as f64);
                let py = (y as f64 + uy / s).clamp(0.0, (h - 1) as f64);
                let x0 = (px.floor() as usize).min(w - 2);
                let y0 = (py.floor() as usize).min(h - 2);
                let (tx, ty) = (px - x0 as f64, py - y0 as f64);
                for c in 0..4 {
                    let v = at(x0, y0, c) * (1.0 - tx) * (1.0 - ty)
                        + at(x0 + 1, y0, c) * tx * (1.0 - ty)
                        + at(x0, y0 + 1, c) * (1.0 - tx) * ty
                        + at(x0 + 1, y0 + 1, c) * tx * ty;
                    sum += (v - df.data()[(y * w + x) * 4 + c] as f64).powi(2);
                }
            }
        }
        sum / (w * h) as f64
    }
}
