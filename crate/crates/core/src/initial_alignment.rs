//! Orientation-free affine alignment: a rigid rotation sweep seeded by
//! tissue centroids, then finite-difference descent on the full affine.

use std::borrow::Cow;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::preprocessing::{histogram, PreprocessedPair};
use crate::pyramid_io::{resample, Raster};
use crate::similarity::{Correlation, MIN_MASKED_SAMPLES};

/// Smallest accepted |det| of the linear part.
pub const MIN_DETERMINANT: f64 = 1e-8;

/// Backward affine map `moving = M * (fixed, 1)` in level-0 pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    rows: [[f64; 3]; 2],
}

impl AffineTransform {
    /// `rows` are the top two rows of the homogeneous matrix.
    pub fn new(rows: [[f64; 3]; 2]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("affine matrix has non-finite entries".into()));
        }
        let t = Self { rows };
        let det = t.determinant();
        if !(det.abs() > MIN_DETERMINANT) {
            return Err(Error::Singular(det.abs()));
        }
        Ok(t)
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "affine last row must be exactly (0, 0, 1), got {:?}",
                m[2]
            )));
        }
        Self::new([m[0], m[1]])
    }

    pub fn identity() -> Self {
        Self {
            rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            rows: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Maps `p` to `c_to + R(angle) (p - c_from)`, with
    /// `R(a) = [[cos a, -sin a], [sin a, cos a]]` (radians).
    pub fn rotation_about(angle: f64, c_from: (f64, f64), c_to: (f64, f64)) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rows: [
                [c, -s, c_to.0 - c * c_from.0 + s * c_from.1],
                [s, c, c_to.1 - s * c_from.0 - c * c_from.1],
            ],
        }
    }

    pub fn rows(&self) -> [[f64; 3]; 2] {
        self.rows
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [self.rows[0], self.rows[1], [0.0, 0.0, 1.0]]
    }

    pub fn linear(&self) -> [[f64; 2]; 2] {
        [
            [self.rows[0][0], self.rows[0][1]],
            [self.rows[1][0], self.rows[1][1]],
        ]
    }

    pub fn translation_part(&self) -> (f64, f64) {
        (self.rows[0][2], self.rows[1][2])
    }

    pub fn determinant(&self) -> f64 {
        self.rows[0][0] * self.rows[1][1] - self.rows[0][1] * self.rows[1][0]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [r0, r1] = &self.rows;
        (
            r0[0] * x + r0[1] * y + r0[2],
            r1[0] * x + r1[1] * y + r1[2],
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !(det.abs() > MIN_DETERMINANT) {
            return Err(Error::Singular(det.abs()));
        }
        let [[a, b, tx], [c, d, ty]] = self.rows;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Self::new([
            [ia, ib, -(ia * tx + ib * ty)],
            [ic, id, -(ic * tx + id * ty)],
        ])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        let a = self.matrix();
        let b = other.matrix();
        let mut rows = [[0.0; 3]; 2];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Self::new(rows)
    }

    /// Same map expressed on a raster whose pixel `i` sits at `i * scale`
    /// in this transform's frame: the linear part is unchanged and the
    /// translation is divided by `scale`.
    pub fn to_scaled_frame(&self, scale: f64) -> Self {
        let mut rows = self.rows;
        rows[0][2] /= scale;
        rows[1][2] /= scale;
        Self { rows }
    }

    /// Inverse of [`Self::to_scaled_frame`].
    pub fn from_scaled_frame(&self, scale: f64) -> Self {
        let mut rows = self.rows;
        rows[0][2] *= scale;
        rows[1][2] *= scale;
        Self { rows }
    }

    /// (a, b, c, d, tx, ty) for `x' = a x + b y + tx`, `y' = c x + d y + ty`.
    pub fn params(&self) -> [f64; 6] {
        let [[a, b, tx], [c, d, ty]] = self.rows;
        [a, b, c, d, tx, ty]
    }

    pub fn from_params(p: [f64; 6]) -> Result<Self> {
        Self::new([[p[0], p[1], p[4]], [p[2], p[3], p[5]]])
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for AffineTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.matrix().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = <[[f64; 3]; 3]>::deserialize(d)?;
        Self::from_matrix(m).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueCentroid {
    pub x: f64,
    pub y: f64,
    /// Too little foreground; the image centre was returned.
    pub fallback: bool,
}

/// Minimum foreground fraction for a centroid to be trusted.
pub const MIN_FOREGROUND_FRACTION: f64 = 0.001;

/// Otsu threshold: samples strictly above it are foreground. `None` for a
/// single-valued histogram.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let sum: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut wb, mut sum_b) = (0u64, 0.0);
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        wb += hist[t];
        if wb == 0 {
            continue;
        }
        let wf = total - wb;
        if wf == 0 {
            break;
        }
        sum_b += t as f64 * hist[t] as f64;
        let mb = sum_b / wb as f64;
        let mf = (sum - sum_b) / wf as f64;
        let between = wb as f64 * wf as f64 * (mb - mf) * (mb - mf);
        if best.map_or(true, |(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Centroid of the Otsu foreground of a normalized (tissue-bright) raster.
pub fn estimate_tissue_centroid(r: &Raster) -> Result<TissueCentroid> {
    if r.channels() != 1 {
        return Err(Error::invalid("tissue centroid needs a 1-channel raster"));
    }
    let (w, h) = r.dims();
    let centre = TissueCentroid {
        x: (w as f64 - 1.0) / 2.0,
        y: (h as f64 - 1.0) / 2.0,
        fallback: true,
    };
    let Some(t) = otsu_threshold(&histogram(r)) else {
        return Ok(centre);
    };
    let (mut n, mut sx, mut sy) = (0u64, 0.0, 0.0);
    for y in 0..h {
        for (x, &v) in r.row(y).iter().enumerate() {
            if v > t {
                n += 1;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    if (n as f64) < MIN_FOREGROUND_FRACTION * (w * h) as f64 || n == 0 {
        return Ok(centre);
    }
    Ok(TissueCentroid {
        x: sx / n as f64,
        y: sy / n as f64,
        fallback: false,
    })
}

/// Correlation between `fixed` and `moving` sampled through `a` over the
/// overlap: fixed pixels whose mapped point falls inside `moving`. Moving
/// samples are bilinear and unrounded.
pub fn ncc_under_affine(fixed: &Raster, moving: &Raster, a: &AffineTransform) -> f64 {
    let (fw, fh) = fixed.dims();
    let (mw, mh) = moving.dims();
    let (xmax, ymax) = ((mw - 1) as f64, (mh - 1) as f64);
    let [[a00, a01, tx], [a10, a11, ty]] = a.rows;
    let md = moving.data();
    let (x1, y1) = (usize::from(mw > 1), if mh > 1 { mw } else { 0 });
    let (x0max, y0max) = (mw.saturating_sub(2), mh.saturating_sub(2));
    const SHIFT: f64 = 128.0;
    let mut n = 0usize;
    let mut sums = [0.0f64; 5];
    for y in 0..fh {
        let yf = y as f64;
        let (bx, by) = (a01 * yf + tx, a11 * yf + ty);
        let Some((xa, xb)) = row_span(a00, bx, xmax, fw).and_then(|(p, q)| {
            let (r, t) = row_span(a10, by, ymax, fw)?;
            (p.max(r) <= q.min(t)).then(|| (p.max(r), q.min(t)))
        }) else {
            continue;
        };
        let row = &fixed.row(y)[xa..=xb];
        let mut r = [0.0f64; 5];
        for (x, &fv) in (xa..=xb).zip(row) {
            let xf = x as f64;
            let mx = a00 * xf + bx;
            let my = a10 * xf + by;
            // The span is widened by a pixel against rounding; recheck.
            if !(mx >= 0.0 && my >= 0.0 && mx <= xmax && my <= ymax) {
                continue;
            }
            let xi = (mx as usize).min(x0max);
            let yi = (my as usize).min(y0max);
            let (fx, fy) = (mx - xi as f64, my - yi as f64);
            let k = yi * mw + xi;
            let (p00, p10) = (md[k] as f64, md[k + x1] as f64);
            let (p01, p11) = (md[k + y1] as f64, md[k + y1 + x1] as f64);
            let top = p00 + fx * (p10 - p00);
            let bot = p01 + fx * (p11 - p01);
            let fa = fv as f64 - SHIFT;
            let mb = top + fy * (bot - top) - SHIFT;
            n += 1;
            r[0] += fa;
            r[1] += mb;
            r[2] += fa * fa;
            r[3] += mb * mb;
            r[4] += fa * mb;
        }
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
    }
    if n < MIN_MASKED_SAMPLES {
        return 0.0;
    }
    Correlation::from_shifted_sums(SHIFT, SHIFT, n as f64, sums).value()
}

/// Columns `x` in `0..w` with `0 <= c * x + b <= hi`, widened by one on each
/// side; `None` when empty.
fn row_span(c: f64, b: f64, hi: f64, w: usize) -> Option<(usize, usize)> {
    let last = (w - 1) as f64;
    let (lo_x, hi_x) = if c == 0.0 {
        if !(b >= 0.0 && b <= hi) {
            return None;
        }
        (0.0, last)
    } else {
        let (p, q) = ((0.0 - b) / c, (hi - b) / c);
        (p.min(q) - 1.0, p.max(q) + 1.0)
    };
    let lo_x = lo_x.ceil().max(0.0);
    let hi_x = hi_x.floor().min(last);
    if !(lo_x <= hi_x) {
        return None;
    }
    Some((lo_x as usize, hi_x as usize))
}

/// Pair rasters resampled so the long side is at most `long_side`, with the
/// factor from pair pixels to working pixels.
fn working_pair(pair: &PreprocessedPair, long_side: usize) -> Result<(Cow<'_, Raster>, Cow<'_, Raster>, f64)> {
    let (w, h) = pair.dims();
    let long = w.max(h);
    if long <= long_side {
        return Ok((Cow::Borrowed(&pair.fixed), Cow::Borrowed(&pair.moving), 1.0));
    }
    let factor = long_side as f64 / long as f64;
    Ok((
        Cow::Owned(resample(&pair.fixed, factor)?),
        Cow::Owned(resample(&pair.moving, factor)?),
        factor,
    ))
}

pub const DEFAULT_SEARCH_LONG_SIDE: usize = 512;
pub const DEFAULT_WORKING_LONG_SIDE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSearch {
    /// Best candidate, in preprocessed-pair pixels.
    pub transform: AffineTransform,
    pub score: f64,
    pub angle_deg: f64,
}

/// Candidate backward transform for sweep angle `theta_deg`: linear part
/// `R(-theta)`, fixed centroid mapped onto the moving centroid.
pub fn rotation_candidate(theta_deg: f64, fixed_c: (f64, f64), moving_c: (f64, f64)) -> AffineTransform {
    AffineTransform::rotation_about(-theta_deg.to_radians(), fixed_c, moving_c)
}

pub fn exhaustive_rotation_search(pair: &PreprocessedPair, angle_step_deg: f64) -> Result<RotationSearch> {
    exhaustive_rotation_search_at(pair, angle_step_deg, DEFAULT_SEARCH_LONG_SIDE)
}

pub fn exhaustive_rotation_search_at(
    pair: &PreprocessedPair,
    angle_step_deg: f64,
    long_side: usize,
) -> Result<RotationSearch> {
    if !(angle_step_deg > 0.0 && angle_step_deg <= 90.0) {
        return Err(Error::invalid(format!(
            "angle step {angle_step_deg} must be in (0, 90]"
        )));
    }
    let cf = estimate_tissue_centroid(&pair.fixed)?;
    let cm = estimate_tissue_centroid(&pair.moving)?;
    let (fixed, moving, k) = working_pair(pair, long_side)?;
    let mut best: Option<RotationSearch> = None;
    let mut i = 0usize;
    loop {
        let theta = i as f64 * angle_step_deg;
        if theta >= 360.0 {
            break;
        }
        let cand = rotation_candidate(theta, (cf.x, cf.y), (cm.x, cm.y));
        let score = ncc_under_affine(&fixed, &moving, &cand.to_scaled_frame(1.0 / k));
        if best.map_or(true, |b| score > b.score) {
            best = Some(RotationSearch {
                transform: cand,
                score,
                angle_deg: theta,
            });
        }
        i += 1;
    }
    Ok(best.expect("at least the zero angle is evaluated"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// In preprocessed-pair pixels.
    pub transform: AffineTransform,
    /// Cost (negative correlation) before the first and after every
    /// accepted iteration.
    pub trace: Vec<f64>,
}

const FD_LINEAR: f64 = 1e-3;
const FD_TRANSLATION: f64 = 0.5;
const MAX_HALVINGS: usize = 10;
const STALL_TOLERANCE: f64 = 1e-5;
const STALL_ITERATIONS: usize = 10;
const MAX_STEP_PX: f64 = 32.0;

pub fn refine_affine(pair: &PreprocessedPair, init: &AffineTransform, max_iters: usize) -> Result<Refinement> {
    refine_affine_at(pair, init, max_iters, DEFAULT_WORKING_LONG_SIDE)
}

/// Descent on `-ncc` over the six affine parameters at a working
/// resolution. Steps are measured in working pixels of point motion, with
/// linear entries scaled by half the long side.
pub fn refine_affine_at(
    pair: &PreprocessedPair,
    init: &AffineTransform,
    max_iters: usize,
    long_side: usize,
) -> Result<Refinement> {
    let det = init.determinant();
    if !(det.abs() > MIN_DETERMINANT) {
        return Err(Error::Singular(det.abs()));
    }
    let (fixed, moving, k) = working_pair(pair, long_side)?;
    let radius = (fixed.width().max(fixed.height()) as f64 / 2.0).max(1.0);
    // The translation parameters move the fixed centre, so changes of the
    // linear part do not drag the image sideways.
    let c = ((fixed.width() - 1) as f64 / 2.0, (fixed.height() - 1) as f64 / 2.0);
    let uncenter = |p: &[f64; 6]| {
        let [a, b, cc, d, tx, ty] = *p;
        [a, b, cc, d, tx + c.0 - (a * c.0 + b * c.1), ty + c.1 - (cc * c.0 + d * c.1)]
    };
    let cost = |p: &[f64; 6]| -> f64 {
        match AffineTransform::from_params(uncenter(p)) {
            Ok(t) => -ncc_under_affine(&fixed, &moving, &t),
            Err(_) => f64::INFINITY,
        }
    };
    let start = init.to_scaled_frame(1.0 / k);
    let moved = start.apply(c.0, c.1);
    let mut p = start.params();
    p[4] = moved.0 - c.0;
    p[5] = moved.1 - c.1;
    let mut current = cost(&p);
    let mut trace = vec![current];
    let mut alpha = 1.0f64;
    let mut stalled = 0;
    for _ in 0..max_iters {
        let mut grad = [0.0; 6];
        for (i, g) in grad.iter_mut().enumerate() {
            let h = if i < 4 { FD_LINEAR } else { FD_TRANSLATION };
            let mut hi = p;
            let mut lo = p;
            hi[i] += h;
            lo[i] -= h;
            *g = (cost(&hi) - cost(&lo)) / (2.0 * h);
        }
        // Gradient with respect to point motion in pixels.
        let mut dir = [0.0; 6];
        for i in 0..6 {
            dir[i] = if i < 4 { grad[i] / radius } else { grad[i] };
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            break;
        }
        let mut accepted = None;
        let mut step = alpha;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = p;
            for i in 0..6 {
                let d = -step * dir[i] / norm;
                cand[i] += if i < 4 { d / radius } else { d };
            }
            let c = cost(&cand);
            if c < current {
                accepted = Some((cand, c, step));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c, used)) = accepted else {
            break;
        };
        let rel = (current - c) / current.abs().max(1e-12);
        p = cand;
        current = c;
        trace.push(current);
        alpha = (used * 1.5).min(MAX_STEP_PX);
        if rel < STALL_TOLERANCE {
            stalled += 1;
            if stalled >= STALL_ITERATIONS {
                break;
            }
        } else {
            stalled = 0;
        }
    }
    Ok(Refinement {
        transform: AffineTransform::from_params(uncenter(&p))?.to_scaled_frame(k),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialParams {
    pub enabled: bool,
    pub angle_step_deg: f64,
    pub refine_max_iters: usize,
    pub search_long_side: usize,
    pub working_long_side: usize,
}

impl Default for InitialParams {
    fn default() -> Self {
        Self {
            enabled: true,
            angle_step_deg: 15.0,
            refine_max_iters: 100,
            search_long_side: DEFAULT_SEARCH_LONG_SIDE,
            working_long_side: DEFAULT_WORKING_LONG_SIDE,
        }
    }
}

/// Below this search correlation the result is a centroid translation.
pub const LOW_CONFIDENCE_NCC: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct InitialResult {
    /// Level-0 backward transform.
    pub transform: AffineTransform,
    pub search: RotationSearch,
    pub refine_trace: Vec<f64>,
    pub low_confidence: bool,
}

pub fn run_initial(pair: &PreprocessedPair, params: &InitialParams) -> Result<InitialResult> {
    let search = exhaustive_rotation_search_at(pair, params.angle_step_deg, params.search_long_side)?;
    if search.score < LOW_CONFIDENCE_NCC {
        let cf = estimate_tissue_centroid(&pair.fixed)?;
        let cm = estimate_tissue_centroid(&pair.moving)?;
        let t = AffineTransform::translation(cm.x - cf.x, cm.y - cf.y);
        return Ok(InitialResult {
            transform: t.from_scaled_frame(pair.scale),
            search,
            refine_trace: Vec::new(),
            low_confidence: true,
        });
    }
    let refined = refine_affine_at(
        pair,
        &search.transform,
        params.refine_max_iters,
        params.working_long_side,
    )?;
    Ok(InitialResult {
        transform: refined.transform.from_scaled_frame(pair.scale),
        search,
        refine_trace: refined.trace,
        low_confidence: false,
    })
}
