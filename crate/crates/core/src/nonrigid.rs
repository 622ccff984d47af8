//! Multi-resolution dense displacement optimisation on self-similarity
//! descriptors, with demons-style smoothing of the updated field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initial_alignment::AffineTransform;
use crate::preprocessing::PreprocessedPair;
use crate::pyramid_io::{resample_mapped, Filter, Raster};
use crate::similarity::{check_cost_dims, data_cost_unchecked, mind_descriptors, DescriptorImage};
use crate::warping::{uniform_grid_for, DisplacementField};

/// Step halvings tried before an iteration is rejected.
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// Downsampling of the registration raster at this level.
    pub factor: usize,
    pub iterations: usize,
    pub step: f64,
    /// Gaussian smoothing of the field, in grid pixels.
    pub sigma: f64,
}

/// Levels from coarse to fine; factors strictly decrease and end at 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSchedule {
    levels: Vec<LevelSpec>,
}

impl LevelSchedule {
    pub fn new(levels: Vec<LevelSpec>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("level schedule is empty"));
        }
        if levels.last().map(|l| l.factor) != Some(1) {
            return Err(Error::invalid("level schedule must end at factor 1"));
        }
        if levels.windows(2).any(|w| w[1].factor >= w[0].factor) {
            return Err(Error::invalid("level factors must strictly decrease"));
        }
        for l in &levels {
            if !(l.step.is_finite() && l.step > 0.0) {
                return Err(Error::invalid(format!("step {} must be > 0", l.step)));
            }
            if !(l.sigma.is_finite() && l.sigma >= 0.0) {
                return Err(Error::invalid(format!("sigma {} must be >= 0", l.sigma)));
            }
        }
        Ok(Self { levels })
    }

    pub fn from_params(p: &NonrigidParams) -> Result<Self> {
        if p.levels.len() != p.iterations.len() {
            return Err(Error::invalid(format!(
                "{} levels but {} iteration counts",
                p.levels.len(),
                p.iterations.len()
            )));
        }
        Self::new(
            p.levels
                .iter()
                .zip(&p.iterations)
                .map(|(&factor, &iterations)| LevelSpec {
                    factor,
                    iterations,
                    step: p.step,
                    sigma: p.sigma,
                })
                .collect(),
        )
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonrigidParams {
    pub enabled: bool,
    pub levels: Vec<usize>,
    pub iterations: Vec<usize>,
    pub step: f64,
    pub sigma: f64,
    /// Long side of the images the field is optimised on; the finest level
    /// dominates the run time, so keep this near the size that matters.
    pub registration_long_side: usize,
}

pub const DEFAULT_REGISTRATION_LONG_SIDE: usize = 2048;

impl Default for NonrigidParams {
    fn default() -> Self {
        Self {
            enabled: true,
            levels: vec![4, 2, 1],
            iterations: vec![100, 100, 50],
            step: 0.5,
            sigma: 2.0,
            registration_long_side: DEFAULT_REGISTRATION_LONG_SIDE,
        }
    }
}

/// Bilinear transfer of `f` onto a finer grid over the same domain.
pub fn upsample_field(f: &DisplacementField, new_grid: (usize, usize)) -> Result<DisplacementField> {
    let (gw, gh) = f.grid_dims();
    if new_grid.0 < gw || new_grid.1 < gh {
        return Err(Error::invalid(format!(
            "cannot upsample a {gw}x{gh} field to {}x{}",
            new_grid.0, new_grid.1
        )));
    }
    let (w, h) = f.level0_dims();
    let data = resample_grid(f.components(), (gw, gh), new_grid, gw as f64 / new_grid.0 as f64);
    DisplacementField::new(new_grid.0, new_grid.1, w, h, data)
}

/// Samples an interleaved 2-channel grid at `ratio * (i, j)` for every node
/// of the new grid, with clamp-to-edge.
fn resample_grid(u: &[f64], old: (usize, usize), new: (usize, usize), ratio: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(new.0 * new.1 * 2);
    for j in 0..new.1 {
        for i in 0..new.0 {
            let v = sample2(u, old.0, old.1, i as f64 * ratio, j as f64 * ratio);
            out.push(v.0);
            out.push(v.1);
        }
    }
    out
}

#[inline]
pub(crate) fn sample2(u: &[f64], w: usize, h: usize, x: f64, y: f64) -> (f64, f64) {
    let (i0, i1, fx) = crate::similarity::bilinear_axis(x, w);
    let (j0, j1, fy) = crate::similarity::bilinear_axis(y, h);
    let (a, b) = (2 * (j0 * w + i0), 2 * (j0 * w + i1));
    let (c, d) = (2 * (j1 * w + i0), 2 * (j1 * w + i1));
    let tx = (1.0 - fx) * u[a] + fx * u[b];
    let ty = (1.0 - fx) * u[a + 1] + fx * u[b + 1];
    let bx = (1.0 - fx) * u[c] + fx * u[d];
    let by = (1.0 - fx) * u[c + 1] + fx * u[d + 1];
    ((1.0 - fy) * tx + fy * bx, (1.0 - fy) * ty + fy * by)
}

/// Normalized Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing of an interleaved 2-channel grid,
/// clamp-to-edge.
pub(crate) fn smooth2(u: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let mut tmp = Vec::new();
    let mut out = Vec::new();
    smooth2_into(u, w, h, kernel, &mut tmp, &mut out);
    out
}

/// [`smooth2`] into `out`, with `tmp` as scratch; both are resized.
fn smooth2_into(u: &[f64], w: usize, h: usize, kernel: &[f64], tmp: &mut Vec<f64>, out: &mut Vec<f64>) {
    out.clear();
    if kernel.len() == 1 {
        out.extend_from_slice(u);
        return;
    }
    let r = kernel.len() / 2;
    let n = 2 * w;
    tmp.clear();
    tmp.resize(u.len(), 0.0);
    out.resize(u.len(), 0.0);
    let mut pad = vec![0.0; n + 4 * r];
    for y in 0..h {
        let row = &u[y * n..(y + 1) * n];
        for i in 0..r {
            pad[2 * i..2 * i + 2].copy_from_slice(&row[..2]);
            pad[2 * (r + w + i)..2 * (r + w + i) + 2].copy_from_slice(&row[n - 2..]);
        }
        pad[2 * r..2 * r + n].copy_from_slice(row);
        let dst = &mut tmp[y * n..(y + 1) * n];
        for (t, &k) in kernel.iter().enumerate() {
            for (d, &p) in dst.iter_mut().zip(&pad[2 * t..2 * t + n]) {
                *d += k * p;
            }
        }
    }
    for (y, dst) in out.chunks_exact_mut(n).enumerate() {
        for (t, &k) in kernel.iter().enumerate() {
            let yy = (y + t).saturating_sub(r).min(h - 1);
            for (d, &p) in dst.iter_mut().zip(&tmp[yy * n..(yy + 1) * n]) {
                *d += k * p;
            }
        }
    }
}

/// Per-level buffers reused across iterations.
#[derive(Default)]
struct Scratch {
    force: Vec<f64>,
    tmp: Vec<f64>,
    su: Vec<f64>,
    sg: Vec<f64>,
    cand: Vec<f64>,
}

/// Floats per pixel in [`LevelData::packed`]: 4 descriptor channels, their
/// x derivatives, then their y derivatives.
const PACKED: usize = 12;

/// Descriptors of one level plus the moving descriptors' gradients.
struct LevelData {
    w: usize,
    h: usize,
    df: DescriptorImage,
    dm: DescriptorImage,
    /// Moving descriptors and central differences, [`PACKED`] per pixel.
    packed: Vec<f32>,
    /// Level-0 pixels per grid pixel.
    scale: f64,
}

impl LevelData {
    fn new(df: DescriptorImage, dm: DescriptorImage, scale: f64) -> Self {
        let (w, h) = dm.dims();
        let d = dm.data();
        let mut packed = vec![0f32; w * h * PACKED];
        for y in 0..h {
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let g = &mut packed[(y * w + x) * PACKED..][..PACKED];
                for c in 0..4 {
                    g[c] = d[(y * w + x) * 4 + c];
                    g[4 + c] = 0.5 * (d[(y * w + xr) * 4 + c] - d[(y * w + xl) * 4 + c]);
                    g[8 + c] = 0.5 * (d[(yd * w + x) * 4 + c] - d[(yu * w + x) * 4 + c]);
                }
            }
        }
        Self {
            w,
            h,
            df,
            dm,
            packed,
            scale,
        }
    }

    fn cost(&self, u: &[f64]) -> f64 {
        data_cost_unchecked(&self.df, &self.dm, u, self.scale)
    }

    /// Force `sum_c (dm_c(x + u/s) - df_c(x)) grad dm_c(x + u/s)` per pixel.
    fn force(&self, u: &[f64], g: &mut Vec<f64>) {
        let (w, h) = (self.w, self.h);
        let inv = 1.0 / self.scale;
        let df = self.df.data();
        let p = &self.packed;
        g.clear();
        g.resize(w * h * 2, 0.0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                // w, h >= 2, so the second neighbour is always the next one.
                let (i0, _, fx) = crate::similarity::bilinear_axis(x as f64 + u[2 * i] * inv, w);
                let (j0, _, fy) = crate::similarity::bilinear_axis(y as f64 + u[2 * i + 1] * inv, h);
                let top = &p[(j0 * w + i0) * PACKED..][..2 * PACKED];
                let bot = &p[((j0 + 1) * w + i0) * PACKED..][..2 * PACKED];
                let mut v = [0.0f64; PACKED];
                for c in 0..PACKED {
                    let t = top[c] as f64 + fx * (top[PACKED + c] as f64 - top[c] as f64);
                    let b = bot[c] as f64 + fx * (bot[PACKED + c] as f64 - bot[c] as f64);
                    v[c] = t + fy * (b - t);
                }
                let (mut gx, mut gy) = (0.0, 0.0);
                for c in 0..4 {
                    let r = v[c] - df[i * 4 + c] as f64;
                    gx += r * v[4 + c];
                    gy += r * v[8 + c];
                }
                g[2 * i] = gx;
                g[2 * i + 1] = gy;
            }
        }
    }
    /// One update of `u` in place; `None` (and `u` untouched) when every
    /// halving raised the cost.
    fn step(&self, u: &mut Vec<f64>, cost: f64, step: f64, kernel: &[f64], sc: &mut Scratch) -> Option<f64> {
        self.force(u, &mut sc.force);
        // The smoothing is linear: smooth(u - a g) = smooth(u) - a smooth(g).
        smooth2_into(u, self.w, self.h, kernel, &mut sc.tmp, &mut sc.su);
        smooth2_into(&sc.force, self.w, self.h, kernel, &mut sc.tmp, &mut sc.sg);
        let mut a = step * self.scale;
        sc.cand.resize(u.len(), 0.0);
        for _ in 0..=MAX_HALVINGS {
            for ((c, &s), &f) in sc.cand.iter_mut().zip(&sc.su).zip(&sc.sg) {
                *c = s - a * f;
            }
            let c = self.cost(&sc.cand);
            if c <= cost {
                std::mem::swap(u, &mut sc.cand);
                return Some(c);
            }
            a *= 0.5;
        }
        None
    }
}

/// One demons update of `f` over descriptor grids matching its node grid.
///
/// Returns the accepted field and its data cost, or `f` and its own cost
/// when every step halving increased the cost.
pub fn demons_iteration(
    df: &DescriptorImage,
    dm: &DescriptorImage,
    f: &DisplacementField,
    step: f64,
    sigma: f64,
) -> Result<(DisplacementField, f64)> {
    check_cost_dims(df, dm, f)?;
    if !(step > 0.0) || !(sigma >= 0.0) {
        return Err(Error::invalid(format!("step {step} and sigma {sigma} must be positive")));
    }
    let level = LevelData::new(df.clone(), dm.clone(), f.spacing());
    let cost = level.cost(f.components());
    let (gw, gh) = f.grid_dims();
    let (w, h) = f.level0_dims();
    let mut u = f.components().to_vec();
    match level.step(&mut u, cost, step, &gaussian_kernel(sigma), &mut Scratch::default()) {
        Some(c) => Ok((DisplacementField::new(gw, gh, w, h, u)?, c)),
        None => Ok((f.clone(), cost)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTrace {
    pub factor: usize,
    pub grid: (usize, usize),
    /// Data cost before the first and after every accepted iteration.
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NonrigidResult {
    /// Backward field over the fixed level-0 domain, relative to the
    /// affine-prewarped moving image.
    pub field: DisplacementField,
    pub trace: Vec<LevelTrace>,
}

/// Moving raster resampled through `a` onto a `w`x`h` grid, bilinear, with
/// 0 outside.
fn prewarp(moving: &Raster, a: &AffineTransform, w: usize, h: usize) -> Raster {
    let (mw, mh) = moving.dims();
    let md = moving.data();
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= mw as i64 || y >= mh as i64 {
            0.0
        } else {
            md[y as usize * mw + x as usize] as f64
        }
    };
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = a.apply(x as f64, y as f64);
            if !(sx > -1.0 && sy > -1.0 && sx < mw as f64 && sy < mh as f64) {
                continue;
            }
            let (xf, yf) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - xf, sy - yf);
            let (xi, yi) = (xf as i64, yf as i64);
            let top = (1.0 - fx) * px(xi, yi) + fx * px(xi + 1, yi);
            let bot = (1.0 - fx) * px(xi, yi + 1) + fx * px(xi + 1, yi + 1);
            out[y * w + x] = ((1.0 - fy) * top + fy * bot).round().clamp(0.0, 255.0) as u8;
        }
    }
    Raster::new(w, h, 1, out).expect("prewarp output is well formed")
}

fn downsample(r: &Raster, factor: usize, w: usize, h: usize) -> Raster {
    if factor == 1 {
        return r.clone();
    }
    resample_mapped(r, w, h, factor as f64, (0.0, 0.0), Filter::Area)
}

/// Smallest grid the descriptors accept.
const MIN_LEVEL_SIDE: usize = 8;

/// Optimises a dense field between `pair.fixed` and `pair.moving` prewarped
/// by `affine` (level-0 frame).
pub fn run_nonrigid(
    pair: &PreprocessedPair,
    affine: &AffineTransform,
    schedule: &LevelSchedule,
) -> Result<NonrigidResult> {
    let coarsest = schedule.levels()[0].factor;
    let (w, h) = pair.dims();
    let (pw, ph) = (w.div_ceil(coarsest) * coarsest, h.div_ceil(coarsest) * coarsest);
    let fixed = crate::pyramid_io::pad_to(&pair.fixed, pw, ph, 0);
    let moving = prewarp(&pair.moving, &affine.to_scaled_frame(pair.scale), pw, ph);

    let mut u: Option<(Vec<f64>, usize, usize)> = None;
    let mut trace = Vec::new();
    for spec in schedule.levels() {
        let (gw, gh) = (pw / spec.factor, ph / spec.factor);
        let mut cur = match u.take() {
            None => vec![0.0; gw * gh * 2],
            Some((prev, ow, oh)) => resample_grid(&prev, (ow, oh), (gw, gh), ow as f64 / gw as f64),
        };
        if spec.iterations > 0 && gw >= MIN_LEVEL_SIDE && gh >= MIN_LEVEL_SIDE {
            let df = mind_descriptors(&downsample(&fixed, spec.factor, gw, gh))?;
            let dm = mind_descriptors(&downsample(&moving, spec.factor, gw, gh))?;
            let level = LevelData::new(df, dm, pair.scale * spec.factor as f64);
            let kernel = gaussian_kernel(spec.sigma);
            let mut cost = level.cost(&cur);
            let mut costs = vec![cost];
            let mut scratch = Scratch::default();
            for _ in 0..spec.iterations {
                match level.step(&mut cur, cost, spec.step, &kernel, &mut scratch) {
                    Some(c) => {
                        cost = c;
                        costs.push(c);
                    }
                    // A rejected iteration leaves the field unchanged, so
                    // every later one would be rejected too.
                    None => break,
                }
            }
            log::debug!(
                "nonrigid level /{}: {} -> {} over {} steps",
                spec.factor,
                costs[0],
                cost,
                costs.len() - 1
            );
            trace.push(LevelTrace {
                factor: spec.factor,
                grid: (gw, gh),
                costs,
            });
        }
        u = Some((cur, gw, gh));
    }
    let (u, gw, gh) = u.expect("schedule has at least one level");

    let (l0w, l0h) = pair.fixed_level0;
    let (ow, oh) = uniform_grid_for(l0w, l0h, pair.scale)?;
    let s = l0w as f64 / ow as f64;
    let mut data = Vec::with_capacity(ow * oh * 2);
    for j in 0..oh {
        for i in 0..ow {
            let v = sample2(&u, gw, gh, i as f64 * s / pair.scale, j as f64 * s / pair.scale);
            data.push(v.0);
            data.push(v.1);
        }
    }
    Ok(NonrigidResult {
        field: DisplacementField::new(ow, oh, l0w, l0h, data)?,
        trace,
    })
}

/// Smallest Jacobian determinant of `x -> x + u(x)` over grid cells, from
/// forward differences at the nodes.
pub fn min_jacobian_determinant(f: &DisplacementField) -> f64 {
    let (gw, gh) = f.grid_dims();
    let s = f.spacing();
    let mut min = f64::INFINITY;
    for j in 0..gh - 1 {
        for i in 0..gw - 1 {
            let (u0, v0) = f.node(i, j);
            let (u1, v1) = f.node(i + 1, j);
            let (u2, v2) = f.node(i, j + 1);
            let (a, b) = (1.0 + (u1 - u0) / s, (u2 - u0) / s);
            let (c, d) = ((v1 - v0) / s, 1.0 + (v2 - v0) / s);
            min = min.min(a * d - b * c);
        }
    }
    min
}
