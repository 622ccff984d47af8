//! Field algebra and tiled backward warping.

mod dhdf;
mod field;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dhdf::{read_dhdf, write_dhdf, DHDF_MAGIC, DHDF_VERSION};
pub use field::{sample_displacement, DisplacementField, SPACING_TOLERANCE};

use crate::error::{Error, Result};
use crate::initial_alignment::AffineTransform;
use crate::pyramid_io::{save_pyramid_tiff, PyramidImage, Raster, TileSource};

pub const DEFAULT_INVERSION_TOLERANCE: f64 = 0.05;
pub const DEFAULT_INVERSION_ITERATIONS: usize = 50;
pub const DEFAULT_TILE_SIZE: usize = 512;
/// Source bounding boxes larger than this many output tiles are split.
pub const MAX_BBOX_TILES: usize = 16;
const BBOX_MARGIN: i64 = 2;

/// Grid dimensions with node spacing close to `spacing` that satisfy the
/// field's uniform-spacing invariant over a `width`x`height` domain.
pub fn uniform_grid_for(width: usize, height: usize, spacing: f64) -> Result<(usize, usize)> {
    if width < 2 || height < 2 {
        return Err(Error::invalid(format!("domain {width}x{height} is too small for a field")));
    }
    let (long, short, wide) = if width >= height {
        (width, height, true)
    } else {
        (height, width, false)
    };
    let spacing = spacing.max(1.0);
    let start = ((short as f64 / spacing).round() as usize).clamp(2, short);
    for gs in start..=short {
        let s = short as f64 / gs as f64;
        let gl = ((long as f64 / s).round() as usize).clamp(2, long);
        let sl = long as f64 / gl as f64;
        if (s - sl).abs() <= SPACING_TOLERANCE * sl {
            return Ok(if wide { (gl, gs) } else { (gs, gl) });
        }
    }
    Ok((width, height))
}

/// Total backward map `m(x) = A(x + u(x))` as a field `v(x) = m(x) - x`.
pub fn compose_affine_with_field(a: &AffineTransform, f: &DisplacementField) -> Result<DisplacementField> {
    let det = a.determinant();
    if !(det.abs() > crate::initial_alignment::MIN_DETERMINANT) {
        return Err(Error::Singular(det.abs()));
    }
    let (gw, gh) = f.grid_dims();
    let (w, h) = f.level0_dims();
    DisplacementField::new(gw, gh, w, h, {
        let mut v = Vec::with_capacity(gw * gh * 2);
        for j in 0..gh {
            for i in 0..gw {
                let (x, y) = f.node_position(i, j);
                let (ux, uy) = f.node(i, j);
                let (mx, my) = a.apply(x + ux, y + uy);
                v.push(mx - x);
                v.push(my - y);
            }
        }
        v
    })
}

#[derive(Debug, Clone)]
pub struct FieldInversion {
    pub field: DisplacementField,
    pub non_converged: usize,
}

/// Solves `x + u(x) = p` for `x` by fixed-point iteration from `x_0 = p`.
///
/// Returns the last iterate, whether the step fell below `tol`, and the
/// number of iterations taken.
pub fn invert_point(f: &DisplacementField, p: (f64, f64), tol: f64, max_iters: usize) -> ((f64, f64), bool, usize) {
    let mut x = p;
    for k in 1..=max_iters {
        let (ux, uy) = f.sample(x.0, x.1);
        let next = (p.0 - ux, p.1 - uy);
        let step = (next.0 - x.0).hypot(next.1 - x.1);
        x = next;
        if step < tol {
            return (x, true, k);
        }
    }
    (x, false, max_iters)
}

/// Inverse field `v` with `(id + u)(p + v(p)) ~= p` at every node.
pub fn invert_field(f: &DisplacementField, tol: f64, max_iters: usize) -> Result<FieldInversion> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("inversion tolerance {tol} must be > 0")));
    }
    let (gw, gh) = f.grid_dims();
    let (w, h) = f.level0_dims();
    let mut v = Vec::with_capacity(gw * gh * 2);
    let mut non_converged = 0;
    for j in 0..gh {
        for i in 0..gw {
            let p = f.node_position(i, j);
            let (x, ok, _) = invert_point(f, p, tol, max_iters);
            if !ok {
                non_converged += 1;
            }
            v.push(x.0 - p.0);
            v.push(x.1 - p.1);
        }
    }
    Ok(FieldInversion {
        field: DisplacementField::new(gw, gh, w, h, v)?,
        non_converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            other => Err(Error::invalid(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Everything needed to produce any part of the warped output.
#[derive(Debug, Clone, Copy)]
pub struct WarpPlan<'a> {
    /// Total backward field over the output domain.
    pub field: &'a DisplacementField,
    pub source: &'a PyramidImage,
    pub output_width: usize,
    pub output_height: usize,
    pub tile_size: usize,
    pub interpolation: Interpolation,
    pub fill: u8,
}

impl<'a> WarpPlan<'a> {
    /// Output dimensions are the field's level-0 domain.
    pub fn new(
        field: &'a DisplacementField,
        source: &'a PyramidImage,
        tile_size: usize,
        interpolation: Interpolation,
        fill: u8,
    ) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::invalid("warp tile size must be > 0"));
        }
        let (output_width, output_height) = field.level0_dims();
        Ok(Self {
            field,
            source,
            output_width,
            output_height,
            tile_size,
            interpolation,
            fill,
        })
    }
}

/// Warps the output window `[x, x+w) x [y, y+h)`.
///
/// Output pixel `q` takes the source sample at `q + v(q)`. Bilinear
/// sampling treats source neighbours outside the image as the fill value
/// and rounds half away from zero; nearest picks `floor(s + 0.5)`. Only the
/// source bounding box of the window (plus a 2 px margin) is read.
pub fn warp_region(plan: &WarpPlan, x: usize, y: usize, w: usize, h: usize) -> Result<Raster> {
    let mut fan_in = 0;
    warp_region_counted(plan, x, y, w, h, &mut fan_in)
}

fn warp_region_counted(plan: &WarpPlan, x: usize, y: usize, w: usize, h: usize, fan_in: &mut usize) -> Result<Raster> {
    if w == 0 || h == 0 || x + w > plan.output_width || y + h > plan.output_height {
        return Err(Error::invalid(format!(
            "region {w}x{h} at ({x}, {y}) is outside the {}x{} output",
            plan.output_width, plan.output_height
        )));
    }
    let mut out = Raster::filled(w, h, plan.source.channels(), plan.fill);
    warp_into(plan, (x, y, w, h), &mut out, (0, 0), fan_in)?;
    Ok(out)
}

#[inline]
fn source_point(plan: &WarpPlan, qx: usize, qy: usize) -> (f64, f64) {
    let (qx, qy) = (qx as f64, qy as f64);
    let (dx, dy) = plan.field.sample(qx, qy);
    (qx + dx, qy + dy)
}

/// Inclusive integer range of source pixels touched by sampling at `s`.
#[inline]
fn touched(s: f64, interp: Interpolation) -> (i64, i64) {
    match interp {
        Interpolation::Bilinear => {
            let f = s.floor() as i64;
            (f, f.saturating_add(1))
        }
        Interpolation::Nearest => {
            let f = (s + 0.5).floor() as i64;
            (f, f)
        }
    }
}

fn warp_into(
    plan: &WarpPlan,
    region: (usize, usize, usize, usize),
    out: &mut Raster,
    at: (usize, usize),
    fan_in: &mut usize,
) -> Result<()> {
    let (rx, ry, rw, rh) = region;
    let (sw, sh) = (plan.source.width() as i64, plan.source.height() as i64);

    let (mut x0, mut x1, mut y0, mut y1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for qy in ry..ry + rh {
        for qx in rx..rx + rw {
            let (sx, sy) = source_point(plan, qx, qy);
            let (a, b) = touched(sx, plan.interpolation);
            let (c, d) = touched(sy, plan.interpolation);
            x0 = x0.min(a);
            x1 = x1.max(b);
            y0 = y0.min(c);
            y1 = y1.max(d);
        }
    }
    let bx0 = x0.saturating_sub(BBOX_MARGIN).max(0);
    let by0 = y0.saturating_sub(BBOX_MARGIN).max(0);
    let bx1 = x1.saturating_add(BBOX_MARGIN).min(sw - 1);
    let by1 = y1.saturating_add(BBOX_MARGIN).min(sh - 1);
    if bx0 > bx1 || by0 > by1 {
        return Ok(());
    }
    let (bw, bh) = ((bx1 - bx0 + 1) as usize, (by1 - by0 + 1) as usize);
    let limit = MAX_BBOX_TILES.saturating_mul(plan.tile_size * plan.tile_size);
    if bw.saturating_mul(bh) > limit && (rw > 1 || rh > 1) {
        let (hw, hh) = (rw.div_ceil(2), rh.div_ceil(2));
        for (ox, w) in [(0, hw), (hw, rw - hw)] {
            for (oy, h) in [(0, hh), (hh, rh - hh)] {
                if w > 0 && h > 0 {
                    warp_into(plan, (rx + ox, ry + oy, w, h), out, (at.0 + ox, at.1 + oy), fan_in)?;
                }
            }
        }
        return Ok(());
    }

    let level0 = plan.source.level(0)?;
    if let Some((cols, rows)) = level0.tiles_covering(bx0, by0, bw, bh) {
        *fan_in = (*fan_in).max(cols.len() * rows.len());
    }
    let src = plan.source.read_region(0, bx0, by0, bw, bh)?;
    let ch = src.channels();
    let fill = plan.fill as f64;
    let data = src.data();
    let stride = bw * ch;
    // Source sample at absolute (x, y), or `None` outside the source.
    let at_src = |x: i64, y: i64| -> Option<usize> {
        if x < bx0 || x > bx1 || y < by0 || y > by1 {
            None
        } else {
            Some((y - by0) as usize * stride + (x - bx0) as usize * ch)
        }
    };
    for j in 0..rh {
        let row = out.row_mut(at.1 + j);
        for i in 0..rw {
            let (sx, sy) = source_point(plan, rx + i, ry + j);
            let px = &mut row[(at.0 + i) * ch..(at.0 + i + 1) * ch];
            match plan.interpolation {
                Interpolation::Nearest => {
                    let (xn, _) = touched(sx, Interpolation::Nearest);
                    let (yn, _) = touched(sy, Interpolation::Nearest);
                    match at_src(xn, yn) {
                        Some(k) => px.copy_from_slice(&data[k..k + ch]),
                        None => px.fill(plan.fill),
                    }
                }
                Interpolation::Bilinear => {
                    let xf = sx.floor();
                    let yf = sy.floor();
                    let (fx, fy) = (sx - xf, sy - yf);
                    let (xi, yi) = (xf as i64, yf as i64);
                    let k00 = at_src(xi, yi);
                    let k10 = at_src(xi.saturating_add(1), yi);
                    let k01 = at_src(xi, yi.saturating_add(1));
                    let k11 = at_src(xi.saturating_add(1), yi.saturating_add(1));
                    if k00.is_none() && k10.is_none() && k01.is_none() && k11.is_none() {
                        px.fill(plan.fill);
                        continue;
                    }
                    let v = |k: Option<usize>, c: usize| k.map_or(fill, |k| data[k + c] as f64);
                    for (c, p) in px.iter_mut().enumerate() {
                        let top = (1.0 - fx) * v(k00, c) + fx * v(k10, c);
                        let bottom = (1.0 - fx) * v(k01, c) + fx * v(k11, c);
                        let s = (1.0 - fy) * top + fy * bottom;
                        *p = s.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WarpStats {
    pub tiles: usize,
    pub bytes_written: u64,
    /// Largest number of source tiles read for a single output tile.
    pub max_source_tiles: usize,
}

struct WarpSource<'p, 'a> {
    plan: &'p WarpPlan<'a>,
    tiles: usize,
    fan_in: usize,
}

impl TileSource for WarpSource<'_, '_> {
    fn width(&self) -> usize {
        self.plan.output_width
    }

    fn height(&self) -> usize {
        self.plan.output_height
    }

    fn channels(&self) -> usize {
        self.plan.source.channels()
    }

    fn next_tile(&mut self, x: usize, y: usize, w: usize, h: usize) -> Result<Option<Raster>> {
        self.tiles += 1;
        warp_region_counted(self.plan, x, y, w, h, &mut self.fan_in).map(Some)
    }
}

/// Warps the whole output tile by tile, in row-major order, straight into a
/// pyramidal TIFF at `path`.
pub fn warp_image_tiled(plan: &WarpPlan, path: impl AsRef<Path>, num_levels: usize) -> Result<WarpStats> {
    let mut src = WarpSource {
        plan,
        tiles: 0,
        fan_in: 0,
    };
    let written = save_pyramid_tiff(&mut src, path, plan.tile_size, num_levels)?;
    Ok(WarpStats {
        tiles: src.tiles,
        bytes_written: written.bytes_written,
        max_source_tiles: src.fan_in,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(w: usize, h: usize, ch: usize) -> Raster {
        let data = (0..w * h * ch)
            .map(|k| ((k * 2654435761usize) >> 7) as u8)
            .collect();
        Raster::new(w, h, ch, data).unwrap()
    }

    /// Per-pixel backward warp over the whole output with no bounding boxes.
    fn reference_warp(field: &DisplacementField, src: &Raster, interp: Interpolation, fill: u8) -> Raster {
        let (w, h) = field.level0_dims();
        let ch = src.channels();
        let get = |x: f64, y: f64, c: usize| -> f64 {
            if x < 0.0 || y < 0.0 || x >= src.width() as f64 || y >= src.height() as f64 {
                fill as f64
            } else {
                src.get(x as usize, y as usize, c) as f64
            }
        };
        let mut out = Raster::filled(w, h, ch, 0);
        for qy in 0..h {
            for qx in 0..w {
                let (dx, dy) = field.sample(qx as f64, qy as f64);
                let (sx, sy) = (qx as f64 + dx, qy as f64 + dy);
                for c in 0..ch {
                    let v = match interp {
                        Interpolation::Nearest => get((sx + 0.5).floor(), (sy + 0.5).floor(), c),
                        Interpolation::Bilinear => {
                            let (x0, y0) = (sx.floor(), sy.floor());
                            let (fx, fy) = (sx - x0, sy - y0);
                            let top = (1.0 - fx) * get(x0, y0, c) + fx * get(x0 + 1.0, y0, c);
                            let bot = (1.0 - fx) * get(x0, y0 + 1.0, c) + fx * get(x0 + 1.0, y0 + 1.0, c);
                            ((1.0 - fy) * top + fy * bot).round().clamp(0.0, 255.0)
                        }
                    };
                    out.row_mut(qy)[qx * ch + c] = v as u8;
                }
            }
        }
        out
    }

    fn tile_all(plan: &WarpPlan, tile: usize) -> Raster {
        let mut out = Raster::filled(plan.output_width, plan.output_height, plan.source.channels(), 0);
        for y in (0..plan.output_height).step_by(tile) {
            for x in (0..plan.output_width).step_by(tile) {
                let w = tile.min(plan.output_width - x);
                let h = tile.min(plan.output_height - y);
                out.blit(&warp_region(plan, x, y, w, h).unwrap(), x as i64, y as i64);
            }
        }
        out
    }

    #[test]
    fn zero_field_is_identity() {
        let src = textured(70, 50, 3);
        let img = PyramidImage::from_raster_tiled(src.clone(), 16);
        let f = DisplacementField::zeros(35, 25, 70, 50).unwrap();
        let plan = WarpPlan::new(&f, &img, 32, Interpolation::Bilinear, 255).unwrap();
        assert_eq!(warp_region(&plan, 0, 0, 70, 50).unwrap(), src);
        assert_eq!(tile_all(&plan, 16), src);
    }

    #[test]
    fn integer_translation_shifts() {
        let src = textured(64, 64, 1);
        let img = PyramidImage::from_raster_tiled(src.clone(), 16);
        let f = DisplacementField::from_fn(16, 16, 64, 64, |_, _| (16.0, 0.0)).unwrap();
        let plan = WarpPlan::new(&f, &img, 16, Interpolation::Bilinear, 255).unwrap();
        let out = tile_all(&plan, 16);
        for y in 0..64 {
            for x in 0..48 {
                assert_eq!(out.get(x, y, 0), src.get(x + 16, y, 0));
            }
            for x in 48..64 {
                assert_eq!(out.get(x, y, 0), 255);
            }
        }
    }

    #[test]
    fn nearest_preserves_value_set() {
        let mask = Raster::from_fn(40, 40, |x, y| if (x / 7 + y / 5) % 2 == 0 { 0 } else { 1 });
        let img = PyramidImage::from_raster_tiled(mask, 16);
        let f = DisplacementField::from_fn(10, 10, 40, 40, |x, y| (0.37 * y - 3.1, 2.2 - 0.13 * x)).unwrap();
        let plan = WarpPlan::new(&f, &img, 16, Interpolation::Nearest, 0).unwrap();
        let out = warp_region(&plan, 0, 0, 40, 40).unwrap();
        assert!(out.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn region_outside_output_rejected() {
        let img = PyramidImage::from_raster(textured(20, 20, 1));
        let f = DisplacementField::zeros(10, 10, 20, 20).unwrap();
        let plan = WarpPlan::new(&f, &img, 16, Interpolation::Bilinear, 255).unwrap();
        assert!(warp_region(&plan, 10, 10, 11, 5).is_err());
        assert!(WarpPlan::new(&f, &img, 0, Interpolation::Bilinear, 255).is_err());
    }

    #[test]
    fn far_away_source_gives_fill() {
        let img = PyramidImage::from_raster(textured(20, 20, 3));
        let f = DisplacementField::from_fn(4, 4, 20, 20, |_, _| (1e9, -1e9)).unwrap();
        let plan = WarpPlan::new(&f, &img, 16, Interpolation::Bilinear, 17).unwrap();
        let out = warp_region(&plan, 0, 0, 20, 20).unwrap();
        assert!(out.data().iter().all(|&v| v == 17));
    }

    #[test]
    fn pathological_field_splits_but_matches_reference() {
        // Neighbouring nodes point to opposite corners, so every tile's
        // bounding box spans the whole source.
        let src = textured(96, 96, 1);
        let img = PyramidImage::from_raster_tiled(src.clone(), 16);
        let mut f = DisplacementField::zeros(24, 24, 96, 96).unwrap();
        for j in 0..24 {
            for i in 0..24 {
                let (x, y) = f.node_position(i, j);
                let flip = (i + j) % 2 == 0;
                f.set_node(i, j, if flip { (90.0 - x, 90.0 - y) } else { (-x, -y) });
            }
        }
        let plan = WarpPlan::new(&f, &img, 4, Interpolation::Bilinear, 255).unwrap();
        let expected = reference_warp(&f, &src, Interpolation::Bilinear, 255);
        assert_eq!(tile_all(&plan, 16), expected);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tiling_is_transparent(
            seed in any::<u64>(),
            tile in prop::sample::select(vec![7usize, 16, 23, 64]),
            nearest in any::<bool>(),
            amp in 0.0f64..12.0,
        ) {
            let src = textured(60, 45, 3);
            let img = PyramidImage::from_raster_tiled(src.clone(), 16);
            let k = (seed % 1000) as f64 / 100.0;
            let f = DisplacementField::from_fn(20, 15, 60, 45, |x, y| {
                (amp * (0.11 * x + k).sin() - 2.5, amp * (0.07 * y - k).cos() + 1.25)
            }).unwrap();
            let interp = if nearest { Interpolation::Nearest } else { Interpolation::Bilinear };
            let plan = WarpPlan::new(&f, &img, tile, interp, 255).unwrap();
            let expected = reference_warp(&f, &src, interp, 255);
            prop_assert_eq!(tile_all(&plan, tile), expected);
        }
    }

    #[test]
    fn compose_identity_returns_field() {
        let f = DisplacementField::from_fn(9, 7, 27, 21, |x, y| (0.3 * x - 1.0, (0.2 * y).sin())).unwrap();
        let c = compose_affine_with_field(&AffineTransform::identity(), &f).unwrap();
        assert_eq!(c.grid_dims(), f.grid_dims());
        for (a, b) in c.components().iter().zip(f.components()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_translation_with_zero_field() {
        let f = DisplacementField::zeros(9, 7, 27, 21).unwrap();
        let c = compose_affine_with_field(&AffineTransform::translation(4.5, -7.0), &f).unwrap();
        assert!(c.components().chunks(2).all(|p| p == [4.5, -7.0]));
    }

    #[test]
    fn compose_matches_pointwise_evaluation() {
        let a = AffineTransform::new([[0.93, 0.21, 13.0], [-0.17, 1.08, -4.5]]).unwrap();
        let f = DisplacementField::from_fn(12, 10, 120, 100, |x, y| (3.0 * (x / 17.0).sin(), -2.0 * (y / 13.0).cos())).unwrap();
        let c = compose_affine_with_field(&a, &f).unwrap();
        for &(i, j) in &[(0, 0), (5, 3), (11, 9), (7, 8)] {
            let (x, y) = f.node_position(i, j);
            let (ux, uy) = f.node(i, j);
            let (px, py) = (x + ux, y + uy);
            let mx = 0.93 * px + 0.21 * py + 13.0;
            let my = -0.17 * px + 1.08 * py - 4.5;
            let (vx, vy) = c.node(i, j);
            assert!((vx - (mx - x)).abs() < 1e-9 && (vy - (my - y)).abs() < 1e-9);
        }
    }

    #[test]
    fn invert_zero_and_constant() {
        let z = DisplacementField::zeros(6, 6, 30, 30).unwrap();
        let inv = invert_field(&z, 0.05, 50).unwrap();
        assert_eq!(inv.non_converged, 0);
        assert!(inv.field.components().iter().all(|&v| v == 0.0));

        let c = DisplacementField::from_fn(6, 6, 30, 30, |_, _| (3.0, -4.0)).unwrap();
        let (x, ok, iters) = invert_point(&c, (12.0, 9.0), 0.05, 50);
        assert!(ok);
        assert_eq!(iters, 2);
        assert_eq!(x, (9.0, 13.0));
        let inv = invert_field(&c, 0.05, 50).unwrap();
        assert!(inv.field.components().chunks(2).all(|p| p == [-3.0, 4.0]));
    }

    #[test]
    fn inversion_round_trip_on_smooth_field() {
        let f = DisplacementField::from_fn(40, 40, 400, 400, |x, y| {
            (6.0 * (x / 60.0).sin() * (y / 45.0).cos(), 5.0 * (y / 50.0 + x / 90.0).sin())
        })
        .unwrap();
        let inv = invert_field(&f, DEFAULT_INVERSION_TOLERANCE, DEFAULT_INVERSION_ITERATIONS).unwrap();
        assert_eq!(inv.non_converged, 0);
        for j in 0..40 {
            for i in 0..40 {
                let p = f.node_position(i, j);
                let (vx, vy) = inv.field.node(i, j);
                let q = (p.0 + vx, p.1 + vy);
                let (ux, uy) = f.sample(q.0, q.1);
                assert!(((q.0 + ux) - p.0).hypot((q.1 + uy) - p.1) < 0.1);
            }
        }
    }

    #[test]
    fn uniform_grid_choices() {
        assert_eq!(uniform_grid_for(4096, 4096, 4.0).unwrap(), (1024, 1024));
        let (gw, gh) = uniform_grid_for(100, 60, 100.0 / 64.0).unwrap();
        assert!(DisplacementField::zeros(gw, gh, 100, 60).is_ok());
        let (gw, gh) = uniform_grid_for(2000, 30000, 7.3).unwrap();
        assert!(DisplacementField::zeros(gw, gh, 2000, 30000).is_ok());
    }
}
