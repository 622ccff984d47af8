//! Landmarks, point lists and label masks carried through a total field,
//! plus relative target registration error.
//!
//! Landmark CSV files are UTF-8 with the header `x,y` and one level-0 point
//! (x right, y down) per line. Written files gain a `converged` column when
//! any point failed to converge.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pyramid_io::PyramidImage;
use crate::warping::{
    invert_point, warp_image_tiled, DisplacementField, Interpolation, WarpPlan, WarpStats,
    DEFAULT_INVERSION_ITERATIONS, DEFAULT_INVERSION_TOLERANCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Fixed,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    FixedToMoving,
    MovingToFixed,
}

impl Direction {
    pub fn source_frame(self) -> Frame {
        match self {
            Direction::FixedToMoving => Frame::Fixed,
            Direction::MovingToFixed => Frame::Moving,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-to-moving" => Ok(Self::FixedToMoving),
            "moving-to-fixed" => Ok(Self::MovingToFixed),
            other => Err(Error::invalid(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
    frame: Frame,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>, frame: Frame) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !(p.0.is_finite() && p.1.is_finite())) {
            return Err(Error::invalid(format!("landmark {i} is not finite")));
        }
        Ok(Self { points, frame })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPoints {
    pub points: LandmarkSet,
    /// Per point; always true for the fixed-to-moving direction.
    pub converged: Vec<bool>,
}

impl TransformedPoints {
    pub fn non_converged(&self) -> usize {
        self.converged.iter().filter(|&&c| !c).count()
    }
}

/// Moves points through the total backward field. Fixed-to-moving is a
/// direct lookup; moving-to-fixed solves `x + v(x) = p` per point.
pub fn transform_points(
    pts: &LandmarkSet,
    field: &DisplacementField,
    direction: Direction,
) -> Result<TransformedPoints> {
    if pts.frame != direction.source_frame() {
        return Err(Error::invalid(format!(
            "points are in the {:?} frame but the direction starts from {:?}",
            pts.frame,
            direction.source_frame()
        )));
    }
    let mut out = Vec::with_capacity(pts.len());
    let mut converged = Vec::with_capacity(pts.len());
    for &p in &pts.points {
        match direction {
            Direction::FixedToMoving => {
                let (dx, dy) = field.sample(p.0, p.1);
                out.push((p.0 + dx, p.1 + dy));
                converged.push(true);
            }
            Direction::MovingToFixed => {
                let (x, ok, _) = invert_point(field, p, DEFAULT_INVERSION_TOLERANCE, DEFAULT_INVERSION_ITERATIONS);
                out.push(x);
                converged.push(ok);
            }
        }
    }
    let frame = match direction {
        Direction::FixedToMoving => Frame::Moving,
        Direction::MovingToFixed => Frame::Fixed,
    };
    Ok(TransformedPoints {
        points: LandmarkSet::new(out, frame)?,
        converged,
    })
}

/// Warps a 1-channel label mask with nearest-neighbour sampling and fill 0.
pub fn warp_mask(
    mask: &PyramidImage,
    field: &DisplacementField,
    path: impl AsRef<Path>,
    tile_size: usize,
    num_levels: usize,
) -> Result<WarpStats> {
    if mask.channels() != 1 {
        return Err(Error::invalid("masks must have one channel"));
    }
    let plan = WarpPlan::new(field, mask, tile_size, Interpolation::Nearest, 0)?;
    warp_image_tiled(&plan, path, num_levels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtreSummary {
    pub values: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Distances between corresponding points divided by `diag`.
pub fn compute_rtre(warped: &LandmarkSet, target: &LandmarkSet, diag: f64) -> Result<RtreSummary> {
    if warped.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} warped points against {} targets",
            warped.len(),
            target.len()
        )));
    }
    if !(diag > 0.0 && diag.is_finite()) {
        return Err(Error::invalid(format!("diagonal {diag} must be > 0")));
    }
    let values: Vec<f64> = warped
        .points
        .iter()
        .zip(&target.points)
        .map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1) / diag)
        .collect();
    let n = values.len().max(1) as f64;
    Ok(RtreSummary {
        median: median(&values),
        mean: values.iter().sum::<f64>() / n,
        max: values.iter().copied().fold(0.0, f64::max),
        values,
    })
}

pub fn read_landmarks_csv(path: impl AsRef<Path>, frame: Frame) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = rdr.headers().map_err(csv_error)?;
    if headers.iter().collect::<Vec<_>>() != ["x", "y"] {
        return Err(Error::format(
            "landmark CSV",
            format!("{}: header must be exactly `x,y`", path.display()),
        ));
    }
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let coord = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format("landmark CSV", format!("bad value on data line {}", line + 1)))
        };
        points.push((coord(0)?, coord(1)?));
    }
    LandmarkSet::new(points, frame)
}

pub fn write_landmarks_csv(path: impl AsRef<Path>, pts: &LandmarkSet, converged: Option<&[bool]>) -> Result<()> {
    let flags = converged.filter(|c| c.iter().any(|&ok| !ok));
    if let Some(c) = flags {
        if c.len() != pts.len() {
            return Err(Error::DimensionMismatch("one convergence flag per point".into()));
        }
    }
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    match flags {
        Some(c) => {
            w.write_record(["x", "y", "converged"]).map_err(csv_error)?;
            for (p, &ok) in pts.points.iter().zip(c) {
                w.write_record([p.0.to_string(), p.1.to_string(), u8::from(ok).to_string()])
                    .map_err(csv_error)?;
            }
        }
        None => {
            w.write_record(["x", "y"]).map_err(csv_error)?;
            for p in &pts.points {
                w.write_record([p.0.to_string(), p.1.to_string()]).map_err(csv_error)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::format("landmark CSV", format!("{other:?}")),
        }
    } else {
        Error::format("landmark CSV", e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid_io::Raster;

    fn set(points: &[(f64, f64)], frame: Frame) -> LandmarkSet {
        LandmarkSet::new(points.to_vec(), frame).unwrap()
    }

    #[test]
    fn zero_field_is_identity_both_ways() {
        let f = DisplacementField::zeros(10, 10, 100, 100).unwrap();
        let pts = [(1.5, 2.0), (50.0, 99.0), (-3.0, 7.0)];
        let a = transform_points(&set(&pts, Frame::Fixed), &f, Direction::FixedToMoving).unwrap();
        assert_eq!(a.points.points(), &pts);
        let b = transform_points(&set(&pts, Frame::Moving), &f, Direction::MovingToFixed).unwrap();
        assert_eq!(b.points.points(), &pts);
    }

    #[test]
    fn constant_translation() {
        let f = DisplacementField::from_fn(10, 10, 100, 100, |_, _| (5.0, 0.0)).unwrap();
        let a = transform_points(&set(&[(10.0, 10.0)], Frame::Fixed), &f, Direction::FixedToMoving).unwrap();
        assert_eq!(a.points.points(), &[(15.0, 10.0)]);
        let b = transform_points(&set(&[(15.0, 10.0)], Frame::Moving), &f, Direction::MovingToFixed).unwrap();
        assert_eq!(b.points.points(), &[(10.0, 10.0)]);
        assert_eq!(b.non_converged(), 0);
    }

    #[test]
    fn round_trip_on_smooth_field() {
        let f = DisplacementField::from_fn(30, 30, 300, 300, |x, y| {
            (4.0 * (x / 40.0).sin(), 3.0 * (y / 55.0 + x / 80.0).cos())
        })
        .unwrap();
        let pts: Vec<(f64, f64)> = (0..25).map(|k| (12.0 * k as f64 + 3.7, 290.0 - 11.0 * k as f64)).collect();
        let there = transform_points(&set(&pts, Frame::Fixed), &f, Direction::FixedToMoving).unwrap();
        let back = transform_points(&there.points, &f, Direction::MovingToFixed).unwrap();
        for (a, b) in pts.iter().zip(back.points.points()) {
            assert!((a.0 - b.0).hypot(a.1 - b.1) < 0.1);
        }
    }

    #[test]
    fn frame_mismatch_rejected() {
        let f = DisplacementField::zeros(4, 4, 8, 8).unwrap();
        assert!(transform_points(&set(&[(1.0, 1.0)], Frame::Moving), &f, Direction::FixedToMoving).is_err());
        assert!(LandmarkSet::new(vec![(f64::NAN, 0.0)], Frame::Fixed).is_err());
    }

    #[test]
    fn rtre_arithmetic() {
        let a = set(&[(0.0, 0.0), (30.0, 40.0)], Frame::Fixed);
        let b = set(&[(0.0, 0.0), (0.0, 0.0)], Frame::Fixed);
        let r = compute_rtre(&a, &b, 5000.0).unwrap();
        assert_eq!(r.values, vec![0.0, 0.01]);
        assert_eq!(r.median, 0.005);
        assert_eq!(r.max, 0.01);
        assert!(compute_rtre(&a, &set(&[(0.0, 0.0)], Frame::Fixed), 1.0).is_err());
        assert!(compute_rtre(&a, &b, 0.0).is_err());
        let same = compute_rtre(&a, &a, 10.0).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rtre_rigid_invariance() {
        let a = [(3.0, 4.0), (10.0, -2.0), (7.5, 7.5)];
        let b = [(4.0, 4.0), (9.0, -1.0), (7.0, 9.0)];
        let (s, c) = 0.6f64.sin_cos();
        let mv = |p: &(f64, f64)| (c * p.0 - s * p.1 + 11.0, s * p.0 + c * p.1 - 4.0);
        let r1 = compute_rtre(&set(&a, Frame::Fixed), &set(&b, Frame::Fixed), 100.0).unwrap();
        let a2: Vec<_> = a.iter().map(mv).collect();
        let b2: Vec<_> = b.iter().map(mv).collect();
        let r2 = compute_rtre(&set(&a2, Frame::Fixed), &set(&b2, Frame::Fixed), 100.0).unwrap();
        for (x, y) in r1.values.iter().zip(&r2.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        let pts = set(&[(1.25, -3.5), (1e6, 0.1)], Frame::Fixed);
        write_landmarks_csv(&p, &pts, Some(&[true, true])).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("x,y\n"));
        assert_eq!(read_landmarks_csv(&p, Frame::Fixed).unwrap(), pts);
        write_landmarks_csv(&p, &pts, Some(&[true, false])).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x,y,converged\n"));
        assert!(text.contains(",0\n"));
        std::fs::write(&p, "X,Y\n1,2\n").unwrap();
        assert!(read_landmarks_csv(&p, Frame::Fixed).is_err());
        std::fs::write(&p, "x,y\n1,abc\n").unwrap();
        assert!(read_landmarks_csv(&p, Frame::Fixed).is_err());
    }

    #[test]
    fn mask_warp_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Raster::from_fn(64, 48, |x, y| [0u8, 3, 7][(x / 9 + y / 13) % 3]);
        let img = PyramidImage::from_raster_tiled(mask.clone(), 16);
        let id = DisplacementField::zeros(32, 24, 64, 48).unwrap();
        let out = dir.path().join("id.tif");
        warp_mask(&img, &id, &out, 16, 1).unwrap();
        assert_eq!(crate::load_image(&out).unwrap().read_level(0).unwrap(), mask);

        let f = DisplacementField::from_fn(32, 24, 64, 48, |x, y| (0.2 * y - 4.3, 0.1 * x + 1.7)).unwrap();
        warp_mask(&img, &f, &out, 16, 2).unwrap();
        let warped = crate::load_image(&out).unwrap().read_level(0).unwrap();
        assert!(warped.data().iter().all(|v| [0, 3, 7].contains(v)));

        let t = DisplacementField::from_fn(32, 24, 64, 48, |_, _| (5.0, -2.0)).unwrap();
        warp_mask(&img, &t, &out, 16, 1).unwrap();
        let shifted = crate::load_image(&out).unwrap().read_level(0).unwrap();
        for y in 2..48 {
            for x in 0..59 {
                assert_eq!(shifted.get(x, y, 0), mask.get(x + 5, y - 2, 0));
            }
        }
    }
}
