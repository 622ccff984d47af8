use std::fmt;

use crate::error::{Error, Result};
use crate::similarity::bilinear_axis;

/// Dense backward displacement field over the fixed image.
///
/// Node `(i, j)` sits at level-0 coordinate `(i * s, j * s)` with
/// `s = level0_width / grid_width`; it stores `u` such that a fixed-image
/// point `x` maps to the moving-image point `x + u(x)`. Displacements are in
/// level-0 pixels regardless of grid resolution.
#[derive(Clone, PartialEq)]
pub struct DisplacementField {
    grid_width: usize,
    grid_height: usize,
    level0_width: usize,
    level0_height: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DisplacementField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisplacementField")
            .field("grid", &(self.grid_width, self.grid_height))
            .field("level0", &(self.level0_width, self.level0_height))
            .finish_non_exhaustive()
    }
}

/// Maximum relative disagreement between the horizontal and vertical node spacing.
pub const SPACING_TOLERANCE: f64 = 1e-3;

impl DisplacementField {
    /// `data` holds interleaved (dx, dy) pairs, row-major.
    pub fn new(
        grid_width: usize,
        grid_height: usize,
        level0_width: usize,
        level0_height: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if grid_width < 2 || grid_height < 2 {
            return Err(Error::invalid(format!(
                "field grid {grid_width}x{grid_height} is smaller than 2x2"
            )));
        }
        if level0_width < grid_width || level0_height < grid_height {
            return Err(Error::invalid(format!(
                "field domain {level0_width}x{level0_height} is smaller than its grid \
                 {grid_width}x{grid_height}"
            )));
        }
        let sx = level0_width as f64 / grid_width as f64;
        let sy = level0_height as f64 / grid_height as f64;
        if (sx - sy).abs() > SPACING_TOLERANCE * sx {
            return Err(Error::invalid(format!(
                "non-uniform field spacing: {sx} horizontally, {sy} vertically"
            )));
        }
        if data.len() != grid_width * grid_height * 2 {
            return Err(Error::DimensionMismatch(format!(
                "field {grid_width}x{grid_height} needs {} components, got {}",
                grid_width * grid_height * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("displacement field has non-finite entries".into()));
        }
        Ok(Self {
            grid_width,
            grid_height,
            level0_width,
            level0_height,
            data,
        })
    }

    pub fn zeros(
        grid_width: usize,
        grid_height: usize,
        level0_width: usize,
        level0_height: usize,
    ) -> Result<Self> {
        Self::new(
            grid_width,
            grid_height,
            level0_width,
            level0_height,
            vec![0.0; grid_width * grid_height * 2],
        )
    }

    /// Evaluates `f` at every node's level-0 position.
    pub fn from_fn(
        grid_width: usize,
        grid_height: usize,
        level0_width: usize,
        level0_height: usize,
        mut f: impl FnMut(f64, f64) -> (f64, f64),
    ) -> Result<Self> {
        let s = level0_width as f64 / grid_width.max(1) as f64;
        let mut data = Vec::with_capacity(grid_width * grid_height * 2);
        for j in 0..grid_height {
            for i in 0..grid_width {
                let (dx, dy) = f(i as f64 * s, j as f64 * s);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(grid_width, grid_height, level0_width, level0_height, data)
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_width, self.grid_height)
    }

    pub fn level0_dims(&self) -> (usize, usize) {
        (self.level0_width, self.level0_height)
    }

    /// Level-0 pixels between neighbouring nodes.
    pub fn spacing(&self) -> f64 {
        self.level0_width as f64 / self.grid_width as f64
    }

    /// Level-0 position of node `(i, j)`.
    pub fn node_position(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.spacing();
        (i as f64 * s, j as f64 * s)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        let k = 2 * (j * self.grid_width + i);
        (self.data[k], self.data[k + 1])
    }

    pub fn set_node(&mut self, i: usize, j: usize, v: (f64, f64)) {
        let k = 2 * (j * self.grid_width + i);
        self.data[k] = v.0;
        self.data[k + 1] = v.1;
    }

    pub fn components(&self) -> &[f64] {
        &self.data
    }

    /// Bilinear interpolation at level-0 point (x, y), clamped to the grid.
    ///
    /// With `gx = x / s`, `i0 = floor(gx)` (kept inside the grid) and
    /// `fx = gx - i0`, each component is
    /// `(1 - fy) * ((1 - fx) * u00 + fx * u10) + fy * ((1 - fx) * u01 + fx * u11)`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let inv = 1.0 / self.spacing();
        self.sample_grid(x * inv, y * inv)
    }

    #[inline]
    pub(crate) fn sample_grid(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (i0, i1, fx) = bilinear_axis(gx, self.grid_width);
        let (j0, j1, fy) = bilinear_axis(gy, self.grid_height);
        let w = self.grid_width;
        let d = &self.data;
        let (a, b) = (2 * (j0 * w + i0), 2 * (j0 * w + i1));
        let (c, e) = (2 * (j1 * w + i0), 2 * (j1 * w + i1));
        let top_x = (1.0 - fx) * d[a] + fx * d[b];
        let top_y = (1.0 - fx) * d[a + 1] + fx * d[b + 1];
        let bot_x = (1.0 - fx) * d[c] + fx * d[e];
        let bot_y = (1.0 - fx) * d[c + 1] + fx * d[e + 1];
        ((1.0 - fy) * top_x + fy * bot_x, (1.0 - fy) * top_y + fy * bot_y)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks_exact(2)
            .map(|p| p[0].hypot(p[1]))
            .fold(0.0, f64::max)
    }

    /// Rounds every component through `f32`, as stored on disk.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = *v as f32 as f64;
        }
        out
    }
}

/// Free-function form of [`DisplacementField::sample`].
pub fn sample_displacement(f: &DisplacementField, x: f64, y: f64) -> (f64, f64) {
    f.sample(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_field_samples_zero() {
        let f = DisplacementField::zeros(5, 4, 50, 40).unwrap();
        assert_eq!(f.sample(13.7, -40.0), (0.0, 0.0));
    }

    #[test]
    fn constant_field_samples_constant() {
        let f = DisplacementField::from_fn(6, 6, 60, 60, |_, _| (5.0, -2.0)).unwrap();
        for &(x, y) in &[(0.0, 0.0), (13.3, 27.9), (59.0, 59.0), (-5.0, 1e6)] {
            let (dx, dy) = f.sample(x, y);
            assert!((dx - 5.0).abs() < 1e-12 && (dy + 2.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn node_aligned_queries_are_exact(vals in proptest::collection::vec(-50.0f64..50.0, 2 * 7 * 5), i in 0usize..7, j in 0usize..5) {
            let f = DisplacementField::new(7, 5, 21, 15, vals).unwrap();
            let (x, y) = f.node_position(i, j);
            prop_assert_eq!(f.sample(x, y), f.node(i, j));
        }
    }

    #[test]
    fn construction_invariants() {
        assert!(DisplacementField::zeros(1, 4, 10, 40).is_err());
        assert!(DisplacementField::zeros(4, 4, 3, 40).is_err());
        assert!(DisplacementField::zeros(4, 4, 40, 44).is_err());
        assert!(DisplacementField::zeros(4, 4, 40, 40).is_ok());
        assert!(DisplacementField::new(2, 2, 2, 2, vec![0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(DisplacementField::new(2, 2, 2, 2, vec![0.0; 7]).is_err());
    }
}
