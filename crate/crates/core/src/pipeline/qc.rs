use crate::error::{Error, Result};
use crate::pyramid_io::Raster;

/// Alternating `cell`x`cell` blocks, `a` in the top-left block.
pub fn render_checkerboard(a: &Raster, b: &Raster, cell: usize) -> Result<Raster> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::DimensionMismatch(format!(
            "checkerboard inputs {:?}x{} and {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    if cell == 0 {
        return Err(Error::invalid("checkerboard cell must be > 0"));
    }
    let ch = a.channels();
    let mut out = a.clone();
    for y in 0..a.height() {
        let src = b.row(y);
        let dst = out.row_mut(y);
        for x in 0..a.width() {
            if (x / cell + y / cell) % 2 == 1 {
                dst[x * ch..(x + 1) * ch].copy_from_slice(&src[x * ch..(x + 1) * ch]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_and_single_cell() {
        let a = Raster::from_fn(9, 7, |x, y| (x * 10 + y) as u8);
        let b = Raster::filled(9, 7, 1, 200);
        assert_eq!(render_checkerboard(&a, &a, 2).unwrap(), a);
        assert_eq!(render_checkerboard(&a, &b, 9).unwrap(), a);
    }

    #[test]
    fn two_by_two_pattern() {
        let a = Raster::filled(2, 2, 1, 1);
        let b = Raster::filled(2, 2, 1, 2);
        let out = render_checkerboard(&a, &b, 1).unwrap();
        assert_eq!(out.data(), &[1, 2, 2, 1]);
        assert!(render_checkerboard(&a, &Raster::filled(3, 2, 1, 0), 1).is_err());
    }
}
