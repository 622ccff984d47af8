//! Displacement-field file format.
//!
//! Layout (little-endian): magic `DHDF`, u32 version, u64 level-0 width and
//! height, u32 grid width and height, then `grid_height * grid_width`
//! (dx, dy) f32 pairs in row-major order. Version 1 stores backward fields.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DisplacementField;
use crate::error::{Error, Result};

pub const DHDF_MAGIC: &[u8; 4] = b"DHDF";
pub const DHDF_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4 + 4;

/// Writes `f` with components rounded to f32.
pub fn write_dhdf(f: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    let (gw, gh) = f.grid_dims();
    let (w, h) = f.level0_dims();
    out.write_all(DHDF_MAGIC)?;
    out.write_all(&DHDF_VERSION.to_le_bytes())?;
    out.write_all(&(w as u64).to_le_bytes())?;
    out.write_all(&(h as u64).to_le_bytes())?;
    let gw32 = u32::try_from(gw).map_err(|_| Error::invalid("field grid too wide for DHDF"))?;
    let gh32 = u32::try_from(gh).map_err(|_| Error::invalid("field grid too tall for DHDF"))?;
    out.write_all(&gw32.to_le_bytes())?;
    out.write_all(&gh32.to_le_bytes())?;
    for &v in f.components() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dhdf(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::format("DHDF file", "truncated header"))?;
    if &header[0..4] != DHDF_MAGIC {
        return Err(Error::format("DHDF file", "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != DHDF_VERSION {
        return Err(Error::Unsupported(format!("DHDF version {version}")));
    }
    let (w, h) = (u64_at(8), u64_at(16));
    let (gw, gh) = (u32_at(24) as u64, u32_at(28) as u64);
    let expected = (HEADER_LEN as u64).checked_add(gw.saturating_mul(gh).saturating_mul(8));
    if expected != Some(file_len) {
        return Err(Error::format(
            "DHDF file",
            format!("{gw}x{gh} grid needs {expected:?} bytes, file has {file_len}"),
        ));
    }
    let n = (gw * gh * 2) as usize;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let as_usize = |v: u64| usize::try_from(v).map_err(|_| Error::format("DHDF file", "dimension overflow"));
    DisplacementField::new(as_usize(gw)?, as_usize(gh)?, as_usize(w)?, as_usize(h)?, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dhdf");
        let f = DisplacementField::from_fn(13, 9, 130, 90, |x, y| {
            ((x * 0.37).sin() * 20.0, (y * 0.11).cos() * -7.5)
        })
        .unwrap()
        .quantized();
        write_dhdf(&f, &path).unwrap();
        let g = read_dhdf(&path).unwrap();
        assert_eq!(g, f);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 13 * 9 * 8);
        assert_eq!(&bytes[..4], b"DHDF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 130);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 9);
        let first = f32::from_le_bytes(bytes[32..36].try_into().unwrap());
        assert_eq!(first as f64, f.node(0, 0).0);
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dhdf");
        std::fs::write(&path, b"DHDX").unwrap();
        assert!(read_dhdf(&path).is_err());
        let f = DisplacementField::zeros(4, 4, 8, 8).unwrap();
        write_dhdf(&f, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_dhdf(&path).is_err());
        bytes.push(0);
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dhdf(&path), Err(Error::Unsupported(_))));
    }
}
