use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::Raster;
use crate::error::{Error, Result};

/// Decodes an 8-bit grayscale or RGB PNG.
pub fn load_png(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format("PNG", e))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported(format!(
            "PNG bit depth {:?} in {} (only 8-bit)",
            info.bit_depth,
            path.display()
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Unsupported(format!(
                "PNG color type {other:?} in {} (only gray or RGB)",
                path.display()
            )))
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("PNG", e))?;
    buf.truncate(frame.buffer_size());
    let stride = width * channels;
    if frame.line_size != stride {
        let mut packed = Vec::with_capacity(stride * height);
        for row in buf.chunks(frame.line_size).take(height) {
            packed.extend_from_slice(&row[..stride]);
        }
        buf = packed;
    }
    Raster::new(width, height, channels, buf)
}

pub fn save_png(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, raster.width() as u32, raster.height() as u32);
    encoder.set_color(if raster.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format("PNG", e))?;
    writer
        .write_image_data(raster.data())
        .map_err(|e| Error::format("PNG", e))?;
    writer.finish().map_err(|e| Error::format("PNG", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid_io::load_image;

    #[test]
    fn png_round_trip_yields_single_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let r = Raster::new(
            512,
            512,
            3,
            (0..512 * 512 * 3).map(|i| (i % 251) as u8).collect(),
        )
        .unwrap();
        save_png(&r, &path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.num_levels(), 1);
        assert_eq!((img.width(), img.height(), img.channels()), (512, 512, 3));
        assert_eq!(img.read_level(0).unwrap(), r);
    }
}
