use super::Raster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Filter {
    Bilinear,
    /// Box of width `1/factor` centred on the sample point, with fractional
    /// coverage weights.
    Area,
}

impl Filter {
    /// Bilinear down to half size, area averaging below that.
    pub(crate) fn for_step(source_per_output: f64) -> Self {
        if source_per_output < 2.0 {
            Filter::Bilinear
        } else {
            Filter::Area
        }
    }
}

/// Resamples by `factor`; output dimensions are `round(dims * factor)`.
///
/// Output pixel `i` samples source coordinate `i / factor`, so factor 1 is
/// an exact copy.
pub fn resample(r: &Raster, factor: f64) -> Result<Raster> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("resample factor {factor} must be > 0")));
    }
    let w = (r.width() as f64 * factor).round();
    let h = (r.height() as f64 * factor).round();
    if w < 1.0 || h < 1.0 {
        return Err(Error::invalid(format!(
            "resampling {}x{} by {factor} gives an empty image",
            r.width(),
            r.height()
        )));
    }
    let step = 1.0 / factor;
    Ok(resample_mapped(
        r,
        w as usize,
        h as usize,
        step,
        (0.0, 0.0),
        Filter::for_step(step),
    ))
}

/// Output pixel (i, j) takes the source value around
/// `(step * i + offset.0, step * j + offset.1)`.
pub(crate) fn resample_mapped(
    r: &Raster,
    out_w: usize,
    out_h: usize,
    step: f64,
    offset: (f64, f64),
    filter: Filter,
) -> Raster {
    let taps_x = axis_taps(r.width(), out_w, step, offset.0, filter);
    let taps_y = axis_taps(r.height(), out_h, step, offset.1, filter);
    let ch = r.channels();

    // Horizontal pass into f32, one row of the source at a time.
    let mut tmp = vec![0f32; out_w * r.height() * ch];
    for y in 0..r.height() {
        let src = r.row(y);
        let dst = &mut tmp[y * out_w * ch..(y + 1) * out_w * ch];
        for (i, taps) in taps_x.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0f64;
                for &(j, wgt) in taps {
                    acc += wgt * src[j * ch + c] as f64;
                }
                dst[i * ch + c] = acc as f32;
            }
        }
    }

    let mut out = vec![0u8; out_w * out_h * ch];
    for (j, taps) in taps_y.iter().enumerate() {
        let dst = &mut out[j * out_w * ch..(j + 1) * out_w * ch];
        for (k, d) in dst.iter_mut().enumerate() {
            let mut acc = 0f64;
            for &(row, wgt) in taps {
                acc += wgt * tmp[row * out_w * ch + k] as f64;
            }
            *d = acc.round().clamp(0.0, 255.0) as u8;
        }
    }
    Raster::new(out_w, out_h, ch, out).expect("resample output is well formed")
}

/// Per output index, the contributing source indices and normalized weights.
fn axis_taps(n_in: usize, n_out: usize, step: f64, offset: f64, filter: Filter) -> Vec<Vec<(usize, f64)>> {
    let last = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let c = step * i as f64 + offset;
            match filter {
                Filter::Bilinear => {
                    let p = c.clamp(0.0, last);
                    let i0 = p.floor() as usize;
                    let t = p - i0 as f64;
                    if t == 0.0 || i0 + 1 >= n_in {
                        vec![(i0, 1.0)]
                    } else {
                        vec![(i0, 1.0 - t), (i0 + 1, t)]
                    }
                }
                Filter::Area => {
                    let half = step * 0.5;
                    let (lo, hi) = (c - half, c + half);
                    let first = (lo + 0.5).floor().max(0.0) as usize;
                    let end = ((hi + 0.5).ceil().max(0.0) as usize).min(n_in);
                    let mut taps = Vec::with_capacity(end.saturating_sub(first) + 1);
                    let mut total = 0.0;
                    for j in first..end {
                        let cover = (hi.min(j as f64 + 0.5) - lo.max(j as f64 - 0.5)).max(0.0);
                        if cover > 0.0 {
                            taps.push((j, cover));
                            total += cover;
                        }
                    }
                    if taps.is_empty() {
                        let p = c.clamp(0.0, last).round() as usize;
                        return vec![(p, 1.0)];
                    }
                    for t in &mut taps {
                        t.1 /= total;
                    }
                    taps
                }
            }
        })
        .collect()
}
