use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RegistrationConfig;
use super::qc::render_checkerboard;
use super::report::{
    Failure, FieldSummary, InitialSummary, NonrigidSummary, PreprocessSummary, RunReport, Stage, StageTiming,
    WarpSummary,
};
use crate::error::{Error, Result};
use crate::initial_alignment::{run_initial, AffineTransform};
use crate::nonrigid::{run_nonrigid, LevelSchedule};
use crate::preprocessing::{preprocess_pair_with, PreprocessParams, PreprocessedPair};
use crate::pyramid_io::{load_image, save_png, Raster};
use crate::similarity::bilinear_axis;
use crate::warping::{
    compose_affine_with_field, uniform_grid_for, warp_image_tiled, write_dhdf, DisplacementField, WarpPlan,
};

/// A failed run: the stage that failed, the cause, and the partial report
/// (already written to disk when possible).
#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub error: Error,
    pub report: Box<RunReport>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

struct Run<'a> {
    cfg: &'a RegistrationConfig,
    out_dir: &'a Path,
    report: RunReport,
}

type Staged<T> = std::result::Result<T, (Stage, Error)>;

impl Run<'_> {
    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Staged<T> {
        let t = Instant::now();
        let out = f(self);
        self.report.timings.push(StageTiming {
            stage,
            seconds: t.elapsed().as_secs_f64(),
        });
        out.map_err(|e| (stage, e))
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve(self.out_dir, p)
    }

    fn execute(&mut self) -> Staged<()> {
        let cfg = self.cfg;
        self.stage(Stage::Config, |_| {
            cfg.validate()?;
            if cfg.fixed.is_none() {
                return Err(Error::config("fixed", "no fixed image path given"));
            }
            if cfg.moving.is_none() {
                return Err(Error::config("moving", "no moving image path given"));
            }
            Ok(())
        })?;

        let fill = cfg.preprocessing.fill;
        let (fixed, moving) = self.stage(Stage::Load, |_| {
            let fixed = load_image(cfg.fixed.as_ref().unwrap())?.with_fill(fill);
            let moving = load_image(cfg.moving.as_ref().unwrap())?.with_fill(fill);
            Ok((fixed, moving))
        })?;

        let pair = self.stage(Stage::Preprocess, |run| {
            let pair = preprocess_pair_with(&fixed, &moving, &cfg.preprocessing)?;
            run.report.preprocess = Some(PreprocessSummary {
                scale: pair.scale,
                dims: pair.dims(),
                fixed_degenerate: pair.fixed_degenerate,
                moving_degenerate: pair.moving_degenerate,
            });
            if pair.fixed_degenerate || pair.moving_degenerate {
                run.report.warnings.push("an input image has constant intensity".into());
            }
            Ok(pair)
        })?;

        let affine = self.stage(Stage::InitialAlignment, |run| {
            if !cfg.initial_alignment.enabled {
                return Ok(AffineTransform::identity());
            }
            let r = run_initial(&pair, &cfg.initial_alignment)?;
            if r.low_confidence {
                run.report.warnings.push(format!(
                    "initial alignment has low confidence (search ncc {:.4}); using centroid translation",
                    r.search.score
                ));
            }
            if cfg.output.traces {
                let rows = r.refine_trace.iter().enumerate().map(|(i, c)| vec![i.to_string(), c.to_string()]);
                write_csv(&run.path(Path::new("refine_trace.csv")), &["iteration", "cost"], rows)?;
            }
            run.report.initial_alignment = Some(InitialSummary {
                matrix: r.transform,
                search_angle_deg: r.search.angle_deg,
                search_ncc: r.search.score,
                final_ncc: r.refine_trace.last().map_or(r.search.score, |c| -c),
                refine_iterations: r.refine_trace.len().saturating_sub(1),
                low_confidence: r.low_confidence,
                refine_trace: r.refine_trace,
            });
            Ok(r.transform)
        })?;

        let (l0w, l0h) = (fixed.width(), fixed.height());
        let field = self.stage(Stage::Nonrigid, |run| {
            let n = &cfg.nonrigid;
            if !n.enabled {
                let (gw, gh) = uniform_grid_for(l0w, l0h, pair.scale)?;
                return DisplacementField::zeros(gw, gh, l0w, l0h);
            }
            let long = l0w.max(l0h).max(moving.width()).max(moving.height());
            let target = n.registration_long_side.min(long).max(64);
            let reg_pair;
            let reg = if target == cfg.preprocessing.target_long_side {
                &pair
            } else {
                let params = PreprocessParams {
                    target_long_side: target,
                    ..cfg.preprocessing
                };
                reg_pair = preprocess_pair_with(&fixed, &moving, &params)?;
                &reg_pair
            };
            let schedule = LevelSchedule::from_params(n)?;
            let r = run_nonrigid(reg, &affine, &schedule)?;
            if cfg.output.traces {
                let rows = r.trace.iter().flat_map(|lt| {
                    lt.costs
                        .iter()
                        .enumerate()
                        .map(move |(i, c)| vec![lt.factor.to_string(), i.to_string(), c.to_string()])
                });
                write_csv(
                    &run.path(Path::new("nonrigid_trace.csv")),
                    &["level", "iteration", "data_cost"],
                    rows,
                )?;
            }
            run.report.nonrigid = Some(NonrigidSummary {
                scale: reg.scale,
                final_data_cost: r.trace.last().and_then(|t| t.costs.last().copied()),
                max_displacement: r.field.max_magnitude(),
                levels: r.trace,
            });
            Ok(r.field)
        })?;

        let total = self.stage(Stage::Compose, |_| {
            // Warping uses the stored precision so the saved field reproduces
            // the warped output exactly.
            Ok(compose_affine_with_field(&affine, &field)?.quantized())
        })?;
        drop(field);

        self.stage(Stage::SaveField, |run| {
            let path = run.path(&cfg.output.field_path);
            write_dhdf(&total, &path)?;
            run.report.field = Some(FieldSummary {
                path: path.display().to_string(),
                grid: total.grid_dims(),
                level0: total.level0_dims(),
                max_displacement: total.max_magnitude(),
            });
            Ok(())
        })?;

        self.stage(Stage::Warp, |run| {
            let path = run.path(&cfg.output.warped_path);
            let plan = WarpPlan::new(&total, &moving, cfg.output.tile_size, cfg.output.interpolation, fill)?;
            let stats = warp_image_tiled(&plan, &path, cfg.output.save_levels)?;
            run.report.warp = Some(WarpSummary {
                path: path.display().to_string(),
                levels: cfg.output.save_levels,
                stats,
            });
            Ok(())
        })?;

        if let Some(qc) = &cfg.output.qc_path {
            self.stage(Stage::Qc, |run| {
                let path = run.path(qc);
                let warped = warp_at_pair_scale(&pair, &total);
                let cell = (pair.dims().0.max(pair.dims().1) / 8).max(1);
                save_png(&render_checkerboard(&pair.fixed, &warped, cell)?, &path)?;
                run.report.qc_path = Some(path.display().to_string());
                Ok(())
            })?;
        }
        Ok(())
    }
}

/// The preprocessed moving raster pulled through `total` onto the
/// preprocessed fixed grid.
fn warp_at_pair_scale(pair: &PreprocessedPair, total: &DisplacementField) -> Raster {
    let (w, h) = pair.dims();
    let m = &pair.moving;
    let s = pair.scale;
    Raster::from_fn(w, h, |x, y| {
        let (qx, qy) = (x as f64 * s, y as f64 * s);
        let (dx, dy) = total.sample(qx, qy);
        let (mx, my) = ((qx + dx) / s, (qy + dy) / s);
        if !(mx >= 0.0 && my >= 0.0 && mx <= (w - 1) as f64 && my <= (h - 1) as f64) {
            return 0;
        }
        let (i0, i1, fx) = bilinear_axis(mx, w);
        let (j0, j1, fy) = bilinear_axis(my, h);
        let g = |i: usize, j: usize| m.get(i, j, 0) as f64;
        let top = (1.0 - fx) * g(i0, j0) + fx * g(i1, j0);
        let bot = (1.0 - fx) * g(i0, j1) + fx * g(i1, j1);
        ((1.0 - fy) * top + fy * bot).round() as u8
    })
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let to_err = |e: csv::Error| Error::format("trace CSV", e);
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(&r).map_err(to_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs load, preprocessing, both registration stages, composition, field
/// export, tiled warping and QC, writing artifacts under `out_dir`.
///
/// The report is written to `output.report_path` whether or not the run
/// succeeds.
pub fn run_pipeline(cfg: &RegistrationConfig, out_dir: &Path) -> std::result::Result<RunReport, PipelineError> {
    let report_path = resolve(out_dir, &cfg.output.report_path);
    let mut run = Run {
        cfg,
        out_dir,
        report: RunReport::new(cfg.clone()),
    };
    let outcome = std::fs::create_dir_all(out_dir)
        .map_err(|e| (Stage::Config, Error::Io(e)))
        .and_then(|_| run.execute());
    let mut report = run.report;
    match outcome {
        Ok(()) => {
            report.status = "ok";
            match report.write(&report_path) {
                Ok(()) => Ok(report),
                Err(error) => Err(PipelineError {
                    stage: Stage::Report,
                    error,
                    report: Box::new(report),
                }),
            }
        }
        Err((stage, error)) => {
            report.status = "failed";
            report.failure = Some(Failure {
                stage,
                message: error.to_string(),
            });
            if let Err(e) = report.write(&report_path) {
                log::warn!("could not write {}: {e}", report_path.display());
            }
            Err(PipelineError {
                stage,
                error,
                report: Box::new(report),
            })
        }
    }
}
