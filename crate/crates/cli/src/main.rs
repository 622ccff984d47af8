use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slidereg::annotations::{compute_rtre, read_landmarks_csv, transform_points, write_landmarks_csv, Direction, Frame};
use slidereg::pipeline::{generate_synthetic_pair, parse_config, run_pipeline, SynthParams};
use slidereg::preprocessing::{gray_at_scale, normalize_intensity};
use slidereg::pyramid_io::save_png;
use slidereg::warping::{read_dhdf, warp_image_tiled, Interpolation, WarpPlan};
use slidereg::{load_image, Error, ErrorClass};

#[derive(Parser)]
#[command(name = "slidereg", version, about = "Whole-slide image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving slide onto a fixed slide.
    Register {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fixed: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Apply a saved displacement field to an image.
    Warp {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "bilinear")]
        interp: Interpolation,
        #[arg(long, default_value_t = 512)]
        tile: usize,
        #[arg(long, default_value_t = 255)]
        fill: u8,
        /// Pyramid levels in the output TIFF.
        #[arg(long, default_value_t = 4)]
        levels: usize,
    },
    /// Map landmark coordinates through a saved field.
    TransformPoints {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        output: PathBuf,
    },
    /// Relative landmark error between two point sets.
    Evaluate {
        #[arg(long)]
        warped_points: PathBuf,
        #[arg(long)]
        target_points: PathBuf,
        /// Image diagonal in pixels.
        #[arg(long)]
        diag: f64,
    },
    /// Write a synthetic slide pair with ground truth.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2048)]
        size: usize,
        #[arg(long, default_value_t = 30.0)]
        max_deform: f64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 512)]
        tile: usize,
    },
    /// Grayscale, normalized, downsampled rendition of a slide.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1024)]
        long_side: usize,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config | ErrorClass::Usage => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numerical => 4,
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(Error::Io)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Register {
            config,
            fixed,
            moving,
            out_dir,
        } => {
            let mut cfg = parse_config(&read_text(&config)?)?;
            if fixed.is_some() {
                cfg.fixed = fixed;
            }
            if moving.is_some() {
                cfg.moving = moving;
            }
            match run_pipeline(&cfg, &out_dir) {
                Ok(report) => {
                    for w in &report.warnings {
                        log::warn!("{w}");
                    }
                    let total: f64 = report.timings.iter().map(|t| t.seconds).sum();
                    println!("registration finished in {total:.1} s, outputs in {}", out_dir.display());
                    Ok(())
                }
                Err(e) => {
                    log::error!("{e}");
                    Err(e.error)
                }
            }
        }
        Command::Warp {
            field,
            input,
            output,
            interp,
            tile,
            fill,
            levels,
        } => {
            let field = read_dhdf(&field)?;
            let image = load_image(&input)?.with_fill(fill);
            let plan = WarpPlan::new(&field, &image, tile, interp, fill)?;
            let stats = warp_image_tiled(&plan, &output, levels)?;
            println!("wrote {} ({} tiles, {} bytes)", output.display(), stats.tiles, stats.bytes_written);
            Ok(())
        }
        Command::TransformPoints {
            field,
            points,
            direction,
            output,
        } => {
            let field = read_dhdf(&field)?;
            let pts = read_landmarks_csv(&points, direction.source_frame())?;
            let out = transform_points(&pts, &field, direction)?;
            let n = out.non_converged();
            if n > 0 {
                log::warn!("{n} points did not converge during inversion");
            }
            let flags = (n > 0).then_some(out.converged.as_slice());
            write_landmarks_csv(&output, &out.points, flags)?;
            Ok(())
        }
        Command::Evaluate {
            warped_points,
            target_points,
            diag,
        } => {
            let warped = read_landmarks_csv(&warped_points, Frame::Moving)?;
            let target = read_landmarks_csv(&target_points, Frame::Moving)?;
            let summary = compute_rtre(&warped, &target, diag)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
        Command::Synth {
            seed,
            size,
            max_deform,
            out_dir,
            tile,
        } => {
            let params = SynthParams {
                seed,
                size,
                max_deform,
                ..SynthParams::default()
            };
            let pair = generate_synthetic_pair(&params)?;
            let files = pair.write(&out_dir, tile)?;
            println!("{}", serde_json::to_string_pretty(&files).expect("paths serialize"));
            Ok(())
        }
        Command::Preprocess {
            input,
            output,
            long_side,
        } => {
            if long_side == 0 {
                return Err(Error::InvalidArgument("long side must be > 0".into()));
            }
            let image = load_image(&input)?;
            let scale = (image.width().max(image.height()) as f64 / long_side as f64).max(1.0);
            let gray = gray_at_scale(&image, scale)?;
            let norm = normalize_intensity(&gray)?;
            if norm.degenerate {
                log::warn!("{} has constant intensity", input.display());
            }
            save_png(&norm.raster, &output)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
