use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initial_alignment::InitialParams;
use crate::nonrigid::{LevelSchedule, NonrigidParams};
use crate::preprocessing::PreprocessParams;
use crate::warping::Interpolation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Relative paths resolve against the run's output directory.
    pub warped_path: PathBuf,
    pub field_path: PathBuf,
    pub report_path: PathBuf,
    /// Checkerboard of fixed and warped moving at preprocessing scale.
    pub qc_path: Option<PathBuf>,
    /// Writes `refine_trace.csv` and `nonrigid_trace.csv` when set.
    pub traces: bool,
    pub save_levels: usize,
    pub tile_size: usize,
    pub interpolation: Interpolation,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            warped_path: "warped.tif".into(),
            field_path: "field.dhdf".into(),
            report_path: "report.json".into(),
            qc_path: Some("qc_checkerboard.png".into()),
            traces: false,
            save_levels: 4,
            tile_size: 512,
            interpolation: Interpolation::Bilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub fixed: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub preprocessing: PreprocessParams,
    pub initial_alignment: InitialParams,
    pub nonrigid: NonrigidParams,
    pub output: OutputConfig,
    /// Recorded for reproducibility; every stage is deterministic.
    pub seed: u64,
}

/// Parses and validates a JSON config. Absent keys take their defaults;
/// unknown keys and out-of-range values are rejected with their key path.
pub fn parse_config(text: &str) -> Result<RegistrationConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RegistrationConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let path = if path == "." || inner.is_syntax() || inner.is_eof() {
            "<document>".to_string()
        } else {
            path
        };
        Error::config(path, inner)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn check(ok: bool, path: &str, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message()))
    }
}

impl RegistrationConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocessing;
        check(p.target_long_side >= 64, "preprocessing.target_long_side", || {
            format!("{} is below the minimum of 64", p.target_long_side)
        })?;
        check(
            (0.0..100.0).contains(&p.percentile_low),
            "preprocessing.percentile_low",
            || format!("{} is outside [0, 100)", p.percentile_low),
        )?;
        check(
            p.percentile_high > p.percentile_low && p.percentile_high <= 100.0,
            "preprocessing.percentile_high",
            || format!("{} must exceed percentile_low and be at most 100", p.percentile_high),
        )?;

        let a = &self.initial_alignment;
        check(
            a.angle_step_deg > 0.0 && a.angle_step_deg <= 90.0,
            "initial_alignment.angle_step_deg",
            || format!("{} is outside (0, 90]", a.angle_step_deg),
        )?;
        check(a.search_long_side >= 32, "initial_alignment.search_long_side", || {
            format!("{} is below the minimum of 32", a.search_long_side)
        })?;
        check(a.working_long_side >= 32, "initial_alignment.working_long_side", || {
            format!("{} is below the minimum of 32", a.working_long_side)
        })?;

        let n = &self.nonrigid;
        check(n.step.is_finite() && n.step > 0.0, "nonrigid.step", || {
            format!("{} must be > 0", n.step)
        })?;
        check(n.sigma.is_finite() && n.sigma >= 0.0, "nonrigid.sigma", || {
            format!("{} must be >= 0", n.sigma)
        })?;
        check(n.registration_long_side >= 64, "nonrigid.registration_long_side", || {
            format!("{} is below the minimum of 64", n.registration_long_side)
        })?;
        check(
            n.iterations.len() == n.levels.len(),
            "nonrigid.iterations",
            || format!("{} entries for {} levels", n.iterations.len(), n.levels.len()),
        )?;
        LevelSchedule::from_params(n).map_err(|e| Error::config("nonrigid.levels", e))?;

        let o = &self.output;
        check((1..=16).contains(&o.save_levels), "output.save_levels", || {
            format!("{} is outside [1, 16]", o.save_levels)
        })?;
        check(o.tile_size > 0 && o.tile_size % 16 == 0, "output.tile_size", || {
            format!("{} is not a positive multiple of 16", o.tile_size)
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(text: &str) -> String {
        match parse_config(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, RegistrationConfig::default());
        assert_eq!(cfg.nonrigid.levels, vec![4, 2, 1]);
        assert_eq!(cfg.output.tile_size, 512);
        assert_eq!(cfg.preprocessing.fill, 255);
    }

    #[test]
    fn negative_step_names_its_path() {
        assert_eq!(path_of(r#"{"nonrigid": {"step": -1}}"#), "nonrigid.step");
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        assert_eq!(path_of(r#"{"nonrigid": {"stepp": 1}}"#), "nonrigid.stepp");
        assert_eq!(path_of(r#"{"output": {"tile_size": "big"}}"#), "output.tile_size");
        assert_eq!(path_of(r#"{"output": {"interpolation": "cubic"}}"#), "output.interpolation");
        assert_eq!(path_of(r#"{"nonrigid": {"levels": [2, 4, 1]}}"#), "nonrigid.levels");
        assert_eq!(path_of(r#"{"output": {"tile_size": 100}}"#), "output.tile_size");
        assert_eq!(path_of(r#"{"initial_alignment": {"angle_step_deg": 0}}"#), "initial_alignment.angle_step_deg");
        assert_eq!(path_of(r#"{"seed": 1,"#), "<document>");
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = parse_config(
            r#"{"fixed": "a.tif", "nonrigid": {"levels": [8, 2, 1], "iterations": [5, 5, 5], "sigma": 1.5},
                "output": {"interpolation": "nearest", "qc_path": null}, "seed": 9}"#,
        )
        .unwrap();
        let again = parse_config(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.output.qc_path, None);
    }
}
