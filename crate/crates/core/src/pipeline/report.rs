use std::fmt;
use std::path::Path;

use serde::Serialize;

use super::config::RegistrationConfig;
use crate::error::Result;
use crate::initial_alignment::AffineTransform;
use crate::nonrigid::LevelTrace;
use crate::warping::WarpStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Preprocess,
    InitialAlignment,
    Nonrigid,
    Compose,
    SaveField,
    Warp,
    Qc,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessSummary {
    pub scale: f64,
    pub dims: (usize, usize),
    pub fixed_degenerate: bool,
    pub moving_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialSummary {
    /// Level-0 backward affine.
    pub matrix: AffineTransform,
    pub search_angle_deg: f64,
    pub search_ncc: f64,
    pub final_ncc: f64,
    pub refine_iterations: usize,
    pub low_confidence: bool,
    pub refine_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonrigidSummary {
    pub scale: f64,
    pub final_data_cost: Option<f64>,
    pub max_displacement: f64,
    pub levels: Vec<LevelTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSummary {
    pub path: String,
    pub grid: (usize, usize),
    pub level0: (usize, usize),
    pub max_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarpSummary {
    pub path: String,
    pub levels: usize,
    pub stats: WarpStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
}

/// Everything known about one run; written even when the run fails.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub status: &'static str,
    pub failure: Option<Failure>,
    pub config: RegistrationConfig,
    pub timings: Vec<StageTiming>,
    pub preprocess: Option<PreprocessSummary>,
    pub initial_alignment: Option<InitialSummary>,
    pub nonrigid: Option<NonrigidSummary>,
    pub field: Option<FieldSummary>,
    pub warp: Option<WarpSummary>,
    pub qc_path: Option<String>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub(crate) fn new(config: RegistrationConfig) -> Self {
        Self {
            status: "running",
            failure: None,
            config,
            timings: Vec::new(),
            preprocess: None,
            initial_alignment: None,
            nonrigid: None,
            field: None,
            warp: None,
            qc_path: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
