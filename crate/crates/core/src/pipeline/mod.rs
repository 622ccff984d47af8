//! JSON-configured orchestration, synthetic ground truth and QC output.

mod config;
mod qc;
mod report;
mod run;
pub mod synth;

pub use config::{parse_config, OutputConfig, RegistrationConfig};
pub use qc::render_checkerboard;
pub use report::{RunReport, Stage, StageTiming};
pub use run::{run_pipeline, PipelineError};
pub use synth::{generate_synthetic_pair, AffineRanges, SynthParams, SyntheticPair};
