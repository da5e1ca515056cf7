//! Stage orchestration: configuration, manifest, stages, reports and
//! parameter studies.

pub mod config;
pub mod manifest;
pub mod phases;
pub mod report;
pub mod run;
pub mod stages;
pub mod study;

pub use config::{Phase, PipelineConfig, TrainingConfig};
pub use report::{emit_report, MetricsReport};
pub use run::{run_pipeline, run_pipeline_with, PipelineOptions};
pub use stages::{run_stage, Stage};
pub use study::{run_ablation_grid, sweep_selection_fraction, AblationRow, SweepRow};
