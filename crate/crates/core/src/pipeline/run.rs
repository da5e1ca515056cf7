use std::path::Path;

use crate::error::Result;

use super::config::PipelineConfig;
use super::report::MetricsReport;
use super::stages::{pipeline_order, run_stage, Stage};
use super::study::{run_ablation_grid, sweep_selection_fraction};

/// Optional studies folded into a full run, ahead of the report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOptions {
    pub ablation_grid: bool,
    pub sweep_fractions: Option<Vec<f64>>,
}

/// Runs every stage in order and returns the report.
pub fn run_pipeline(cfg: &PipelineConfig, workdir: &Path) -> Result<MetricsReport> {
    run_pipeline_with(cfg, workdir, &PipelineOptions::default())
}

pub fn run_pipeline_with(cfg: &PipelineConfig, workdir: &Path, options: &PipelineOptions) -> Result<MetricsReport> {
    cfg.validate()?;
    for stage in pipeline_order(cfg) {
        if stage == Stage::Report {
            if options.ablation_grid {
                run_ablation_grid(cfg, workdir)?;
            }
            if let Some(fractions) = &options.sweep_fractions {
                sweep_selection_fraction(cfg, workdir, fractions)?;
            }
        }
        run_stage(stage, cfg, workdir)?;
    }
    MetricsReport::load(workdir)
}
