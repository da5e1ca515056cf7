//! Parameter studies that retrain from the shared warm-started generator:
//! the four-way ablation grid and the selection-fraction sweep.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::data::{load_images, save_samples, ImageRef};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::relevance::{
    load_partitions, load_scored, mean, median, save_scored, score_samples, PseudoLabelPartition, ScoredSample,
    SelectionConfig,
};

use super::config::{Phase, PipelineConfig};
use super::manifest::ManifestEntry;
use super::phases::{final_plan, generate_samples, run_training, selected_for_crm, TrainingInputs};
use super::stages::{completed, execute, paths};

pub const ABLATION_STAGE: &str = "ablation_grid";
pub const SWEEP_STAGE: &str = "sweep";
pub const DEFAULT_SWEEP_FRACTIONS: [f64; 4] = [0.05, 0.10, 0.20, 0.40];

/// `(name, enable_crm, enable_clm)` in reporting order.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("crm_only", true, false),
    ("clm_only", false, true),
    ("crm_clm", true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub enable_crm: bool,
    pub enable_clm: bool,
    pub samples: usize,
    pub mean_i2c: f64,
    pub median_i2c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub selected: usize,
    pub samples: usize,
    pub post_mean_i2c: f64,
    pub post_median_i2c: f64,
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Stage outputs every study starts from.
struct StudyInputs {
    images: Vec<ImageRef>,
    scored: Vec<ScoredSample>,
    partitions: Vec<PseudoLabelPartition>,
    initial: Checkpoint,
}

const STUDY_INPUTS: [&str; 4] = [paths::IMAGES, paths::INITIAL_MODEL, paths::SCORED, paths::PARTITIONS];

impl StudyInputs {
    fn load(workdir: &Path) -> Result<Self> {
        Ok(StudyInputs {
            images: load_images(&workdir.join(paths::IMAGES))?,
            scored: load_scored(&workdir.join(paths::SCORED))?,
            partitions: load_partitions(&workdir.join(paths::PARTITIONS))?,
            initial: Checkpoint::load(&workdir.join(paths::INITIAL_MODEL))?,
        })
    }

    /// Trains `cfg`'s phases from the shared checkpoint and regenerates the
    /// final data.
    fn regenerate(&self, cfg: &PipelineConfig) -> Result<Vec<ScoredSample>> {
        let inputs = TrainingInputs {
            images: &self.images,
            scored: &self.scored,
            partitions: &self.partitions,
        };
        let (generator, _) = run_training(&self.initial, &inputs, cfg)?;
        let plan = final_plan(cfg, self.images.len());
        score_samples(&generate_samples(&plan, &self.images, &generator, &self.initial, cfg)?)
    }
}

fn stats(scored: &[ScoredSample]) -> Result<(f64, f64)> {
    let xs = || scored.iter().map(|s| s.i2c);
    match (mean(xs()), median(xs())) {
        (Some(m), Some(md)) => Ok((m, md)),
        _ => Err(Error::EmptyInput("regenerated samples")),
    }
}

/// `cfg` with the given switches; the phase order is completed so every
/// variant validates.
pub fn variant_config(cfg: &PipelineConfig, enable_crm: bool, enable_clm: bool) -> PipelineConfig {
    let mut v = cfg.clone();
    v.enable_crm = enable_crm;
    v.enable_clm = enable_clm;
    for p in [Phase::Crm, Phase::Clm] {
        if !v.training.phase_order.contains(&p) {
            v.training.phase_order.push(p);
        }
    }
    v
}

/// Baseline, CRM-only, CLM-only and CRM+CLM, each trained from the
/// warm-started generator of `workdir` and evaluated on the same final
/// generation plan.
pub fn run_ablation_grid(cfg: &PipelineConfig, workdir: &Path) -> Result<(Vec<AblationRow>, ManifestEntry)> {
    let mut rows = Vec::new();
    let entry = execute(ABLATION_STAGE, &STUDY_INPUTS, cfg, workdir, |ctx| {
        let inputs = StudyInputs::load(ctx.workdir)?;
        let mut outputs = vec![paths::ABLATION.to_string()];
        for (name, crm, clm) in ABLATION_VARIANTS {
            let scored = inputs.regenerate(&variant_config(cfg, crm, clm))?;
            let files = [format!("ablation/{name}/samples.jsonl"), format!("ablation/{name}/scored.jsonl")];
            save_samples(
                &scored.iter().map(|s| s.sample.clone()).collect::<Vec<_>>(),
                &ctx.p(&files[0]),
            )?;
            save_scored(&scored, &ctx.p(&files[1]))?;
            let (mean_i2c, median_i2c) = stats(&scored)?;
            rows.push(AblationRow {
                variant: name.to_string(),
                enable_crm: crm,
                enable_clm: clm,
                samples: scored.len(),
                mean_i2c,
                median_i2c,
            });
            outputs.extend(files);
        }
        write_csv(&rows, &ctx.p(paths::ABLATION))?;
        Ok(completed(outputs))
    })?;
    Ok((rows, entry))
}

/// CRM alone at each selection fraction, from the shared checkpoint.
pub fn sweep_selection_fraction(
    cfg: &PipelineConfig,
    workdir: &Path,
    fractions: &[f64],
) -> Result<(Vec<SweepRow>, ManifestEntry)> {
    if fractions.is_empty() {
        return Err(Error::EmptyInput("sweep fractions"));
    }
    for f in fractions {
        SelectionConfig::new(*f)?;
    }
    let mut rows = Vec::new();
    let entry = execute(SWEEP_STAGE, &STUDY_INPUTS, cfg, workdir, |ctx| {
        let inputs = StudyInputs::load(ctx.workdir)?;
        for &fraction in fractions {
            let mut v = variant_config(cfg, true, false);
            v.selection_fraction = fraction;
            let selected = selected_for_crm(&inputs.scored, &v)?.len();
            let scored = inputs.regenerate(&v)?;
            let (post_mean_i2c, post_median_i2c) = stats(&scored)?;
            rows.push(SweepRow {
                fraction,
                selected,
                samples: scored.len(),
                post_mean_i2c,
                post_median_i2c,
            });
        }
        write_csv(&rows, &ctx.p(paths::SWEEP))?;
        Ok(completed(vec![paths::SWEEP]))
    })?;
    Ok((rows, entry))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/rows.csv");
        let rows = vec![SweepRow {
            fraction: 0.1,
            selected: 3,
            samples: 5,
            post_mean_i2c: 0.25,
            post_median_i2c: -1.5,
        }];
        write_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("fraction,selected,samples,post_mean_i2c,post_median_i2c\n"));
        assert_eq!(read_csv::<SweepRow>(&p).unwrap(), rows);
    }

    #[test]
    fn variants_validate_under_partial_phase_order() {
        let mut cfg = PipelineConfig::default();
        cfg.enable_crm = false;
        cfg.training.phase_order = vec![Phase::Clm];
        cfg.validate().unwrap();
        for (_, crm, clm) in ABLATION_VARIANTS {
            variant_config(&cfg, crm, clm).validate().unwrap();
        }
    }

    #[test]
    fn invalid_fraction_is_rejected_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        assert!(matches!(sweep_selection_fraction(&cfg, dir.path(), &[0.1, 1.5]), Err(Error::Config(_))));
        assert!(sweep_selection_fraction(&cfg, dir.path(), &[]).is_err());
    }
}
