//! Metrics report: human-readable summary, machine-readable JSON and CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::LossReport;
use crate::data::{load_dropped, load_images, load_samples, DropReason};
use crate::error::{Error, Result};
use crate::relevance::{load_partitions, load_scored, mean, median, ScoredSample};

use super::config::{Phase, PipelineConfig};
use super::manifest::{Manifest, STATUS_COMPLETED};
use super::stages::{paths, phase_losses, training_phases, Stage};
use super::study::{read_csv, write_csv, AblationRow, SweepRow, ABLATION_STAGE, SWEEP_STAGE};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LossRow {
    step: usize,
    l_r: f64,
    l_c: f64,
    total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    phase: String,
    step: usize,
    l_r: f64,
    l_c: f64,
    total: f64,
}

pub fn write_loss_csv(losses: &[LossReport], path: &Path) -> Result<()> {
    let rows: Vec<LossRow> = losses
        .iter()
        .enumerate()
        .map(|(step, l)| LossRow {
            step,
            l_r: l.l_r,
            l_c: l.l_c,
            total: l.total,
        })
        .collect();
    write_csv(&rows, path)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    Ok(read_csv::<LossRow>(path)?
        .into_iter()
        .map(|r| LossReport {
            l_r: r.l_r,
            l_c: r.l_c,
            total: r.total,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub status: String,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2cStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl I2cStats {
    pub fn of(scored: &[ScoredSample]) -> Result<Self> {
        let xs = || scored.iter().map(|s| s.i2c);
        let (Some(m), Some(md)) = (mean(xs()), median(xs())) else {
            return Err(Error::EmptyInput("scored samples"));
        };
        Ok(I2cStats {
            count: scored.len(),
            mean: m,
            median: md,
            min: xs().fold(f64::INFINITY, f64::min),
            max: xs().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub phase: Phase,
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageSummary>,
    pub pre_training: I2cStats,
    pub post_training: I2cStats,
    pub loss_curves: Vec<CurveSummary>,
    pub sweep: Option<Vec<SweepRow>>,
    pub ablation: Option<Vec<AblationRow>>,
}

impl MetricsReport {
    pub fn load(workdir: &Path) -> Result<Self> {
        let p = workdir.join(paths::METRICS);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: p,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub pre_count: usize,
    pub post_count: usize,
}

/// Equal-width bins spanning the combined range of both samples; the last
/// bin is closed on the right.
pub fn histogram(pre: &[f64], post: &[f64], bins: usize) -> Vec<HistogramRow> {
    let all = || pre.iter().chain(post).copied();
    let (mut lo, mut hi) = (all().fold(f64::INFINITY, f64::min), all().fold(f64::NEG_INFINITY, f64::max));
    if !lo.is_finite() || !hi.is_finite() || bins == 0 {
        return Vec::new();
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut rows: Vec<HistogramRow> = (0..bins)
        .map(|i| HistogramRow {
            bin_lower: lo + width * i as f64,
            bin_upper: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            pre_count: 0,
            post_count: 0,
        })
        .collect();
    for &x in pre {
        rows[bin_of(x)].pre_count += 1;
    }
    for &x in post {
        rows[bin_of(x)].post_count += 1;
    }
    rows
}

fn counts<const N: usize>(pairs: [(&str, usize); N]) -> BTreeMap<String, usize> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Optional study table, used only when the manifest vouches for it under
/// the current configuration.
fn study_table<T: serde::de::DeserializeOwned>(
    workdir: &Path,
    manifest: &Manifest,
    rel: &str,
    stage: &str,
    config_hash: &str,
) -> Result<Option<Vec<T>>> {
    if !workdir.join(rel).exists() {
        return Ok(None);
    }
    match manifest.check_inputs(workdir, &[rel], config_hash) {
        Ok(_) => Ok(Some(read_csv(&workdir.join(rel))?)),
        Err(Error::Stale(why)) => {
            log::warn!("ignoring {stage} results: {why}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Report files currently present.
pub fn report_outputs(workdir: &Path) -> Vec<&'static str> {
    [
        paths::SUMMARY,
        paths::METRICS,
        paths::LOSS_CURVES,
        paths::HISTOGRAM,
        paths::REPORT_ABLATION,
        paths::REPORT_SWEEP,
    ]
    .into_iter()
    .filter(|rel| workdir.join(rel).exists())
    .collect()
}

/// Reads the stage artifacts and writes the summary, metrics JSON, loss
/// curves, histogram and any study tables into `report/`.
pub fn emit_report(workdir: &Path, cfg: &PipelineConfig, manifest: &Manifest) -> Result<MetricsReport> {
    let p = |rel: &str| workdir.join(rel);
    let config_hash = cfg.hash();
    let images = load_images(&p(paths::IMAGES))?;
    let initial = load_samples(&p(paths::INITIAL_SAMPLES))?;
    let kept = load_samples(&p(paths::KEPT))?;
    let dropped = load_dropped(&p(paths::DROPPED))?;
    let scored = load_scored(&p(paths::SCORED))?;
    let partitions = load_partitions(&p(paths::PARTITIONS))?;
    let final_scored = load_scored(&p(paths::FINAL_SCORED))?;

    let status = |stage: &str| {
        manifest
            .latest(stage)
            .filter(|e| e.config_hash == config_hash)
            .map_or_else(|| "not run".to_string(), |e| e.status.clone())
    };
    let trained = training_phases(cfg);
    let mut curves = Vec::new();
    let mut curve_rows = Vec::new();
    for phase in &trained {
        let losses = read_loss_csv(&p(phase_losses(*phase)))?;
        let name = Stage::for_phase(*phase).name();
        curve_rows.extend(losses.iter().enumerate().map(|(step, l)| CurveRow {
            phase: name.to_string(),
            step,
            l_r: l.l_r,
            l_c: l.l_c,
            total: l.total,
        }));
        curves.push(CurveSummary {
            phase: *phase,
            steps: losses.len(),
            initial_total: losses.first().map_or(f64::NAN, |l| l.total),
            final_total: losses.last().map_or(f64::NAN, |l| l.total),
        });
    }

    let mut stages = Vec::new();
    for stage in Stage::ALL {
        let c = match stage {
            Stage::GenerateInitial => counts([("images", images.len()), ("samples", initial.len())]),
            Stage::Filter => {
                let by = |r: DropReason| dropped.iter().filter(|d| d.reason == r).count();
                counts([
                    ("kept", kept.len()),
                    ("dropped", dropped.len()),
                    ("dropped_duplicate", by(DropReason::Duplicate)),
                    ("dropped_too_short", by(DropReason::TooShort)),
                    ("dropped_too_long", by(DropReason::TooLong)),
                    ("dropped_invalid", by(DropReason::Invalid)),
                ])
            }
            Stage::Score => counts([("scored", scored.len())]),
            Stage::Partition => {
                let skipped = partitions.iter().filter(|p| p.skipped_for_contrastive).count();
                counts([
                    ("images", partitions.len()),
                    ("contrastive_groups", partitions.len() - skipped),
                    ("skipped_for_contrastive", skipped),
                ])
            }
            Stage::TrainCrm | Stage::TrainClm => {
                let phase = if stage == Stage::TrainCrm { Phase::Crm } else { Phase::Clm };
                let steps = curves.iter().find(|c| c.phase == phase).map_or(0, |c| c.steps);
                let mut c = counts([("steps", steps)]);
                if phase == Phase::Crm && steps > 0 && p(paths::CRM_SELECTED).exists() {
                    c.insert("selected".into(), load_scored(&p(paths::CRM_SELECTED))?.len());
                }
                c
            }
            Stage::GenerateFinal => counts([("samples", final_scored.len())]),
            Stage::Report => counts([("histogram_bins", HISTOGRAM_BINS)]),
        };
        let status = if stage == Stage::Report { STATUS_COMPLETED.to_string() } else { status(stage.name()) };
        stages.push(StageSummary {
            stage: stage.name().to_string(),
            status,
            counts: c,
        });
    }

    let ablation: Option<Vec<AblationRow>> = study_table(workdir, manifest, paths::ABLATION, ABLATION_STAGE, &config_hash)?;
    let sweep: Option<Vec<SweepRow>> = study_table(workdir, manifest, paths::SWEEP, SWEEP_STAGE, &config_hash)?;

    let report = MetricsReport {
        config_hash,
        seed: cfg.seed,
        stages,
        pre_training: I2cStats::of(&scored)?,
        post_training: I2cStats::of(&final_scored)?,
        loss_curves: curves,
        sweep,
        ablation,
    };

    write_csv(&curve_rows, &p(paths::LOSS_CURVES))?;
    let pre: Vec<f64> = scored.iter().map(|s| s.i2c).collect();
    let post: Vec<f64> = final_scored.iter().map(|s| s.i2c).collect();
    write_csv(&histogram(&pre, &post, HISTOGRAM_BINS), &p(paths::HISTOGRAM))?;
    for (rel, rows) in [(paths::REPORT_ABLATION, report.ablation.is_some()), (paths::REPORT_SWEEP, report.sweep.is_some())] {
        if !rows && p(rel).exists() {
            std::fs::remove_file(p(rel)).map_err(|e| Error::io(p(rel), e))?;
        }
    }
    if let Some(rows) = &report.ablation {
        write_csv(rows, &p(paths::REPORT_ABLATION))?;
    }
    if let Some(rows) = &report.sweep {
        write_csv(rows, &p(paths::REPORT_SWEEP))?;
    }
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    std::fs::write(p(paths::METRICS), json).map_err(|e| Error::io(p(paths::METRICS), e))?;
    std::fs::write(p(paths::SUMMARY), summary_text(&report)).map_err(|e| Error::io(p(paths::SUMMARY), e))?;
    Ok(report)
}

pub fn summary_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "vlit-curate run summary");
    let _ = writeln!(s, "config_hash {}", r.config_hash);
    let _ = writeln!(s, "seed {}", r.seed);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<18}{:<20}counts", "stage", "status");
    for st in &r.stages {
        let c: Vec<String> = st.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "{:<18}{:<20}{}", st.stage, st.status, c.join(" "));
    }
    let _ = writeln!(s);
    for (label, x) in [("pre-training ", &r.pre_training), ("post-training", &r.post_training)] {
        let _ = writeln!(
            s,
            "{label} i2c: n={} mean={:.6} median={:.6} min={:.6} max={:.6}",
            x.count, x.mean, x.median, x.min, x.max
        );
    }
    let _ = writeln!(s, "change in mean i2c: {:+.6}", r.post_training.mean - r.pre_training.mean);
    if !r.loss_curves.is_empty() {
        let _ = writeln!(s);
        for c in &r.loss_curves {
            let _ = writeln!(
                s,
                "loss {:<4} steps={} first={:.6} last={:.6}",
                format!("{:?}", c.phase).to_lowercase(),
                c.steps,
                c.initial_total,
                c.final_total
            );
        }
    }
    if let Some(rows) = &r.ablation {
        let _ = writeln!(s, "\nablation grid");
        let _ = writeln!(s, "{:<10}{:<6}{:<6}{:>9}{:>12}{:>12}", "variant", "crm", "clm", "samples", "mean_i2c", "median_i2c");
        for a in rows {
            let _ = writeln!(
                s,
                "{:<10}{:<6}{:<6}{:>9}{:>12.6}{:>12.6}",
                a.variant, a.enable_crm, a.enable_clm, a.samples, a.mean_i2c, a.median_i2c
            );
        }
    }
    if let Some(rows) = &r.sweep {
        let _ = writeln!(s, "\nselection sweep");
        let _ = writeln!(s, "{:<10}{:>9}{:>15}{:>17}", "fraction", "selected", "post_mean_i2c", "post_median_i2c");
        for w in rows {
            let _ = writeln!(s, "{:<10}{:>9}{:>15.6}{:>17.6}", w.fraction, w.selected, w.post_mean_i2c, w.post_median_i2c);
        }
    }
    s
}
