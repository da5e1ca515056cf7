//! File-backed stages. Each stage reads its inputs from the workdir,
//! checks them against the manifest, writes fixed-name outputs and
//! appends a manifest entry.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::contrastive::LossReport;
use crate::data::{filter_samples, load_images, load_samples, save_dropped, save_images, save_samples};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::relevance::{
    load_partitions, load_scored, partition_pseudo_labels, save_partitions, save_scored, score_samples,
};

use super::config::{Phase, PipelineConfig};
use super::manifest::{
    file_hash, Manifest, ManifestEntry, STATUS_COMPLETED, STATUS_SKIPPED_ABLATION, STATUS_SKIPPED_JOINT,
};
use super::phases::{
    final_plan, generate_samples, initial_generation, phase_batch, phase_objective, phase_steps, selected_for_crm,
    train, TrainingInputs,
};
use super::report::{emit_report, write_loss_csv};

/// Fixed artifact paths, relative to the workdir.
pub mod paths {
    pub const IMAGES: &str = "generate_initial/images.jsonl";
    pub const INITIAL_MODEL: &str = "generate_initial/model.ckpt";
    pub const INITIAL_SAMPLES: &str = "generate_initial/samples.jsonl";
    pub const KEPT: &str = "filter/kept.jsonl";
    pub const DROPPED: &str = "filter/dropped.jsonl";
    pub const SCORED: &str = "score/scored.jsonl";
    pub const PARTITIONS: &str = "partition/partitions.jsonl";
    pub const CRM_SELECTED: &str = "train_crm/selected.jsonl";
    pub const CRM_MODEL: &str = "train_crm/model.ckpt";
    pub const CRM_LOSSES: &str = "train_crm/losses.csv";
    pub const CLM_MODEL: &str = "train_clm/model.ckpt";
    pub const CLM_LOSSES: &str = "train_clm/losses.csv";
    pub const FINAL_SAMPLES: &str = "generate_final/samples.jsonl";
    pub const FINAL_SCORED: &str = "generate_final/scored.jsonl";
    pub const SUMMARY: &str = "report/summary.txt";
    pub const METRICS: &str = "report/metrics.json";
    pub const LOSS_CURVES: &str = "report/loss_curves.csv";
    pub const HISTOGRAM: &str = "report/i2c_histogram.csv";
    pub const REPORT_ABLATION: &str = "report/ablation.csv";
    pub const REPORT_SWEEP: &str = "report/sweep.csv";
    pub const ABLATION: &str = "ablation/ablation.csv";
    pub const SWEEP: &str = "sweep/sweep.csv";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    GenerateInitial,
    Filter,
    Score,
    Partition,
    TrainCrm,
    TrainClm,
    GenerateFinal,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::GenerateInitial,
        Stage::Filter,
        Stage::Score,
        Stage::Partition,
        Stage::TrainCrm,
        Stage::TrainClm,
        Stage::GenerateFinal,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenerateInitial => "generate_initial",
            Stage::Filter => "filter",
            Stage::Score => "score",
            Stage::Partition => "partition",
            Stage::TrainCrm => "train_crm",
            Stage::TrainClm => "train_clm",
            Stage::GenerateFinal => "generate_final",
            Stage::Report => "report",
        }
    }

    pub fn for_phase(phase: Phase) -> Stage {
        match phase {
            Phase::Crm => Stage::TrainCrm,
            Phase::Clm => Stage::TrainClm,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

pub fn phase_model(phase: Phase) -> &'static str {
    match phase {
        Phase::Crm => paths::CRM_MODEL,
        Phase::Clm => paths::CLM_MODEL,
    }
}

pub fn phase_losses(phase: Phase) -> &'static str {
    match phase {
        Phase::Crm => paths::CRM_LOSSES,
        Phase::Clm => paths::CLM_LOSSES,
    }
}

/// Phases that train under `cfg`, in order.
pub fn training_phases(cfg: &PipelineConfig) -> Vec<Phase> {
    cfg.training
        .phase_order
        .iter()
        .copied()
        .filter(|p| phase_objective(*p, cfg).is_some())
        .collect()
}

/// Checkpoint a phase starts from: the previous training phase's output,
/// or the warm-started generator.
fn input_model(phase: Phase, cfg: &PipelineConfig) -> &'static str {
    let order = training_phases(cfg);
    let pos = order.iter().position(|p| *p == phase).expect("phase trains");
    if pos == 0 {
        paths::INITIAL_MODEL
    } else {
        phase_model(order[pos - 1])
    }
}

/// Checkpoint that generates the final data.
pub fn final_model(cfg: &PipelineConfig) -> &'static str {
    training_phases(cfg).last().map_or(paths::INITIAL_MODEL, |p| phase_model(*p))
}

fn path(workdir: &Path, rel: &str) -> std::path::PathBuf {
    workdir.join(rel)
}

/// Context handed to a stage body.
pub(crate) struct StageRun<'a> {
    pub workdir: &'a Path,
    pub cfg: &'a PipelineConfig,
    pub manifest: Manifest,
    pub config_hash: String,
}

impl StageRun<'_> {
    pub fn p(&self, rel: &str) -> std::path::PathBuf {
        path(self.workdir, rel)
    }
}

/// What a stage body produced.
pub(crate) struct StageOutcome {
    pub status: &'static str,
    pub outputs: Vec<String>,
}

pub(crate) fn completed<S: Into<String>>(outputs: Vec<S>) -> StageOutcome {
    StageOutcome {
        status: STATUS_COMPLETED,
        outputs: outputs.into_iter().map(Into::into).collect(),
    }
}

/// Shared wrapper: input checks, timing, output hashing and the manifest
/// entry. Errors come back tagged with `stage_name`.
pub(crate) fn execute<F>(
    stage_name: &str,
    inputs: &[&str],
    cfg: &PipelineConfig,
    workdir: &Path,
    body: F,
) -> Result<ManifestEntry>
where
    F: FnOnce(&StageRun<'_>) -> Result<StageOutcome>,
{
    let tag = |e: Error| Error::Stage {
        stage: stage_name.to_string(),
        source: Box::new(e),
    };
    let run = || -> Result<ManifestEntry> {
        cfg.validate()?;
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let start = Instant::now();
        let manifest = Manifest::open(workdir)?;
        let config_hash = cfg.hash();
        let input_hashes = manifest.check_inputs(workdir, inputs, &config_hash)?;
        let ctx = StageRun {
            workdir,
            cfg,
            manifest,
            config_hash,
        };
        let outcome = body(&ctx)?;
        let outputs = outcome
            .outputs
            .iter()
            .map(|rel| file_hash(workdir, rel))
            .collect::<Result<Vec<_>>>()?;
        let entry = ManifestEntry {
            stage: stage_name.to_string(),
            status: outcome.status.to_string(),
            config_hash: ctx.config_hash,
            inputs: input_hashes,
            outputs,
            duration_ms: start.elapsed().as_millis() as u64,
        };
        let mut manifest = ctx.manifest;
        manifest.append(entry.clone())?;
        log::info!("stage {stage_name}: {}", entry.status);
        Ok(entry)
    };
    run().map_err(tag)
}

fn stage_inputs(stage: Stage, cfg: &PipelineConfig) -> Vec<&'static str> {
    use paths::*;
    match stage {
        Stage::GenerateInitial => vec![],
        Stage::Filter => vec![INITIAL_SAMPLES],
        Stage::Score => vec![KEPT],
        Stage::Partition => vec![SCORED],
        Stage::TrainCrm | Stage::TrainClm => {
            let phase = if stage == Stage::TrainCrm { Phase::Crm } else { Phase::Clm };
            match phase_objective(phase, cfg) {
                None => vec![],
                Some(_) => vec![IMAGES, SCORED, PARTITIONS, input_model(phase, cfg)],
            }
        }
        Stage::GenerateFinal => {
            let mut v = vec![IMAGES, INITIAL_MODEL];
            if final_model(cfg) != INITIAL_MODEL {
                v.push(final_model(cfg));
            }
            v
        }
        Stage::Report => {
            let mut v = vec![INITIAL_SAMPLES, KEPT, DROPPED, SCORED, PARTITIONS, FINAL_SCORED];
            v.extend(training_phases(cfg).into_iter().map(phase_losses));
            v
        }
    }
}

/// Runs one stage against `workdir`.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, workdir: &Path) -> Result<ManifestEntry> {
    let inputs = stage_inputs(stage, cfg);
    execute(stage.name(), &inputs, cfg, workdir, |ctx| match stage {
        Stage::GenerateInitial => generate_initial(ctx),
        Stage::Filter => filter(ctx),
        Stage::Score => score(ctx),
        Stage::Partition => partition(ctx),
        Stage::TrainCrm => train_phase(ctx, Phase::Crm),
        Stage::TrainClm => train_phase(ctx, Phase::Clm),
        Stage::GenerateFinal => generate_final(ctx),
        Stage::Report => {
            emit_report(ctx.workdir, ctx.cfg, &ctx.manifest)?;
            Ok(completed(super::report::report_outputs(ctx.workdir)))
        }
    })
}

fn generate_initial(ctx: &StageRun<'_>) -> Result<StageOutcome> {
    let init = initial_generation(ctx.cfg)?;
    save_images(&init.world.images, &ctx.p(paths::IMAGES))?;
    init.checkpoint.save(&ctx.p(paths::INITIAL_MODEL))?;
    save_samples(&init.samples, &ctx.p(paths::INITIAL_SAMPLES))?;
    Ok(completed(vec![paths::IMAGES, paths::INITIAL_MODEL, paths::INITIAL_SAMPLES]))
}

fn filter(ctx: &StageRun<'_>) -> Result<StageOutcome> {
    let samples = load_samples(&ctx.p(paths::INITIAL_SAMPLES))?;
    let out = filter_samples(&samples, &ctx.cfg.filter);
    save_samples(&out.kept, &ctx.p(paths::KEPT))?;
    save_dropped(&out.dropped, &ctx.p(paths::DROPPED))?;
    Ok(completed(vec![paths::KEPT, paths::DROPPED]))
}

fn score(ctx: &StageRun<'_>) -> Result<StageOutcome> {
    let kept = load_samples(&ctx.p(paths::KEPT))?;
    if kept.is_empty() {
        return Err(Error::EmptyInput("filtered samples"));
    }
    save_scored(&score_samples(&kept)?, &ctx.p(paths::SCORED))?;
    Ok(completed(vec![paths::SCORED]))
}

fn partition(ctx: &StageRun<'_>) -> Result<StageOutcome> {
    let scored = load_scored(&ctx.p(paths::SCORED))?;
    save_partitions(&partition_pseudo_labels(&scored), &ctx.p(paths::PARTITIONS))?;
    Ok(completed(vec![paths::PARTITIONS]))
}

fn train_phase(ctx: &StageRun<'_>, phase: Phase) -> Result<StageOutcome> {
    let cfg = ctx.cfg;
    let Some(objective) = phase_objective(phase, cfg) else {
        let status = if cfg.phase_enabled(phase) {
            STATUS_SKIPPED_JOINT
        } else {
            STATUS_SKIPPED_ABLATION
        };
        return Ok(StageOutcome {
            status,
            outputs: vec![],
        });
    };
    let images = load_images(&ctx.p(paths::IMAGES))?;
    let scored = load_scored(&ctx.p(paths::SCORED))?;
    let partitions = load_partitions(&ctx.p(paths::PARTITIONS))?;
    let mut ckpt = Checkpoint::load(&ctx.p(input_model(phase, cfg)))?;
    let inputs = TrainingInputs {
        images: &images,
        scored: &scored,
        partitions: &partitions,
    };
    let batch = phase_batch(objective, &inputs, cfg, &ckpt)?;
    let losses: Vec<LossReport> = train(&mut ckpt, &batch, objective, phase_steps(phase, cfg), cfg)?;
    ckpt.save(&ctx.p(phase_model(phase)))?;
    write_loss_csv(&losses, &ctx.p(phase_losses(phase)))?;
    let mut outputs = vec![phase_model(phase), phase_losses(phase)];
    if phase == Phase::Crm {
        save_scored(&selected_for_crm(&scored, cfg)?, &ctx.p(paths::CRM_SELECTED))?;
        outputs.push(paths::CRM_SELECTED);
    }
    Ok(completed(outputs))
}

fn generate_final(ctx: &StageRun<'_>) -> Result<StageOutcome> {
    let images = load_images(&ctx.p(paths::IMAGES))?;
    let scorer = Checkpoint::load(&ctx.p(paths::INITIAL_MODEL))?;
    let generator = Checkpoint::load(&ctx.p(final_model(ctx.cfg)))?;
    let samples = generate_samples(&final_plan(ctx.cfg, images.len()), &images, &generator, &scorer, ctx.cfg)?;
    save_samples(&samples, &ctx.p(paths::FINAL_SAMPLES))?;
    save_scored(&score_samples(&samples)?, &ctx.p(paths::FINAL_SCORED))?;
    Ok(completed(vec![paths::FINAL_SAMPLES, paths::FINAL_SCORED]))
}

/// Stage order for a full run: the training stages follow the configured
/// phase order, disabled phases keep their default slot.
pub fn pipeline_order(cfg: &PipelineConfig) -> Vec<Stage> {
    let mut order = vec![Stage::GenerateInitial, Stage::Filter, Stage::Score, Stage::Partition];
    let mut phases: Vec<Phase> = cfg.training.phase_order.clone();
    for p in [Phase::Crm, Phase::Clm] {
        if !phases.contains(&p) {
            phases.push(p);
        }
    }
    order.extend(phases.into_iter().map(Stage::for_phase));
    order.extend([Stage::GenerateFinal, Stage::Report]);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert_eq!(s.name().replace('_', "-").parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn model_chain_follows_phase_order() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(input_model(Phase::Crm, &cfg), paths::INITIAL_MODEL);
        assert_eq!(input_model(Phase::Clm, &cfg), paths::CRM_MODEL);
        assert_eq!(final_model(&cfg), paths::CLM_MODEL);
        cfg.training.phase_order = vec![Phase::Clm, Phase::Crm];
        assert_eq!(input_model(Phase::Crm, &cfg), paths::CLM_MODEL);
        assert_eq!(final_model(&cfg), paths::CRM_MODEL);
        assert_eq!(pipeline_order(&cfg)[4], Stage::TrainClm);
        cfg.enable_crm = false;
        cfg.enable_clm = false;
        assert_eq!(final_model(&cfg), paths::INITIAL_MODEL);
        cfg.enable_crm = true;
        cfg.training.joint = true;
        cfg.enable_clm = true;
        assert_eq!(training_phases(&cfg), vec![Phase::Clm]);
    }
}
