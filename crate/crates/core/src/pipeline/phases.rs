//! In-memory building blocks shared by the file-backed stages, the
//! selection sweep and the ablation grid.

use std::collections::HashMap;

use crate::contrastive::LossReport;
use crate::data::{ImageRef, InstructionClass, VlitSample};
use crate::error::{Error, Result};
use crate::model::generate::{annotate, generate_caption, generate_qa};
use crate::model::train::{contrastive_group, crm_example, train_step, Objective, TrainBatch, TrainOptions};
use crate::model::{Checkpoint, DecodeMode, GenerationRequest};
use crate::relevance::{select, PseudoLabelPartition, ScoredSample, SelectionConfig};
use crate::world::{pretrain, ToyWorld};

use super::config::{Phase, PipelineConfig};

/// Independent random streams derived from the configured seed.
pub mod stream {
    pub const WORLD: u64 = 0;
    pub const MODEL: u64 = 1;
    pub const INITIAL: u64 = 2;
    pub const FINAL: u64 = 3;
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct InitialArtifacts {
    pub world: ToyWorld,
    pub checkpoint: Checkpoint,
    pub samples: Vec<VlitSample>,
}

/// One slot of a generation plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub image: usize,
    pub class: InstructionClass,
    pub seed: u64,
}

/// `samples_per_image` consecutive slots per image, classes cycling,
/// truncated to `initial_count`.
pub fn initial_plan(cfg: &PipelineConfig) -> Vec<Slot> {
    (0..cfg.initial_count)
        .map(|k| Slot {
            image: k / cfg.samples_per_image,
            class: InstructionClass::ALL[(k % cfg.samples_per_image) % InstructionClass::ALL.len()],
            seed: derive_seed(cfg.seed, stream::INITIAL, k as u64),
        })
        .collect()
}

/// Round-robin over images with classes cycling.
pub fn final_plan(cfg: &PipelineConfig, num_images: usize) -> Vec<Slot> {
    (0..cfg.final_count)
        .map(|n| Slot {
            image: n % num_images,
            class: InstructionClass::ALL[n % InstructionClass::ALL.len()],
            seed: derive_seed(cfg.seed, stream::FINAL, n as u64),
        })
        .collect()
}

/// Generates a caption per used image with `generator`, then a sampled
/// question-answer pair per slot, with probabilities from `scorer`.
pub fn generate_samples(
    plan: &[Slot],
    images: &[ImageRef],
    generator: &Checkpoint,
    scorer: &Checkpoint,
    cfg: &PipelineConfig,
) -> Result<Vec<VlitSample>> {
    let g = &cfg.generation;
    let mut captions: HashMap<usize, Vec<String>> = HashMap::new();
    let mut out = Vec::with_capacity(plan.len());
    for slot in plan {
        let image = images
            .get(slot.image)
            .ok_or_else(|| Error::Config(format!("plan references image {} of {}", slot.image, images.len())))?;
        let caption = match captions.get(&slot.image) {
            Some(c) => c,
            None => {
                let c = generate_caption(image, &generator.model, &generator.vocab, g.max_caption_tokens, DecodeMode::Greedy)?;
                captions.entry(slot.image).or_insert(c)
            }
        };
        let request = GenerationRequest {
            image: Some(image.clone()),
            instruction_class: slot.class,
            max_question_tokens: g.max_question_tokens,
            max_answer_tokens: g.max_answer_tokens,
            decode: DecodeMode::Sampled { seed: slot.seed },
        };
        let qa = generate_qa(caption, &request, &generator.model, &generator.vocab)?;
        let features = image.features.as_deref().expect("generation checked features");
        out.push(annotate(qa, features, &scorer.model, &scorer.vocab)?);
    }
    Ok(out)
}

/// Seeded world, warm-started generator and the initial sample set.
pub fn initial_generation(cfg: &PipelineConfig) -> Result<InitialArtifacts> {
    let world = ToyWorld::generate(cfg.num_images, &cfg.model, derive_seed(cfg.seed, stream::WORLD, 0))?;
    let checkpoint = pretrain(
        &world,
        &cfg.model,
        &cfg.pretrain,
        cfg.training.learning_rate,
        derive_seed(cfg.seed, stream::MODEL, 0),
    )?;
    let samples = generate_samples(&initial_plan(cfg), &world.images, &checkpoint, &checkpoint, cfg)?;
    Ok(InitialArtifacts {
        world,
        checkpoint,
        samples,
    })
}

fn image_index(images: &[ImageRef]) -> HashMap<&str, &ImageRef> {
    images.iter().map(|i| (i.image_id.as_str(), i)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a ImageRef>, id: &str) -> Result<&'a ImageRef> {
    index.get(id).copied().ok_or_else(|| Error::InvalidImage {
        image_id: id.to_string(),
        reason: "not present in the images file".into(),
    })
}

pub fn selected_for_crm(scored: &[ScoredSample], cfg: &PipelineConfig) -> Result<Vec<ScoredSample>> {
    select(scored, &SelectionConfig::new(cfg.selection_fraction)?, cfg.selection_scope)
}

pub fn crm_batch(selected: &[ScoredSample], images: &[ImageRef], checkpoint: &Checkpoint) -> Result<TrainBatch> {
    let index = image_index(images);
    let sequences = selected
        .iter()
        .map(|s| crm_example(&s.sample, lookup(&index, &s.sample.image_id)?, &checkpoint.vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainBatch {
        sequences,
        groups: Vec::new(),
    })
}

/// Contrastive groups for every partition that has negatives; the anchor
/// is prompted with the fixed instruction of the positive's class.
pub fn clm_batch(
    partitions: &[PseudoLabelPartition],
    scored: &[ScoredSample],
    images: &[ImageRef],
    checkpoint: &Checkpoint,
) -> Result<TrainBatch> {
    let index = image_index(images);
    let samples: HashMap<&str, &VlitSample> = scored.iter().map(|s| (s.sample_id(), &s.sample)).collect();
    let mut groups = Vec::new();
    for p in partitions.iter().filter(|p| !p.skipped_for_contrastive) {
        let class = samples
            .get(p.positive.as_str())
            .map(|s| s.instruction_class)
            .ok_or_else(|| Error::InvalidSample {
                sample_id: p.positive.clone(),
                reason: "positive pseudo-label missing from the scored file".into(),
            })?;
        let image = lookup(&index, &p.image_id)?;
        groups.push(contrastive_group(p, &samples, image, &ToyWorld::instruction(class), &checkpoint.vocab)?);
    }
    Ok(TrainBatch {
        sequences: Vec::new(),
        groups,
    })
}

pub fn train_options(objective: Objective, cfg: &PipelineConfig) -> TrainOptions {
    TrainOptions {
        objective,
        contrastive: cfg.contrastive.clone(),
        train_projection: cfg.training.train_projection,
        anchor_max_tokens: cfg.training.anchor_max_tokens,
    }
}

/// Full-batch gradient descent; returns the loss recorded at every step.
pub fn train(
    checkpoint: &mut Checkpoint,
    batch: &TrainBatch,
    objective: Objective,
    steps: usize,
    cfg: &PipelineConfig,
) -> Result<Vec<LossReport>> {
    let options = train_options(objective, cfg);
    checkpoint.model.learning_rate = cfg.training.learning_rate;
    (0..steps)
        .map(|_| {
            train_step(
                batch,
                &options,
                &mut checkpoint.model,
                &mut checkpoint.projection,
                &checkpoint.vocab,
            )
        })
        .collect()
}

/// Inputs every training variant starts from.
pub struct TrainingInputs<'a> {
    pub images: &'a [ImageRef],
    pub scored: &'a [ScoredSample],
    pub partitions: &'a [PseudoLabelPartition],
}

/// Which objective a phase optimizes under `cfg`, or `None` when it does
/// not run.
pub fn phase_objective(phase: Phase, cfg: &PipelineConfig) -> Option<Objective> {
    if !cfg.phase_enabled(phase) {
        return None;
    }
    let joint = cfg.training.joint && cfg.enable_crm && cfg.enable_clm;
    match (phase, joint) {
        (Phase::Crm, true) if cfg.effective_phases()[0] == Phase::Crm => Some(Objective::Combined),
        (Phase::Clm, true) if cfg.effective_phases()[0] == Phase::Clm => Some(Objective::Combined),
        (_, true) => None,
        (Phase::Crm, false) => Some(Objective::CrmOnly),
        (Phase::Clm, false) => Some(Objective::ClmOnly),
    }
}

pub fn phase_batch(
    objective: Objective,
    inputs: &TrainingInputs<'_>,
    cfg: &PipelineConfig,
    checkpoint: &Checkpoint,
) -> Result<TrainBatch> {
    let mut batch = TrainBatch::default();
    if matches!(objective, Objective::CrmOnly | Objective::Combined) {
        let selected = selected_for_crm(inputs.scored, cfg)?;
        batch.sequences = crm_batch(&selected, inputs.images, checkpoint)?.sequences;
    }
    if matches!(objective, Objective::ClmOnly | Objective::Combined) {
        batch.groups = clm_batch(inputs.partitions, inputs.scored, inputs.images, checkpoint)?.groups;
    }
    Ok(batch)
}

pub fn phase_steps(phase: Phase, cfg: &PipelineConfig) -> usize {
    match phase {
        Phase::Crm => cfg.training.crm_steps,
        Phase::Clm => cfg.training.clm_steps,
    }
}

/// Runs the enabled phases in order from `initial`.
pub fn run_training(
    initial: &Checkpoint,
    inputs: &TrainingInputs<'_>,
    cfg: &PipelineConfig,
) -> Result<(Checkpoint, Vec<(Phase, Vec<LossReport>)>)> {
    let mut ckpt = initial.clone();
    let mut curves = Vec::new();
    for phase in cfg.training.phase_order.iter().copied() {
        if let Some(objective) = phase_objective(phase, cfg) {
            let batch = phase_batch(objective, inputs, cfg, &ckpt)?;
            curves.push((phase, train(&mut ckpt, &batch, objective, phase_steps(phase, cfg), cfg)?));
        }
    }
    Ok((ckpt, curves))
}
