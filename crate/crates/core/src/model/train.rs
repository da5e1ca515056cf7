//! Hand-derived gradients of the training objectives and the gradient
//! descent step.
//!
//! The cross-entropy term backpropagates through the output head, the
//! context embeddings and the image pathway. The contrastive term reaches
//! the same parameters through the soft anchor (each decoded step
//! contributes `E p`, differentiable in `p`) and additionally trains the
//! projection and the hard-token embeddings of the pseudo-labels.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::generate::{
    anchor_forward, answer_prefix, continuation_probs, sequence_representation, step, window, AnchorTrace,
    Conditioning,
};
use super::params::{ParamGrads, ToyModelParams};
use super::vocab::Vocab;
use crate::contrastive::{
    combined_loss, contrastive_loss, contrastive_loss_grad, cross_entropy_loss, embed_sequence, project_backward,
    project_forward, ContrastiveConfig, LossReport, ProjectionParams,
};
use crate::data::{ImageRef, InstructionClass, VlitSample};
use crate::error::{Error, Result};
use crate::relevance::PseudoLabelPartition;

/// A teacher-forced target continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
    /// `None` trains the null-image condition.
    pub features: Option<Vec<f64>>,
}

/// One image's pseudo-labels plus the instruction that produces its anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGroup {
    pub image_id: String,
    /// Question followed by answer tokens of the positive pseudo-label.
    pub positive: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    pub anchor_question: Vec<usize>,
    pub anchor_class: InstructionClass,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub sequences: Vec<SequenceExample>,
    pub groups: Vec<ContrastiveGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CrmOnly,
    ClmOnly,
    Combined,
}

impl Objective {
    fn uses_ce(self) -> bool {
        matches!(self, Objective::CrmOnly | Objective::Combined)
    }

    fn uses_contrastive(self) -> bool {
        matches!(self, Objective::ClmOnly | Objective::Combined)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub objective: Objective,
    pub contrastive: ContrastiveConfig,
    /// Update the projection alongside the generator; frozen otherwise.
    pub train_projection: bool,
    pub anchor_max_tokens: usize,
}

fn features_of(image: &ImageRef) -> Result<Vec<f64>> {
    image.features.clone().ok_or_else(|| Error::InvalidImage {
        image_id: image.image_id.clone(),
        reason: "no feature vector".into(),
    })
}

/// Cross-entropy example for a selected sample: the answer and a closing
/// `<eos>`, conditioned on its image.
pub fn crm_example(sample: &VlitSample, image: &ImageRef, vocab: &Vocab) -> Result<SequenceExample> {
    let question = vocab.ids(&sample.question)?;
    let mut target = vocab.ids(&sample.answer)?;
    target.push(vocab.eos());
    Ok(SequenceExample {
        prefix: answer_prefix(&question, sample.instruction_class, vocab),
        target,
        features: Some(features_of(image)?),
    })
}

/// Builds the contrastive group for a non-skipped partition. The anchor is
/// prompted with `anchor_question` under the positive's instruction class.
pub fn contrastive_group(
    partition: &PseudoLabelPartition,
    samples: &HashMap<&str, &VlitSample>,
    image: &ImageRef,
    anchor_question: &[String],
    vocab: &Vocab,
) -> Result<ContrastiveGroup> {
    if partition.skipped_for_contrastive || partition.negatives.is_empty() {
        return Err(Error::EmptyInput("negative set"));
    }
    let lookup = |id: &str| -> Result<&VlitSample> {
        samples.get(id).copied().ok_or_else(|| Error::InvalidSample {
            sample_id: id.to_string(),
            reason: "referenced by a partition but not present".into(),
        })
    };
    let tokens = |s: &VlitSample| -> Result<Vec<usize>> {
        let mut t = vocab.ids(&s.question)?;
        t.extend(vocab.ids(&s.answer)?);
        Ok(t)
    };
    let positive = lookup(&partition.positive)?;
    let negatives = partition
        .negatives
        .iter()
        .map(|id| lookup(id).and_then(tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContrastiveGroup {
        image_id: partition.image_id.clone(),
        positive: tokens(positive)?,
        negatives,
        anchor_question: vocab.ids(anchor_question)?,
        anchor_class: positive.instruction_class,
        features: features_of(image)?,
    })
}

fn check_batch(batch: &TrainBatch, objective: Objective) -> Result<()> {
    if batch.sequences.is_empty() && batch.groups.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    if objective.uses_ce() && batch.sequences.is_empty() {
        return Err(Error::EmptyInput("cross-entropy examples"));
    }
    if objective.uses_contrastive() && batch.groups.is_empty() {
        return Err(Error::EmptyInput("contrastive groups (all partitions skipped)"));
    }
    if batch.sequences.iter().any(|s| s.target.is_empty()) {
        return Err(Error::EmptyInput("sequence target"));
    }
    if batch.groups.iter().any(|g| g.negatives.is_empty()) {
        return Err(Error::EmptyInput("negative set"));
    }
    Ok(())
}

fn add_outer(m: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// Backward through one softmax step given `d_logits`; accumulates the
/// head, context embeddings, and returns the image-pathway gradient `dz`.
fn backward_step(
    ctx: &[usize],
    x: &Array1<f64>,
    d_logits: &Array1<f64>,
    model: &ToyModelParams,
    grads: &mut ParamGrads,
) -> Array1<f64> {
    let d = model.token_embeddings.nrows();
    add_outer(&mut grads.output_head, d_logits.view(), x.view());
    let dx = model.output_head.t().dot(d_logits);
    if !ctx.is_empty() {
        let du = dx.slice(s![..d]).to_owned() / ctx.len() as f64;
        for &c in ctx {
            grads.token_embeddings.column_mut(c).scaled_add(1.0, &du);
        }
    }
    dx.slice(s![d..]).to_owned()
}

fn backward_image_pathway(
    dz: &Array1<f64>,
    cond: Conditioning<'_>,
    model: &ToyModelParams,
    grads: &mut ParamGrads,
) {
    let f = cond.features(model);
    add_outer(&mut grads.image_projection, dz.view(), f);
    if cond.is_null() {
        grads.null_image_feature += &model.image_projection.t().dot(dz);
    }
}

/// Mean-per-token cross-entropy of one example, gradients scaled by `scale`.
fn sequence_ce_grad(ex: &SequenceExample, scale: f64, model: &ToyModelParams, grads: &mut ParamGrads) -> f64 {
    let cond = match &ex.features {
        Some(f) => Conditioning::from_slice(f),
        None => Conditioning::Null,
    };
    let z = model.image_projection.dot(&cond.features(model));
    let n = ex.target.len() as f64;
    let mut seq = ex.prefix.clone();
    let mut dz = Array1::zeros(z.len());
    let mut loss = 0.0;
    for &y in &ex.target {
        let ctx = window(&seq, model.context_window).to_vec();
        let st = step(&ctx, &z, model);
        loss -= st.probs[y].ln();
        let mut d_logits = st.probs;
        d_logits[y] -= 1.0;
        d_logits *= scale / n;
        dz += &backward_step(&ctx, &st.x, &d_logits, model, grads);
        seq.push(y);
    }
    backward_image_pathway(&dz, cond, model, grads);
    loss / n
}

/// Projection backward for hard-token columns.
fn hard_tokens_backward(
    tokens: &[usize],
    d_h: &Array1<f64>,
    model: &ToyModelParams,
    projection: &ProjectionParams,
    grads: &mut ParamGrads,
) -> Result<()> {
    let e = embed_sequence(tokens, model.token_embeddings.view())?;
    let (_, trace) = project_forward(e.view(), projection)?;
    let g = project_backward(e.view(), &trace, projection, d_h.view());
    grads.projection_weight += &g.weight;
    grads.projection_bias += &g.bias;
    for (t, &tok) in tokens.iter().enumerate() {
        grads.token_embeddings.column_mut(tok).scaled_add(1.0, &g.input.column(t));
    }
    Ok(())
}

fn anchor_backward(
    anchor: &AnchorTrace,
    features: &[f64],
    d_h: &Array1<f64>,
    model: &ToyModelParams,
    projection: &ProjectionParams,
    grads: &mut ParamGrads,
) {
    let g = project_backward(anchor.columns.view(), &anchor.projection, projection, d_h.view());
    grads.projection_weight += &g.weight;
    grads.projection_bias += &g.bias;
    let nq = anchor.question.len();
    for (t, &tok) in anchor.question.iter().enumerate() {
        grads.token_embeddings.column_mut(tok).scaled_add(1.0, &g.input.column(t));
    }
    let cond = Conditioning::from_slice(features);
    let mut dz = Array1::zeros(model.image_projection.nrows());
    for (j, (ctx, x, probs)) in anchor.steps.iter().enumerate() {
        let dm = g.input.column(nq + j);
        // m = E p
        add_outer(&mut grads.token_embeddings, dm, probs.view());
        let dp = model.token_embeddings.t().dot(&dm);
        let mean = probs.dot(&dp);
        let d_logits = probs * &(dp - mean);
        dz += &backward_step(ctx, x, &d_logits, model, grads);
    }
    backward_image_pathway(&dz, cond, model, grads);
}

/// Loss and gradient of one contrastive group, gradients scaled by `scale`.
fn group_grad(
    group: &ContrastiveGroup,
    scale: f64,
    options: &TrainOptions,
    model: &ToyModelParams,
    projection: &ProjectionParams,
    vocab: &Vocab,
    grads: &mut ParamGrads,
) -> Result<f64> {
    let h_pos = sequence_representation(&group.positive, model, projection)?;
    let h_negs = group
        .negatives
        .iter()
        .map(|n| sequence_representation(n, model, projection))
        .collect::<Result<Vec<_>>>()?;
    let anchor = anchor_forward(
        &group.anchor_question,
        group.anchor_class,
        Conditioning::from_slice(&group.features),
        model,
        projection,
        vocab,
        options.anchor_max_tokens,
    )?;
    let cg = contrastive_loss_grad(anchor.h.view(), h_pos.view(), &h_negs, &options.contrastive)?;
    hard_tokens_backward(&group.positive, &(cg.positive * scale), model, projection, grads)?;
    for (tokens, d) in group.negatives.iter().zip(cg.negatives) {
        hard_tokens_backward(tokens, &(d * scale), model, projection, grads)?;
    }
    anchor_backward(&anchor, &group.features, &(cg.anchor * scale), model, projection, grads);
    Ok(cg.loss)
}

fn report(objective: Objective, l_r: f64, l_c: f64, cfg: &ContrastiveConfig) -> LossReport {
    match objective {
        Objective::CrmOnly => LossReport { l_r, l_c: 0.0, total: l_r },
        Objective::ClmOnly => combined_loss(0.0, l_c, cfg),
        Objective::Combined => combined_loss(l_r, l_c, cfg),
    }
}

/// Batch objective and its gradient. Cross-entropy is averaged over
/// examples, the contrastive loss over groups.
pub fn objective_and_grad(
    batch: &TrainBatch,
    options: &TrainOptions,
    model: &ToyModelParams,
    projection: &ProjectionParams,
    vocab: &Vocab,
) -> Result<(LossReport, ParamGrads)> {
    check_batch(batch, options.objective)?;
    let mut grads = ParamGrads::zeros(model, projection);
    let mut l_r = 0.0;
    if options.objective.uses_ce() {
        let scale = 1.0 / batch.sequences.len() as f64;
        for ex in &batch.sequences {
            l_r += sequence_ce_grad(ex, scale, model, &mut grads) * scale;
        }
    }
    let mut l_c = 0.0;
    if options.objective.uses_contrastive() {
        let per_group = 1.0 / batch.groups.len() as f64;
        let scale = options.contrastive.lambda_c * per_group;
        for g in &batch.groups {
            l_c += group_grad(g, scale, options, model, projection, vocab, &mut grads)? * per_group;
        }
    }
    Ok((report(options.objective, l_r, l_c, &options.contrastive), grads))
}

/// Forward-only evaluation built from the public inference operations.
pub fn objective_value(
    batch: &TrainBatch,
    options: &TrainOptions,
    model: &ToyModelParams,
    projection: &ProjectionParams,
    vocab: &Vocab,
) -> Result<LossReport> {
    check_batch(batch, options.objective)?;
    let mut l_r = 0.0;
    if options.objective.uses_ce() {
        for ex in &batch.sequences {
            let cond = match &ex.features {
                Some(f) => Conditioning::from_slice(f),
                None => Conditioning::Null,
            };
            l_r += cross_entropy_loss(&continuation_probs(&ex.prefix, &ex.target, cond, model)?)?;
        }
        l_r /= batch.sequences.len() as f64;
    }
    let mut l_c = 0.0;
    if options.objective.uses_contrastive() {
        for g in &batch.groups {
            let h_pos = sequence_representation(&g.positive, model, projection)?;
            let h_negs = g
                .negatives
                .iter()
                .map(|n| sequence_representation(n, model, projection))
                .collect::<Result<Vec<_>>>()?;
            let anchor = anchor_forward(
                &g.anchor_question,
                g.anchor_class,
                Conditioning::from_slice(&g.features),
                model,
                projection,
                vocab,
                options.anchor_max_tokens,
            )?;
            l_c += contrastive_loss(anchor.h.view(), h_pos.view(), &h_negs, &options.contrastive)?;
        }
        l_c /= batch.groups.len() as f64;
    }
    Ok(report(options.objective, l_r, l_c, &options.contrastive))
}

/// One gradient-descent update at the model's learning rate. Returns the
/// loss measured before the update.
pub fn train_step(
    batch: &TrainBatch,
    options: &TrainOptions,
    model: &mut ToyModelParams,
    projection: &mut ProjectionParams,
    vocab: &Vocab,
) -> Result<LossReport> {
    let (loss, grads) = objective_and_grad(batch, options, model, projection, vocab)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let lr = model.learning_rate;
    model.token_embeddings.scaled_add(-lr, &grads.token_embeddings);
    model.image_projection.scaled_add(-lr, &grads.image_projection);
    model.null_image_feature.scaled_add(-lr, &grads.null_image_feature);
    model.output_head.scaled_add(-lr, &grads.output_head);
    if options.train_projection {
        projection.weight.scaled_add(-lr, &grads.projection_weight);
        projection.bias.scaled_add(-lr, &grads.projection_bias);
    }
    model.step += 1;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::model::params::{flatten_params, unflatten_params, ModelDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        model: ToyModelParams,
        projection: ProjectionParams,
        vocab: Vocab,
        batch: TrainBatch,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..rng.random_range(5..13)).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::with_words(&words).unwrap();
        let v = vocab.len();
        let d = rng.random_range(2..=8);
        let d_img = rng.random_range(2..=5);
        let dims = ModelDims {
            d,
            d_img,
            vocab_size: v,
            context_window: rng.random_range(1..=3),
        };
        let model = ToyModelParams::init(&dims, 0.05, seed).unwrap();
        let mut projection = ProjectionParams::init(d, &mut rng);
        projection.bias.mapv_inplace(|_| rng.random_range(0.05..0.2));
        let word = |rng: &mut ChaCha8Rng| rng.random_range(7..v);
        let seq = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| word(rng)).collect::<Vec<_>>();
        let feats = |rng: &mut ChaCha8Rng| (0..d_img).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>();
        let sequences = (0..2)
            .map(|i| SequenceExample {
                prefix: seq(&mut rng, 2),
                target: seq(&mut rng, 3),
                features: (i == 0).then(|| feats(&mut rng)),
            })
            .collect();
        let groups = (0..2)
            .map(|_| ContrastiveGroup {
                image_id: "img".into(),
                positive: seq(&mut rng, 4),
                negatives: (0..3).map(|_| seq(&mut rng, 4)).collect(),
                anchor_question: seq(&mut rng, 2),
                anchor_class: InstructionClass::Conversation,
                features: feats(&mut rng),
            })
            .collect();
        Fixture {
            model,
            projection,
            vocab,
            batch: TrainBatch { sequences, groups },
        }
    }

    fn options(objective: Objective) -> TrainOptions {
        TrainOptions {
            objective,
            contrastive: ContrastiveConfig {
                temperature: 0.5,
                ..ContrastiveConfig::default()
            },
            train_projection: true,
            anchor_max_tokens: 3,
        }
    }

    fn check(fx: &Fixture, opts: &TrainOptions) -> f64 {
        let x0 = flatten_params(&fx.model, &fx.projection);
        let value = |x: &[f64]| {
            let (m, p) = unflatten_params(x, &fx.model, &fx.projection).unwrap();
            objective_value(&fx.batch, opts, &m, &p, &fx.vocab).unwrap().total
        };
        let gradient = |x: &[f64]| {
            let (m, p) = unflatten_params(x, &fx.model, &fx.projection).unwrap();
            objective_and_grad(&fx.batch, opts, &m, &p, &fx.vocab).unwrap().1.to_flat()
        };
        grad_check(value, gradient, &x0, 1e-5).unwrap().max_rel_error
    }

    #[test]
    fn value_paths_agree() {
        let fx = fixture(1);
        for obj in [Objective::CrmOnly, Objective::ClmOnly, Objective::Combined] {
            let a = objective_value(&fx.batch, &options(obj), &fx.model, &fx.projection, &fx.vocab).unwrap();
            let (b, _) = objective_and_grad(&fx.batch, &options(obj), &fx.model, &fx.projection, &fx.vocab).unwrap();
            assert!((a.total - b.total).abs() < 1e-12, "{obj:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let fx = fixture(seed);
            for obj in [Objective::CrmOnly, Objective::ClmOnly, Objective::Combined] {
                let err = check(&fx, &options(obj));
                assert!(err < 1e-4, "seed {seed} {obj:?}: {err}");
            }
        }
    }

    #[test]
    fn crm_only_reports_zero_contrastive() {
        let fx = fixture(2);
        let r = objective_value(&fx.batch, &options(Objective::CrmOnly), &fx.model, &fx.projection, &fx.vocab).unwrap();
        assert_eq!(r.l_c, 0.0);
        assert_eq!(r.total, r.l_r);
        assert!(r.l_r > 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut fx = fixture(3);
        fx.model.learning_rate = 0.0;
        let (m0, p0) = (fx.model.clone(), fx.projection.clone());
        let opts = options(Objective::Combined);
        let a = train_step(&fx.batch, &opts, &mut fx.model, &mut fx.projection, &fx.vocab).unwrap();
        let b = train_step(&fx.batch, &opts, &mut fx.model, &mut fx.projection, &fx.vocab).unwrap();
        assert_eq!(a, b);
        assert_eq!(fx.model.token_embeddings, m0.token_embeddings);
        assert_eq!(fx.model.output_head, m0.output_head);
        assert_eq!(fx.projection, p0);
        assert_eq!(fx.model.step, 2);
    }

    #[test]
    fn frozen_projection_is_untouched() {
        let mut fx = fixture(4);
        let p0 = fx.projection.clone();
        let opts = TrainOptions {
            train_projection: false,
            ..options(Objective::ClmOnly)
        };
        train_step(&fx.batch, &opts, &mut fx.model, &mut fx.projection, &fx.vocab).unwrap();
        assert_eq!(fx.projection, p0);
    }

    #[test]
    fn batch_errors() {
        let fx = fixture(5);
        let empty = TrainBatch::default();
        let opts = options(Objective::CrmOnly);
        assert!(objective_and_grad(&empty, &opts, &fx.model, &fx.projection, &fx.vocab).is_err());
        let no_groups = TrainBatch {
            sequences: fx.batch.sequences.clone(),
            groups: vec![],
        };
        assert!(objective_and_grad(&no_groups, &options(Objective::ClmOnly), &fx.model, &fx.projection, &fx.vocab).is_err());
        assert!(objective_and_grad(&no_groups, &opts, &fx.model, &fx.projection, &fx.vocab).is_ok());
    }

    #[test]
    fn repeated_crm_steps_reduce_loss() {
        for seed in 0..3 {
            let mut fx = fixture(seed);
            fx.model.learning_rate = 0.5;
            let opts = options(Objective::CrmOnly);
            let mut losses = Vec::new();
            for _ in 0..200 {
                losses.push(train_step(&fx.batch, &opts, &mut fx.model, &mut fx.projection, &fx.vocab).unwrap().l_r);
            }
            assert!(losses.last().unwrap() < &losses[0]);
            assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-9), "seed {seed}");
        }
    }
}
