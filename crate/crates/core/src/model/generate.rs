//! Inference side of the toy generator: next-token distributions, decoding,
//! teacher-forced probabilities and the soft anchor embedding.

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ToyModelParams;
use super::vocab::Vocab;
use crate::contrastive::{project_forward, ProjectionParams, ProjectionTrace};
use crate::data::{ImageRef, InstructionClass, VlitSample};
use crate::error::{Error, Result};
use crate::relevance::Condition;

/// What the image pathway sees.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    Image(ArrayView1<'a, f64>),
    /// The learned null feature, i.e. the image is withheld.
    Null,
}

impl<'a> Conditioning<'a> {
    pub fn from_slice(features: &'a [f64]) -> Self {
        Conditioning::Image(ArrayView1::from(features))
    }

    pub fn for_condition(features: &'a [f64], condition: Condition) -> Self {
        match condition {
            Condition::WithImage => Conditioning::from_slice(features),
            Condition::WithoutImage => Conditioning::Null,
        }
    }

    pub(crate) fn features<'p>(&self, params: &'p ToyModelParams) -> ArrayView1<'p, f64>
    where
        'a: 'p,
    {
        match *self {
            Conditioning::Image(f) => f,
            Conditioning::Null => params.null_image_feature.view(),
        }
    }

    pub(crate) fn is_null(&self) -> bool {
        matches!(self, Conditioning::Null)
    }
}

pub(crate) fn check_features(params: &ToyModelParams, cond: &Conditioning<'_>) -> Result<()> {
    if let Conditioning::Image(f) = cond {
        if f.len() != params.null_image_feature.len() {
            return Err(Error::ShapeMismatch(format!(
                "image features of length {} for a model with d_img {}",
                f.len(),
                params.null_image_feature.len()
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_vocab(vocab: &Vocab, params: &ToyModelParams) -> Result<()> {
    if vocab.len() != params.token_embeddings.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary of {} tokens for a model with V = {}",
            vocab.len(),
            params.token_embeddings.ncols()
        )));
    }
    Ok(())
}

/// The last `k` tokens of `seq`.
pub fn window(seq: &[usize], k: usize) -> &[usize] {
    &seq[seq.len().saturating_sub(k)..]
}

pub(crate) fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|z| (z - m).exp());
    let total = e.sum();
    e / total
}

/// Mean of the context embeddings, zero for an empty context.
pub(crate) fn context_mean(ctx: &[usize], params: &ToyModelParams) -> Array1<f64> {
    let d = params.token_embeddings.nrows();
    let mut u = Array1::zeros(d);
    if ctx.is_empty() {
        return u;
    }
    for &t in ctx {
        u += &params.token_embeddings.column(t);
    }
    u / ctx.len() as f64
}

/// One forward step with the image pathway already projected (`z = P f`).
pub(crate) struct Step {
    pub x: Array1<f64>,
    pub probs: Array1<f64>,
}

pub(crate) fn step(ctx: &[usize], z: &Array1<f64>, params: &ToyModelParams) -> Step {
    let u = context_mean(ctx, params);
    let x = concatenate![Axis(0), u, *z];
    let probs = softmax(&params.output_head.dot(&x));
    Step { x, probs }
}

fn check_ids(ids: &[usize], params: &ToyModelParams) -> Result<()> {
    let v = params.token_embeddings.ncols();
    match ids.iter().find(|&&t| t >= v) {
        Some(bad) => Err(Error::UnknownToken(format!("id {bad} (vocabulary size {v})"))),
        None => Ok(()),
    }
}

/// Distribution over the vocabulary for the next token. Only the last
/// `context_window` tokens of `context` are used.
pub fn next_token_distribution(
    context: &[usize],
    conditioning: Conditioning<'_>,
    params: &ToyModelParams,
) -> Result<Array1<f64>> {
    check_ids(context, params)?;
    check_features(params, &conditioning)?;
    let z = params.image_projection.dot(&conditioning.features(params));
    Ok(step(window(context, params.context_window), &z, params).probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled { seed: u64 },
}

impl DecodeMode {
    fn seed(self) -> u64 {
        match self {
            DecodeMode::Greedy => 0,
            DecodeMode::Sampled { seed } => seed,
        }
    }
}

/// Markers never decode; `<eos>` is barred at the first position so every
/// decoded span has at least one token.
fn allowed(id: usize, position: usize, vocab: &Vocab) -> bool {
    !vocab.is_marker(id) && !(position == 0 && id == vocab.eos())
}

pub(crate) fn pick(probs: &Array1<f64>, position: usize, vocab: &Vocab, rng: Option<&mut ChaCha8Rng>) -> usize {
    match rng {
        None => {
            let mut best = None;
            for (i, &p) in probs.iter().enumerate() {
                if allowed(i, position, vocab) && best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((i, p));
                }
            }
            best.expect("at least one decodable token").0
        }
        Some(rng) => {
            let total: f64 = probs
                .iter()
                .enumerate()
                .filter(|(i, _)| allowed(*i, position, vocab))
                .map(|(_, p)| p)
                .sum();
            let mut u = rng.random::<f64>() * total;
            let mut last = None;
            for (i, &p) in probs.iter().enumerate() {
                if !allowed(i, position, vocab) {
                    continue;
                }
                last = Some(i);
                if u < p {
                    return i;
                }
                u -= p;
            }
            last.expect("at least one decodable token")
        }
    }
}

fn decode(
    mut seq: Vec<usize>,
    z: &Array1<f64>,
    params: &ToyModelParams,
    vocab: &Vocab,
    max_len: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<usize> {
    let start = seq.len();
    for position in 0..max_len {
        let probs = step(window(&seq, params.context_window), z, params).probs;
        let next = pick(&probs, position, vocab, rng.as_deref_mut());
        if next == vocab.eos() {
            break;
        }
        seq.push(next);
    }
    seq.split_off(start)
}

pub fn caption_prefix(vocab: &Vocab) -> Vec<usize> {
    vec![vocab.caption_marker()]
}

pub fn question_prefix(caption: &[usize], class: InstructionClass, vocab: &Vocab) -> Vec<usize> {
    let mut p = caption.to_vec();
    p.extend([vocab.class_tag(class), vocab.question_marker()]);
    p
}

/// Context preceding the first answer token: class tag, question, answer marker.
pub fn answer_prefix(question: &[usize], class: InstructionClass, vocab: &Vocab) -> Vec<usize> {
    let mut p = Vec::with_capacity(question.len() + 2);
    p.push(vocab.class_tag(class));
    p.extend_from_slice(question);
    p.push(vocab.answer_marker());
    p
}

fn image_features(image: &ImageRef) -> Result<&[f64]> {
    image.features.as_deref().ok_or_else(|| Error::InvalidImage {
        image_id: image.image_id.clone(),
        reason: "no feature vector".into(),
    })
}

pub fn generate_caption(
    image: &ImageRef,
    params: &ToyModelParams,
    vocab: &Vocab,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Vec<String>> {
    check_vocab(vocab, params)?;
    let cond = Conditioning::from_slice(image_features(image)?);
    check_features(params, &cond)?;
    let z = params.image_projection.dot(&cond.features(params));
    let mut rng = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let ids = decode(caption_prefix(vocab), &z, params, vocab, max_len, rng.as_mut());
    Ok(vocab.words(&ids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// `None` generates with the null image.
    pub image: Option<ImageRef>,
    pub instruction_class: InstructionClass,
    pub max_question_tokens: usize,
    pub max_answer_tokens: usize,
    pub decode: DecodeMode,
}

/// A generated question-answer pair before probabilities are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub sample_id: String,
    pub image_id: String,
    pub instruction_class: InstructionClass,
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl QaPair {
    pub fn with_probabilities(self, p_visual: Vec<f64>, p_direct: Vec<f64>) -> VlitSample {
        VlitSample {
            sample_id: self.sample_id,
            image_id: self.image_id,
            instruction_class: self.instruction_class,
            question: self.question,
            answer: self.answer,
            p_visual,
            p_direct,
        }
    }
}

pub const NULL_IMAGE_ID: &str = "<null>";

pub fn sample_id_for(image_id: &str, class: InstructionClass, seed: u64) -> String {
    format!("{image_id}:{class}:{seed}")
}

/// Two-step generation: the caption and class tag open the question
/// context, and the answer follows the question.
pub fn generate_qa(
    caption: &[String],
    request: &GenerationRequest,
    params: &ToyModelParams,
    vocab: &Vocab,
) -> Result<QaPair> {
    check_vocab(vocab, params)?;
    if caption.is_empty() {
        return Err(Error::EmptyInput("caption"));
    }
    if request.max_question_tokens == 0 || request.max_answer_tokens == 0 {
        return Err(Error::Config("generation lengths must be >= 1".into()));
    }
    let (cond, image_id) = match &request.image {
        Some(img) => (Conditioning::from_slice(image_features(img)?), img.image_id.as_str()),
        None => (Conditioning::Null, NULL_IMAGE_ID),
    };
    check_features(params, &cond)?;
    let caption_ids = vocab.ids(caption)?;
    let z = params.image_projection.dot(&cond.features(params));
    let mut rng = match request.decode {
        DecodeMode::Greedy => None,
        DecodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let class = request.instruction_class;
    let question = decode(
        question_prefix(&caption_ids, class, vocab),
        &z,
        params,
        vocab,
        request.max_question_tokens,
        rng.as_mut(),
    );
    let answer = decode(
        answer_prefix(&question, class, vocab),
        &z,
        params,
        vocab,
        request.max_answer_tokens,
        rng.as_mut(),
    );
    Ok(QaPair {
        sample_id: sample_id_for(image_id, class, request.decode.seed()),
        image_id: image_id.to_string(),
        instruction_class: class,
        question: vocab.words(&question),
        answer: vocab.words(&answer),
    })
}

/// Probability of each `target` token given `prefix` and the preceding targets.
pub fn continuation_probs(
    prefix: &[usize],
    target: &[usize],
    conditioning: Conditioning<'_>,
    params: &ToyModelParams,
) -> Result<Vec<f64>> {
    check_ids(prefix, params)?;
    check_ids(target, params)?;
    check_features(params, &conditioning)?;
    let z = params.image_projection.dot(&conditioning.features(params));
    let mut seq = prefix.to_vec();
    let mut out = Vec::with_capacity(target.len());
    for &t in target {
        let probs = step(window(&seq, params.context_window), &z, params).probs;
        out.push(probs[t]);
        seq.push(t);
    }
    Ok(out)
}

pub fn teacher_forced_probs_ids(
    question: &[usize],
    answer: &[usize],
    class: InstructionClass,
    conditioning: Conditioning<'_>,
    params: &ToyModelParams,
    vocab: &Vocab,
) -> Result<Vec<f64>> {
    check_vocab(vocab, params)?;
    check_ids(question, params)?;
    continuation_probs(&answer_prefix(question, class, vocab), answer, conditioning, params)
}

/// Probability of each answer token given the true prefix.
pub fn teacher_forced_probs(
    question: &[String],
    answer: &[String],
    class: InstructionClass,
    conditioning: Conditioning<'_>,
    params: &ToyModelParams,
    vocab: &Vocab,
) -> Result<Vec<f64>> {
    teacher_forced_probs_ids(
        &vocab.ids(question)?,
        &vocab.ids(answer)?,
        class,
        conditioning,
        params,
        vocab,
    )
}

/// Attach both probability vectors to a generated pair.
pub fn annotate(qa: QaPair, features: &[f64], params: &ToyModelParams, vocab: &Vocab) -> Result<VlitSample> {
    let class = qa.instruction_class;
    let p_visual = teacher_forced_probs(&qa.question, &qa.answer, class, Conditioning::from_slice(features), params, vocab)?;
    let p_direct = teacher_forced_probs(&qa.question, &qa.answer, class, Conditioning::Null, params, vocab)?;
    Ok(qa.with_probabilities(p_visual, p_direct))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEmbedding {
    pub h_y: Array1<f64>,
    pub source_sample_id: String,
}

/// Forward record of the soft anchor for the backward pass.
pub(crate) struct AnchorTrace {
    pub question: Vec<usize>,
    /// Context window, input vector and distribution for each decoded step.
    pub steps: Vec<(Vec<usize>, Array1<f64>, Array1<f64>)>,
    pub columns: Array2<f64>,
    pub projection: ProjectionTrace,
    pub h: Array1<f64>,
}

/// `sum_v p(v) * embedding(v)`.
pub fn expected_embedding(probs: ArrayView1<'_, f64>, params: &ToyModelParams) -> Array1<f64> {
    params.token_embeddings.dot(&probs)
}

pub(crate) fn anchor_forward(
    question: &[usize],
    class: InstructionClass,
    conditioning: Conditioning<'_>,
    params: &ToyModelParams,
    projection: &ProjectionParams,
    vocab: &Vocab,
    max_answer_tokens: usize,
) -> Result<AnchorTrace> {
    check_vocab(vocab, params)?;
    check_ids(question, params)?;
    check_features(params, &conditioning)?;
    if max_answer_tokens == 0 {
        return Err(Error::Config("anchor answer length must be >= 1".into()));
    }
    let z = params.image_projection.dot(&conditioning.features(params));
    let mut seq = answer_prefix(question, class, vocab);
    let mut steps = Vec::new();
    for position in 0..max_answer_tokens {
        let ctx = window(&seq, params.context_window).to_vec();
        let Step { x, probs } = step(&ctx, &z, params);
        let next = pick(&probs, position, vocab, None);
        if next == vocab.eos() {
            break;
        }
        steps.push((ctx, x, probs));
        seq.push(next);
    }
    let d = params.token_embeddings.nrows();
    let mut columns = Array2::zeros((d, question.len() + steps.len()));
    for (i, &q) in question.iter().enumerate() {
        columns.column_mut(i).assign(&params.token_embeddings.column(q));
    }
    for (j, (_, _, probs)) in steps.iter().enumerate() {
        columns
            .column_mut(question.len() + j)
            .assign(&expected_embedding(probs.view(), params));
    }
    let (h, trace) = project_forward(columns.view(), projection)?;
    Ok(AnchorTrace {
        question: question.to_vec(),
        steps,
        columns,
        projection: trace,
        h,
    })
}

/// Greedily decodes an answer to `question`, embedding each step as the
/// expectation of the token embeddings under that step's distribution, and
/// projects [question embeddings, soft answer embeddings].
#[allow(clippy::too_many_arguments)]
pub fn anchor_embedding(
    question: &[String],
    class: InstructionClass,
    features: &[f64],
    params: &ToyModelParams,
    projection: &ProjectionParams,
    vocab: &Vocab,
    max_answer_tokens: usize,
    source_sample_id: &str,
) -> Result<AnchorEmbedding> {
    let trace = anchor_forward(
        &vocab.ids(question)?,
        class,
        Conditioning::from_slice(features),
        params,
        projection,
        vocab,
        max_answer_tokens,
    )?;
    Ok(AnchorEmbedding {
        h_y: trace.h,
        source_sample_id: source_sample_id.to_string(),
    })
}

/// Hard-token representation `h_s` of a question-answer sequence.
pub fn sequence_representation(
    tokens: &[usize],
    params: &ToyModelParams,
    projection: &ProjectionParams,
) -> Result<Array1<f64>> {
    let e = crate::contrastive::embed_sequence(tokens, params.token_embeddings.view())?;
    crate::contrastive::project(e.view(), projection)
}
