//! Sequence embedding, the pooled affine/ReLU projection into the latent
//! space, cosine similarity, and the losses (contrastive, cross-entropy,
//! combined). Every differentiable piece has a matching backward pass.

use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine map `weight * e_t + bias`, applied per token column, followed by
/// ReLU and a mean over columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProjectionParams {
    /// Weight uniform in `[-1/sqrt(d), 1/sqrt(d)]`, zero bias.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        ProjectionParams {
            weight: Array2::from_shape_fn((d, d), |_| rng.random_range(-bound..=bound)),
            bias: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.bias.len();
        if self.weight.dim() != (d, d) {
            return Err(Error::ShapeMismatch(format!(
                "projection weight {:?} must be square {d}x{d}",
                self.weight.dim()
            )));
        }
        if self.weight.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub lambda_c: f64,
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.1,
            lambda_c: 1.0,
            include_positive_in_denominator: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::Config(format!("lambda_c {} must be >= 0", self.lambda_c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Gathers embedding columns: column `t` of the result is `table[:, tokens[t]]`.
pub fn embed_sequence(tokens: &[usize], table: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let vocab = table.ncols();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::UnknownToken(format!("id {bad} (vocabulary size {vocab})")));
    }
    Ok(table.select(Axis(1), tokens))
}

/// Pre-activations kept from the forward pass for [`project_backward`].
#[derive(Debug, Clone)]
pub struct ProjectionTrace {
    pre: Array2<f64>,
}

pub fn project(e: ArrayView2<'_, f64>, params: &ProjectionParams) -> Result<Array1<f64>> {
    project_forward(e, params).map(|(h, _)| h)
}

pub fn project_forward(
    e: ArrayView2<'_, f64>,
    params: &ProjectionParams,
) -> Result<(Array1<f64>, ProjectionTrace)> {
    let d = params.dim();
    if e.nrows() != d || params.weight.dim() != (d, d) {
        return Err(Error::ShapeMismatch(format!(
            "embedding rows {} vs projection {:?}",
            e.nrows(),
            params.weight.dim()
        )));
    }
    if e.ncols() == 0 {
        return Err(Error::EmptyInput("embedding columns"));
    }
    let mut pre = params.weight.dot(&e);
    for mut col in pre.columns_mut() {
        col += &params.bias;
    }
    let h = pre.mapv(|v| v.max(0.0)).mean_axis(Axis(1)).expect("non-empty");
    Ok((h, ProjectionTrace { pre }))
}

pub struct ProjectionGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Gradient with respect to each input column, same shape as `e`.
    pub input: Array2<f64>,
}

pub fn project_backward(
    e: ArrayView2<'_, f64>,
    trace: &ProjectionTrace,
    params: &ProjectionParams,
    d_h: ArrayView1<'_, f64>,
) -> ProjectionGrad {
    let l = e.ncols() as f64;
    // d pre[:, t] = d_h / l masked by the ReLU gate
    let mut d_pre = trace.pre.mapv(|v| if v > 0.0 { 1.0 / l } else { 0.0 });
    for mut col in d_pre.columns_mut() {
        col *= &d_h;
    }
    ProjectionGrad {
        weight: d_pre.dot(&e.t()),
        bias: d_pre.sum_axis(Axis(1)),
        input: params.weight.t().dot(&d_pre),
    }
}

static ZERO_NORM_WARNED: AtomicBool = AtomicBool::new(false);

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `a.b / (|a||b|)`; a zero-norm operand yields 0 with a warning.
pub fn cosine_sim(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    cosine_sim_grad(a, b).0
}

/// Similarity and its gradients with respect to `a` and `b`.
pub fn cosine_sim_grad(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        if ZERO_NORM_WARNED.swap(true, AtomicOrdering::Relaxed) {
            log::debug!("cosine similarity with a zero-norm vector; using 0");
        } else {
            log::warn!("cosine similarity with a zero-norm vector; using 0 (further occurrences logged at debug level)");
        }
        return (0.0, Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let sim = a.dot(&b) / (na * nb);
    let da = &b / (na * nb) - &a * (sim / (na * na));
    let db = &a / (na * nb) - &b * (sim / (nb * nb));
    (sim, da, db)
}

/// `ln sum exp(x)` with max-subtraction.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss from similarities alone: `-s_pos/tau + logsumexp(s_neg/tau)`, with
/// the positive joining the denominator when configured.
pub fn contrastive_loss_from_sims(sim_pos: f64, sim_negs: &[f64], cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(contrastive_sims_grad(sim_pos, sim_negs, cfg)?.0)
}

/// Returns (loss, dL/dsim_pos, dL/dsim_neg per negative).
fn contrastive_sims_grad(sim_pos: f64, sim_negs: &[f64], cfg: &ContrastiveConfig) -> Result<(f64, f64, Vec<f64>)> {
    if sim_negs.is_empty() {
        return Err(Error::EmptyInput("negative set"));
    }
    let tau = cfg.temperature;
    let mut logits: Vec<f64> = sim_negs.iter().map(|s| s / tau).collect();
    if cfg.include_positive_in_denominator {
        logits.push(sim_pos / tau);
    }
    let lse = logsumexp(&logits);
    let weights: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let loss = -sim_pos / tau + lse;
    let mut d_pos = -1.0 / tau;
    if cfg.include_positive_in_denominator {
        d_pos += weights[sim_negs.len()] / tau;
    }
    let d_negs = weights[..sim_negs.len()].iter().map(|w| w / tau).collect();
    Ok((loss, d_pos, d_negs))
}

pub fn contrastive_loss(
    h_anchor: ArrayView1<'_, f64>,
    h_pos: ArrayView1<'_, f64>,
    h_negs: &[Array1<f64>],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let sim_pos = cosine_sim(h_pos, h_anchor);
    let sims: Vec<f64> = h_negs.iter().map(|n| cosine_sim(n.view(), h_anchor)).collect();
    contrastive_loss_from_sims(sim_pos, &sims, cfg)
}

pub struct ContrastiveGrad {
    pub loss: f64,
    pub anchor: Array1<f64>,
    pub positive: Array1<f64>,
    pub negatives: Vec<Array1<f64>>,
}

pub fn contrastive_loss_grad(
    h_anchor: ArrayView1<'_, f64>,
    h_pos: ArrayView1<'_, f64>,
    h_negs: &[Array1<f64>],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveGrad> {
    let (sim_pos, g_pos, g_anchor_pos) = cosine_sim_grad(h_pos, h_anchor);
    let neg_parts: Vec<_> = h_negs.iter().map(|n| cosine_sim_grad(n.view(), h_anchor)).collect();
    let sims: Vec<f64> = neg_parts.iter().map(|p| p.0).collect();
    let (loss, d_pos, d_negs) = contrastive_sims_grad(sim_pos, &sims, cfg)?;

    let mut anchor = g_anchor_pos * d_pos;
    let mut negatives = Vec::with_capacity(h_negs.len());
    for ((_, g_neg, g_anchor), w) in neg_parts.into_iter().zip(d_negs) {
        anchor.scaled_add(w, &g_anchor);
        negatives.push(g_neg * w);
    }
    Ok(ContrastiveGrad {
        loss,
        anchor,
        positive: g_pos * d_pos,
        negatives,
    })
}

/// Mean negative log-likelihood of teacher-forced target probabilities.
pub fn cross_entropy_loss(token_probs: &[f64]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::EmptyInput("token probabilities"));
    }
    if let Some(p) = token_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::NonFinite(format!("probability {p} outside (0, 1]")));
    }
    let n = token_probs.len() as f64;
    Ok(-token_probs.iter().map(|p| p.ln()).sum::<f64>() / n)
}

pub fn combined_loss(l_r: f64, l_c: f64, cfg: &ContrastiveConfig) -> LossReport {
    LossReport {
        l_r,
        l_c,
        total: l_r + cfg.lambda_c * l_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: tau,
            ..ContrastiveConfig::default()
        }
    }

    #[test]
    fn embed_shapes_and_lookup() {
        let table = Array::from_shape_fn((8, 10), |(i, j)| (i * 10 + j) as f64);
        let one = embed_sequence(&[3], table.view()).unwrap();
        assert_eq!(one.column(0), table.column(3));
        let five = embed_sequence(&[0, 1, 2, 3, 4], table.view()).unwrap();
        assert_eq!(five.dim(), (8, 5));
        let rep = embed_sequence(&[7, 7], table.view()).unwrap();
        assert_eq!(rep.column(0), rep.column(1));
        assert!(matches!(embed_sequence(&[10], table.view()), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ProjectionParams::init(4, &mut rng);
        let zero = Array2::zeros((4, 3));
        assert_eq!(project(zero.view(), &params).unwrap(), Array1::<f64>::zeros(4));

        let col = array![[0.5], [-1.0], [2.0], [0.1]];
        let h1 = project(col.view(), &params).unwrap();
        let direct = (params.weight.dot(&col.column(0)) + &params.bias).mapv(|v| v.max(0.0));
        assert_eq!(h1, direct);

        let twice = ndarray::concatenate![Axis(1), col, col];
        let h2 = project(twice.view(), &params).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a - b).abs() < 1e-15);
        }

        let wrong = Array2::zeros((3, 2));
        assert!(matches!(project(wrong.view(), &params), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn init_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ProjectionParams::init(16, &mut rng);
        assert!(p.weight.iter().all(|w| w.abs() <= 0.25));
        assert!(p.bias.iter().all(|&b| b == 0.0));
        p.validate().unwrap();
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(array![1.0, 2.0].view(), array![1.0, 2.0].view()) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 0.0);
        assert_eq!(cosine_sim(array![1.0, 0.0].view(), array![-1.0, 0.0].view()), -1.0);
        assert_eq!(cosine_sim(array![0.0, 0.0].view(), array![1.0, 0.0].view()), 0.0);
    }

    #[test]
    fn contrastive_examples() {
        let l = contrastive_loss_from_sims(1.0, &[0.0], &cfg(1.0)).unwrap();
        assert!((l - (-1.0)).abs() < 1e-12);
        for tau in [0.05, 0.1, 1.0, 3.0] {
            let l = contrastive_loss_from_sims(0.3, &[0.3; 4], &cfg(tau)).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
        assert_eq!(contrastive_loss_from_sims(0.0, &[0.0], &cfg(0.1)).unwrap(), 0.0);
        assert!(matches!(contrastive_loss_from_sims(0.0, &[], &cfg(0.1)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn denominator_with_positive_is_standard_infonce() {
        let c = ContrastiveConfig {
            include_positive_in_denominator: true,
            ..cfg(0.5)
        };
        let (pos, negs) = (0.8, [0.1, -0.2]);
        let manual = -((pos / 0.5f64).exp()
            / ((pos / 0.5f64).exp() + negs.iter().map(|s| (s / 0.5f64).exp()).sum::<f64>()))
        .ln();
        assert!((contrastive_loss_from_sims(pos, &negs, &c).unwrap() - manual).abs() < 1e-12);
        assert!(contrastive_loss_from_sims(pos, &negs, &c).unwrap() > 0.0);
    }

    #[test]
    fn small_temperature_stays_finite() {
        let l = contrastive_loss_from_sims(-1.0, &[1.0, 0.99], &cfg(1e-4)).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_loss(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((cross_entropy_loss(&[0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expected = (4f64.ln() + 2f64.ln()) / 2.0;
        assert!((cross_entropy_loss(&[0.25, 0.5]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 1.0397208).abs() < 1e-7);
        assert!(cross_entropy_loss(&[]).is_err());
        assert!(cross_entropy_loss(&[0.0]).is_err());
    }

    #[test]
    fn combined_examples() {
        let c = ContrastiveConfig::default();
        assert!((combined_loss(0.5, 0.2, &c).total - 0.7).abs() < 1e-15);
        let off = ContrastiveConfig { lambda_c: 0.0, ..c.clone() };
        assert_eq!(combined_loss(0.5, 3.0, &off).total, 0.5);
        assert_eq!(combined_loss(0.0, -1.0, &c).total, -1.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.0).validate().is_err());
        assert!(cfg(-1.0).validate().is_err());
        let neg_lambda = ContrastiveConfig { lambda_c: -0.1, ..cfg(0.1) };
        assert!(neg_lambda.validate().is_err());
        ContrastiveConfig::default().validate().unwrap();
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Array1<f64>> {
        prop::collection::vec(-2.0f64..2.0, d).prop_map(Array1::from)
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            prop_assume!(norm(a.view()) > 1e-3 && norm(b.view()) > 1e-3);
            let base = cosine_sim(a.view(), b.view());
            let scaled = cosine_sim((&a * s).view(), (&b * t).view());
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!(base.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn loss_monotone_in_similarities(pos in -1.0f64..1.0, negs in prop::collection::vec(-1.0f64..1.0, 1..6), bump in 1e-3f64..0.5, tau in 0.05f64..2.0) {
            let c = cfg(tau);
            let base = contrastive_loss_from_sims(pos, &negs, &c).unwrap();
            prop_assert!(contrastive_loss_from_sims(pos + bump, &negs, &c).unwrap() < base);
            let mut worse = negs.clone();
            worse[0] += bump;
            prop_assert!(contrastive_loss_from_sims(pos, &worse, &c).unwrap() > base);
        }

        #[test]
        fn equal_similarities_give_ln_k(s in -1.0f64..1.0, k in 1usize..33, tau in 0.05f64..2.0) {
            let l = contrastive_loss_from_sims(s, &vec![s; k], &cfg(tau)).unwrap();
            prop_assert!((l - (k as f64).ln()).abs() < 1e-9);
        }

        #[test]
        fn projection_is_nonnegative_with_fixed_dim(l in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ProjectionParams::init(6, &mut rng);
            let e = Array2::from_shape_fn((6, l), |_| rng.random_range(-1.0..1.0));
            let h = project(e.view(), &p).unwrap();
            prop_assert_eq!(h.len(), 6);
            prop_assert!(h.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn contrastive_invariant_to_rescaling(a in vec_strategy(4), p in vec_strategy(4), n in vec_strategy(4), s in 0.1f64..10.0) {
            prop_assume!(norm(a.view()) > 1e-3 && norm(p.view()) > 1e-3 && norm(n.view()) > 1e-3);
            let c = cfg(0.1);
            let base = contrastive_loss(a.view(), p.view(), &[n.clone()], &c).unwrap();
            let scaled = contrastive_loss((&a * s).view(), p.view(), &[n * s], &c).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
