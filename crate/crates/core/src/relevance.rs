//! Image-instruction correspondence scoring: how much the image shifts the
//! per-token answer probabilities, plus ranking, ground-truth selection and
//! positive/negative pseudo-label partitioning.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, write_jsonl, VlitSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    WithImage,
    WithoutImage,
}

/// Visual answer scores for `WithImage`, direct answer scores otherwise.
pub fn answer_scores(sample: &VlitSample, condition: Condition) -> &[f64] {
    match condition {
        Condition::WithImage => &sample.p_visual,
        Condition::WithoutImage => &sample.p_direct,
    }
}

/// `sum_t p_v[t] * ln(p_v[t] / p_d[t])` over answer positions.
///
/// The per-position probabilities are not a normalized distribution, so the
/// result may be negative where the image lowers token probabilities.
pub fn i2c_score(s_av: &[f64], s_a: &[f64]) -> Result<f64> {
    if s_av.len() != s_a.len() {
        return Err(Error::LengthMismatch {
            left: s_av.len(),
            right: s_a.len(),
        });
    }
    if s_av.is_empty() {
        return Err(Error::EmptyInput("answer scores"));
    }
    Ok(s_av
        .iter()
        .zip(s_a)
        .map(|(&pv, &pd)| pv * (pv / pd).ln())
        .sum())
}

/// Length-normalized variant, exposed for diagnostics only.
pub fn i2c_mean_per_token(s_av: &[f64], s_a: &[f64]) -> Result<f64> {
    Ok(i2c_score(s_av, s_a)? / s_av.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample: VlitSample,
    pub s_av: Vec<f64>,
    pub s_a: Vec<f64>,
    pub i2c: f64,
}

impl ScoredSample {
    pub fn sample_id(&self) -> &str {
        &self.sample.sample_id
    }
}

pub fn score_sample(sample: &VlitSample) -> Result<ScoredSample> {
    let s_av = answer_scores(sample, Condition::WithImage).to_vec();
    let s_a = answer_scores(sample, Condition::WithoutImage).to_vec();
    let i2c = i2c_score(&s_av, &s_a)?;
    if !i2c.is_finite() {
        return Err(Error::NonFinite(format!("i2c score of {}", sample.sample_id)));
    }
    Ok(ScoredSample {
        sample: sample.clone(),
        s_av,
        s_a,
        i2c,
    })
}

pub fn score_samples(samples: &[VlitSample]) -> Result<Vec<ScoredSample>> {
    samples.iter().map(score_sample).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    #[default]
    Global,
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub fraction: f64,
}

impl SelectionConfig {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("selection fraction {fraction} not in (0, 1]")));
        }
        Ok(SelectionConfig { fraction })
    }

    /// `ceil(fraction * n)`, snapping products that are integral up to
    /// rounding noise (`0.7 * 10` is `7.000000000000001` in binary).
    pub fn count(&self, n: usize) -> usize {
        let x = self.fraction * n as f64;
        let r = x.round();
        let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
        (k as usize).min(n)
    }
}

/// Higher score first, then sample_id ascending.
fn by_score_then_id(a: &ScoredSample, b: &ScoredSample) -> Ordering {
    b.i2c
        .total_cmp(&a.i2c)
        .then_with(|| a.sample.sample_id.cmp(&b.sample.sample_id))
}

/// The top `ceil(fraction * N)` samples, sorted by score descending.
pub fn rank_and_select(scored: &[ScoredSample], cfg: &SelectionConfig) -> Result<Vec<ScoredSample>> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("scored samples"));
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(by_score_then_id);
    ranked.truncate(cfg.count(scored.len()));
    Ok(ranked)
}

/// Applies [`rank_and_select`] inside each image group; groups keep their
/// first-appearance order.
pub fn rank_and_select_per_image(scored: &[ScoredSample], cfg: &SelectionConfig) -> Result<Vec<ScoredSample>> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("scored samples"));
    }
    let mut out = Vec::new();
    for group in group_by_image(scored) {
        let owned: Vec<ScoredSample> = group.into_iter().cloned().collect();
        out.extend(rank_and_select(&owned, cfg)?);
    }
    Ok(out)
}

pub fn select(scored: &[ScoredSample], cfg: &SelectionConfig, scope: SelectionScope) -> Result<Vec<ScoredSample>> {
    match scope {
        SelectionScope::Global => rank_and_select(scored, cfg),
        SelectionScope::PerImage => rank_and_select_per_image(scored, cfg),
    }
}

fn group_by_image(scored: &[ScoredSample]) -> Vec<Vec<&ScoredSample>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&ScoredSample>> = Vec::new();
    for s in scored {
        let slot = *index.entry(s.sample.image_id.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(s);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelPartition {
    pub image_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
    pub skipped_for_contrastive: bool,
}

/// Per image: the highest-scoring sample is the positive, the rest are
/// negatives. Single-sample images come back flagged as skipped.
pub fn partition_pseudo_labels(scored: &[ScoredSample]) -> Vec<PseudoLabelPartition> {
    group_by_image(scored)
        .into_iter()
        .map(|mut group| {
            group.sort_by(|a, b| by_score_then_id(a, b));
            let positive = group[0];
            let negatives: Vec<String> = group[1..].iter().map(|s| s.sample.sample_id.clone()).collect();
            PseudoLabelPartition {
                image_id: positive.sample.image_id.clone(),
                positive: positive.sample.sample_id.clone(),
                skipped_for_contrastive: negatives.is_empty(),
                negatives,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ScoredRecord {
    #[serde(flatten)]
    sample: VlitSample,
    i2c_score: f64,
}

pub fn save_scored(scored: &[ScoredSample], path: &Path) -> Result<()> {
    let records: Vec<ScoredRecord> = scored
        .iter()
        .map(|s| ScoredRecord {
            sample: s.sample.clone(),
            i2c_score: s.i2c,
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn load_scored(path: &Path) -> Result<Vec<ScoredSample>> {
    let records: Vec<(usize, ScoredRecord)> = read_jsonl(path)?;
    records
        .into_iter()
        .map(|(line, r)| {
            let mut sample = r.sample;
            sample.clamp_probabilities();
            sample.validate()?;
            if !r.i2c_score.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "non-finite i2c_score".into(),
                });
            }
            Ok(ScoredSample {
                s_av: sample.p_visual.clone(),
                s_a: sample.p_direct.clone(),
                sample,
                i2c: r.i2c_score,
            })
        })
        .collect()
}

pub fn save_partitions(parts: &[PseudoLabelPartition], path: &Path) -> Result<()> {
    write_jsonl(path, parts)
}

pub fn load_partitions(path: &Path) -> Result<Vec<PseudoLabelPartition>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, p)| p).collect())
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn median(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::sample;
    use proptest::prelude::*;

    fn scored(id: &str, image: &str, i2c: f64) -> ScoredSample {
        let s = sample(id, image, &["q"], &["a"]);
        ScoredSample {
            s_av: s.p_visual.clone(),
            s_a: s.p_direct.clone(),
            sample: s,
            i2c,
        }
    }

    #[test]
    fn answer_scores_pick_the_condition() {
        let mut s = sample("a", "i", &[], &["x", "y"]);
        s.p_visual = vec![0.9, 0.8];
        s.p_direct = vec![0.3, 0.2];
        assert_eq!(answer_scores(&s, Condition::WithImage), &[0.9, 0.8]);
        assert_eq!(answer_scores(&s, Condition::WithoutImage), &[0.3, 0.2]);
    }

    #[test]
    fn closed_form_scores() {
        assert_eq!(i2c_score(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let expected = 0.5 * 2f64.ln();
        assert!((i2c_score(&[0.5], &[0.25]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3465736).abs() < 1e-7);
        let expected = 0.8 * 2f64.ln() + 0.9 * 3f64.ln();
        assert!((i2c_score(&[0.8, 0.9], &[0.4, 0.3]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.5432688).abs() < 1e-7);
    }

    #[test]
    fn score_can_be_negative() {
        assert!(i2c_score(&[0.1], &[0.9]).unwrap() < 0.0);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(matches!(i2c_score(&[0.5], &[0.5, 0.5]), Err(Error::LengthMismatch { .. })));
        assert!(i2c_score(&[], &[]).is_err());
    }

    #[test]
    fn ten_percent_of_twenty() {
        let xs: Vec<_> = (0..20).map(|i| scored(&format!("s{i:02}"), "img", i as f64)).collect();
        let top = rank_and_select(&xs, &SelectionConfig::new(0.10).unwrap()).unwrap();
        assert_eq!(top.iter().map(|s| s.sample_id()).collect::<Vec<_>>(), ["s19", "s18"]);
    }

    #[test]
    fn full_selection_sorted_desc() {
        let xs = vec![scored("a", "i", 0.1), scored("b", "i", 0.7), scored("c", "i", 0.3)];
        let all = rank_and_select(&xs, &SelectionConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(all.iter().map(|s| s.sample_id()).collect::<Vec<_>>(), ["b", "c", "a"]);
    }

    #[test]
    fn ties_break_by_sample_id() {
        let xs = vec![scored("s3", "i", 1.0), scored("s1", "i", 1.0), scored("s2", "i", 1.0)];
        let top = rank_and_select(&xs, &SelectionConfig::new(0.34).unwrap()).unwrap();
        assert_eq!(top.iter().map(|s| s.sample_id()).collect::<Vec<_>>(), ["s1", "s2"]);
    }

    #[test]
    fn selection_rejects_empty_and_bad_fraction() {
        assert!(rank_and_select(&[], &SelectionConfig { fraction: 0.1 }).is_err());
        assert!(SelectionConfig::new(0.0).is_err());
        assert!(SelectionConfig::new(1.5).is_err());
        assert!(SelectionConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn count_snaps_float_noise() {
        assert_eq!(SelectionConfig { fraction: 0.7 }.count(10), 7);
        assert_eq!(SelectionConfig { fraction: 0.05 }.count(60), 3);
        assert_eq!(SelectionConfig { fraction: 0.05 }.count(61), 4);
        assert_eq!(SelectionConfig { fraction: 0.001 }.count(1), 1);
    }

    #[test]
    fn per_image_selection() {
        let xs = vec![
            scored("a1", "A", 0.1),
            scored("b1", "B", 0.5),
            scored("a2", "A", 0.9),
            scored("b2", "B", 0.2),
        ];
        let cfg = SelectionConfig::new(0.5).unwrap();
        let top = rank_and_select_per_image(&xs, &cfg).unwrap();
        assert_eq!(top.iter().map(|s| s.sample_id()).collect::<Vec<_>>(), ["a2", "b1"]);
    }

    #[test]
    fn partition_rule() {
        let xs = vec![scored("a", "img", 0.2), scored("b", "img", 0.9), scored("c", "img", 0.4)];
        let parts = partition_pseudo_labels(&xs);
        assert_eq!(
            parts,
            vec![PseudoLabelPartition {
                image_id: "img".into(),
                positive: "b".into(),
                negatives: vec!["c".into(), "a".into()],
                skipped_for_contrastive: false,
            }]
        );
    }

    #[test]
    fn single_sample_image_is_skipped() {
        let parts = partition_pseudo_labels(&[scored("only", "img", 0.3)]);
        assert_eq!(parts[0].positive, "only");
        assert!(parts[0].negatives.is_empty());
        assert!(parts[0].skipped_for_contrastive);
    }

    #[test]
    fn partition_tie_break() {
        let parts = partition_pseudo_labels(&[scored("s2", "img", 0.5), scored("s1", "img", 0.5)]);
        assert_eq!(parts[0].positive, "s1");
        assert_eq!(parts[0].negatives, vec!["s2".to_string()]);
    }

    #[test]
    fn scored_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scored.jsonl");
        let xs = score_samples(&[sample("a", "i", &["q"], &["x", "y"])]).unwrap();
        save_scored(&xs, &path).unwrap();
        assert_eq!(load_scored(&path).unwrap(), xs);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.contains("\"i2c_score\":"));
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median([3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median([4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(mean([1.0, 2.0]), Some(1.5));
        assert_eq!(mean(std::iter::empty()), None);
    }

    fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..=1.0, n)
    }

    proptest! {
        #[test]
        fn self_divergence_is_zero(x in (1usize..40).prop_flat_map(probs)) {
            prop_assert_eq!(i2c_score(&x, &x).unwrap(), 0.0);
        }

        #[test]
        fn additive_over_concatenation(
            (a, b) in (1usize..20).prop_flat_map(|n| (probs(n), probs(n))),
            (c, d) in (1usize..20).prop_flat_map(|n| (probs(n), probs(n))),
        ) {
            let whole = i2c_score(&[a.clone(), c.clone()].concat(), &[b.clone(), d.clone()].concat()).unwrap();
            let parts = i2c_score(&a, &b).unwrap() + i2c_score(&c, &d).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-9 * (1.0 + whole.abs()));
        }

        #[test]
        fn monotone_in_visual_probability(pd in 1e-3f64..0.5, lo in 0.0f64..1.0, step in 1e-3f64..1.0) {
            // pv and pv' both above pd
            let pv = pd + lo * (1.0 - pd) * 0.5;
            let pv2 = (pv + step * (1.0 - pv)).min(1.0);
            prop_assume!(pv2 > pv);
            prop_assert!(i2c_score(&[pv2], &[pd]).unwrap() > i2c_score(&[pv], &[pd]).unwrap());
        }

        #[test]
        fn partition_positive_dominates(scores in prop::collection::vec((0usize..4, -5.0f64..5.0), 1..30)) {
            let xs: Vec<_> = scores.iter().enumerate()
                .map(|(i, (img, s))| scored(&format!("s{i}"), &format!("img{img}"), *s))
                .collect();
            let parts = partition_pseudo_labels(&xs);
            let by_id: HashMap<_, _> = xs.iter().map(|s| (s.sample_id().to_string(), s)).collect();
            let mut covered = 0;
            for p in &parts {
                let pos = by_id[&p.positive];
                prop_assert!(!p.negatives.contains(&p.positive));
                for n in &p.negatives {
                    prop_assert!(pos.i2c >= by_id[n].i2c);
                    prop_assert_eq!(&by_id[n].sample.image_id, &p.image_id);
                }
                covered += 1 + p.negatives.len();
            }
            prop_assert_eq!(covered, xs.len());
        }
    }
}
