//! Per-batch choice of the positive device and of the weights given to each
//! negative device.
//!
//! With the default strategy the candidate closest to the anchor (least MMD)
//! is the positive, and every candidate, the positive included, is a negative
//! weighted by `1 / MMD` divided by the largest such weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmd::{pairwise_mmd, KernelSpec};

/// Floor applied to MMD scores before inversion.
pub const MMD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Closest positive, all candidates as inverse-MMD weighted negatives.
    #[default]
    Collossl,
    /// One positive and one negative drawn uniformly, with replacement.
    Random,
    /// Closest positive, one uniformly drawn negative.
    ClosestPosRandomNeg,
    /// As the default strategy with every weight set to 1.
    Unweighted,
}

impl SelectionStrategy {
    pub fn needs_mmd(self) -> bool {
        !matches!(self, SelectionStrategy::Random)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    pub num_positives: usize,
    pub kernel: KernelSpec,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { strategy: SelectionStrategy::Collossl, num_positives: 1, kernel: KernelSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub anchor_id: String,
    pub candidate_ids: Vec<String>,
    /// Per candidate; absent for strategies that do not compute MMD.
    pub mmd_scores: Option<Vec<f64>>,
    pub bandwidth: Option<f64>,
    /// Candidate indices, closest first.
    pub positives: Vec<usize>,
    /// `(candidate index, weight)` pairs.
    pub negatives: Vec<(usize, f64)>,
}

impl SelectionResult {
    pub fn positive_ids(&self) -> Vec<&str> {
        self.positives.iter().map(|&i| self.candidate_ids[i].as_str()).collect()
    }

    pub fn negative_weight(&self, device_id: &str) -> Option<f64> {
        let i = self.candidate_ids.iter().position(|c| c == device_id)?;
        self.negatives.iter().find(|n| n.0 == i).map(|n| n.1)
    }
}

/// `1 / max(score, floor)`, divided by the largest of those values.
pub fn inverse_mmd_weights(scores: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = scores.iter().map(|&s| 1.0 / s.max(MMD_FLOOR)).collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    raw.iter().map(|w| w / max).collect()
}

/// Candidate indices sorted by score; ties keep candidate order.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Applies `cfg.strategy` to precomputed scores (`None` only for `Random`).
pub fn select_from_scores<R: Rng + ?Sized>(
    anchor_id: &str,
    candidate_ids: &[String],
    scores: Option<&[f64]>,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SelectionResult> {
    let n = candidate_ids.len();
    if n == 0 {
        return Err(Error::Config("device selection needs at least one candidate".into()));
    }
    if cfg.num_positives == 0 || cfg.num_positives > n {
        return Err(Error::Config(format!("{} positives requested from {n} candidates", cfg.num_positives)));
    }
    if let Some(s) = scores {
        if s.len() != n {
            return Err(Error::Shape(format!("{} scores for {n} candidates", s.len())));
        }
    }
    let need = |s: Option<&[f64]>| s.ok_or_else(|| Error::Config("strategy requires MMD scores".into())).map(|v| v.to_vec());
    let (positives, negatives) = match cfg.strategy {
        SelectionStrategy::Collossl => {
            let s = need(scores)?;
            let w = inverse_mmd_weights(&s);
            (ranked(&s)[..cfg.num_positives].to_vec(), w.into_iter().enumerate().collect())
        }
        SelectionStrategy::Unweighted => {
            let s = need(scores)?;
            (ranked(&s)[..cfg.num_positives].to_vec(), (0..n).map(|i| (i, 1.0)).collect())
        }
        SelectionStrategy::ClosestPosRandomNeg => {
            let s = need(scores)?;
            (ranked(&s)[..cfg.num_positives].to_vec(), vec![(rng.random_range(0..n), 1.0)])
        }
        SelectionStrategy::Random => {
            let mut pool: Vec<usize> = (0..n).collect();
            let mut pos = Vec::with_capacity(cfg.num_positives);
            for _ in 0..cfg.num_positives {
                pos.push(pool.swap_remove(rng.random_range(0..pool.len())));
            }
            (pos, vec![(rng.random_range(0..n), 1.0)])
        }
    };
    Ok(SelectionResult {
        anchor_id: anchor_id.to_string(),
        candidate_ids: candidate_ids.to_vec(),
        mmd_scores: scores.map(<[f64]>::to_vec),
        bandwidth: None,
        positives,
        negatives,
    })
}

/// Scores candidate batches against the anchor batch (all `[n, d]`,
/// time-aligned) and applies the configured strategy.
pub fn select_devices<R: Rng + ?Sized>(
    anchor_id: &str,
    anchor: &[f64],
    candidate_ids: &[String],
    candidates: &[&[f64]],
    d: usize,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<SelectionResult> {
    if candidates.len() != candidate_ids.len() {
        return Err(Error::Shape("candidate ids and batches differ in length".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Config("device selection needs at least one candidate".into()));
    }
    if cfg.strategy.needs_mmd() {
        let p = pairwise_mmd(anchor, candidates, d, &cfg.kernel)?;
        let mut r = select_from_scores(anchor_id, candidate_ids, Some(&p.scores), cfg, rng)?;
        r.bandwidth = Some(p.bandwidth);
        Ok(r)
    } else {
        select_from_scores(anchor_id, candidate_ids, None, cfg, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    const SCORES: [f64; 6] = [0.45, 0.61, 0.67, 0.77, 0.83, 1.51];
    const NAMES: [&str; 6] = ["head", "waist", "thigh", "upperarm", "forearm", "shin"];

    #[test]
    fn chest_anchor_fixture() {
        let r = select_from_scores("chest", &ids(&NAMES), Some(&SCORES), &SelectionConfig::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(r.positive_ids(), vec!["head"]);
        let raw: Vec<f64> = SCORES.iter().map(|s| 1.0 / s).collect();
        for (expected, got) in [2.222, 1.639, 1.493, 1.299, 1.205, 0.662].iter().zip(&raw) {
            assert!((expected - got).abs() < 1e-3);
        }
        let expected = [1.0, 0.738, 0.672, 0.584, 0.542, 0.298];
        assert_eq!(r.negatives.len(), 6);
        for (i, (&(idx, w), e)) in r.negatives.iter().zip(expected).enumerate() {
            assert_eq!(idx, i);
            assert!((w - e).abs() < 1e-3, "{w} vs {e}");
        }
        assert_eq!(r.negatives.iter().map(|n| n.1).fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn single_candidate_is_positive_and_sole_negative() {
        let r = select_from_scores("a", &ids(&["b"]), Some(&[0.3]), &SelectionConfig::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(r.positives, vec![0]);
        assert_eq!(r.negatives, vec![(0, 1.0)]);
    }

    #[test]
    fn zero_score_is_floored_and_ties_follow_order() {
        let w = inverse_mmd_weights(&[0.0, 0.5, 0.0]);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[2], 1.0);
        assert!(w[1] < 1e-6);
        let r = select_from_scores("a", &ids(&["x", "y", "z"]), Some(&[0.2, 0.1, 0.1]), &SelectionConfig::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(r.positives, vec![1]);
    }

    #[test]
    fn weights_strictly_decrease_with_mmd() {
        let scores = [0.9, 0.1, 0.5, 0.3];
        let w = inverse_mmd_weights(&scores);
        for i in 0..4 {
            for j in 0..4 {
                if scores[i] < scores[j] {
                    assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn ablation_strategies() {
        let names = ids(&NAMES);
        let mut r = rng::seeded(4);
        let un = SelectionConfig { strategy: SelectionStrategy::Unweighted, ..Default::default() };
        let u = select_from_scores("chest", &names, Some(&SCORES), &un, &mut r).unwrap();
        assert_eq!(u.positives, vec![0]);
        assert!(u.negatives.iter().all(|n| n.1 == 1.0) && u.negatives.len() == 6);

        let cp = SelectionConfig { strategy: SelectionStrategy::ClosestPosRandomNeg, ..Default::default() };
        let mut seen = [false; 6];
        for _ in 0..200 {
            let s = select_from_scores("chest", &names, Some(&SCORES), &cp, &mut r).unwrap();
            assert_eq!(s.positives, vec![0]);
            assert_eq!(s.negatives.len(), 1);
            seen[s.negatives[0].0] = true;
        }
        assert!(seen.iter().all(|&b| b));

        let rnd = SelectionConfig { strategy: SelectionStrategy::Random, ..Default::default() };
        let mut same = 0;
        for _ in 0..600 {
            let s = select_from_scores("chest", &names, None, &rnd, &mut r).unwrap();
            assert!(s.mmd_scores.is_none());
            if s.positives[0] == s.negatives[0].0 {
                same += 1;
            }
        }
        // With replacement: about 1 in 6 draws coincide.
        assert!((50..=150).contains(&same), "{same}");
    }

    #[test]
    fn k_positives_and_errors() {
        let names = ids(&NAMES);
        let cfg = SelectionConfig { num_positives: 2, ..Default::default() };
        let r = select_from_scores("chest", &names, Some(&SCORES), &cfg, &mut rng::seeded(0)).unwrap();
        assert_eq!(r.positive_ids(), vec!["head", "waist"]);
        assert!(select_from_scores("chest", &[], None, &SelectionConfig::default(), &mut rng::seeded(0)).is_err());
        let too_many = SelectionConfig { num_positives: 7, ..Default::default() };
        assert!(select_from_scores("chest", &names, Some(&SCORES), &too_many, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn end_to_end_selection_prefers_closest_batch() {
        let d = 10;
        let mut r = rng::seeded(1);
        let anchor: Vec<f64> = (0..8 * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let near: Vec<f64> = anchor.iter().map(|v| v + 0.05).collect();
        let far: Vec<f64> = anchor.iter().map(|v| v * 3.0 + 1.0).collect();
        let res = select_devices("a", &anchor, &ids(&["far", "near"]), &[&far, &near], d, &SelectionConfig::default(), &mut r).unwrap();
        assert_eq!(res.positive_ids(), vec!["near"]);
        assert_eq!(res.negative_weight("near"), Some(1.0));
        assert!(res.negative_weight("far").unwrap() < 1.0);
        assert!(res.bandwidth.unwrap() > 0.0);
    }
}
