//! Batches of time-aligned windows and their contrastive roles.
//!
//! An epoch is a seeded permutation of the window indices cut into batches;
//! every device uses the same indices. Within a batch, the positive for
//! anchor row `b` is row `b` of the positive device (same time), and each
//! negative device contributes one row `t' != b` drawn uniformly from the
//! batch (a different time).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::rng;
use crate::selection::SelectionResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Negative rows come from other times in the batch.
    #[default]
    Asynchronous,
    /// Negative rows share the anchor's time (ablation).
    Synchronous,
}

/// Window indices of every batch of one epoch. The last partial batch is
/// kept unless `drop_last`.
pub fn epoch_batches(num_windows: usize, batch_size: usize, seed: u64, epoch: u64, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut perm: Vec<usize> = (0..num_windows).collect();
    perm.shuffle(&mut rng::seeded(rng::derive(seed, &[rng::tag("epoch"), epoch])));
    perm.chunks(batch_size).filter(|c| !drop_last || c.len() == batch_size).map(<[usize]>::to_vec).collect()
}

/// `[B, W, C]` windows of each device of the view at `indices`.
pub fn draw_batch(view: &UnlabeledView<'_>, indices: &[usize]) -> Vec<Vec<f32>> {
    (0..view.num_devices())
        .map(|d| {
            let mut out = Vec::with_capacity(indices.len() * view.window_size());
            for &t in indices {
                out.extend_from_slice(view.window(d, t));
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositiveRole {
    /// Index into the selection's candidates.
    pub candidate: usize,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeRole {
    pub candidate: usize,
    pub weight: f64,
    pub rows: Vec<usize>,
}

/// Row assignments for one batch: anchor row `b` is contrasted with
/// `positives[i].rows[b]` and `negatives[j].rows[b]` of the respective devices.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub batch_time_indices: Vec<usize>,
    pub positives: Vec<PositiveRole>,
    pub negatives: Vec<NegativeRole>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.batch_time_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_time_indices.is_empty()
    }

    /// Counts rows breaking the synchronous-positive or the
    /// asynchronous-negative rule for `mode`.
    pub fn violations(&self, mode: NegativeSampling) -> usize {
        let pos = self.positives.iter().flat_map(|p| p.rows.iter().enumerate()).filter(|(b, &r)| *b != r).count();
        let neg = self
            .negatives
            .iter()
            .flat_map(|n| n.rows.iter().enumerate())
            .filter(|(b, &r)| match mode {
                NegativeSampling::Asynchronous => *b == r,
                NegativeSampling::Synchronous => *b != r,
            })
            .count();
        pos + neg
    }
}

/// Assigns positive and negative rows for a batch of `batch_time_indices`.
pub fn resolve_contrastive<R: Rng + ?Sized>(
    batch_time_indices: &[usize],
    selection: &SelectionResult,
    mode: NegativeSampling,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    let b = batch_time_indices.len();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if b == 1 && mode == NegativeSampling::Asynchronous {
        return Err(Error::InsufficientSamples { needed: 2, got: 1 });
    }
    let positives = selection.positives.iter().map(|&c| PositiveRole { candidate: c, rows: (0..b).collect() }).collect();
    let negatives = selection
        .negatives
        .iter()
        .map(|&(c, weight)| {
            let rows = (0..b)
                .map(|row| match mode {
                    NegativeSampling::Synchronous => row,
                    NegativeSampling::Asynchronous => {
                        let r = rng.random_range(0..b - 1);
                        if r >= row {
                            r + 1
                        } else {
                            r
                        }
                    }
                })
                .collect();
            NegativeRole { candidate: c, weight, rows }
        })
        .collect();
    Ok(ContrastiveBatch { batch_time_indices: batch_time_indices.to_vec(), positives, negatives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::toy_dataset;
    use crate::selection::{select_from_scores, SelectionConfig};

    fn selection(n: usize) -> SelectionResult {
        let ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        let scores: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.1).collect();
        select_from_scores("a", &ids, Some(&scores), &SelectionConfig::default(), &mut rng::seeded(0)).unwrap()
    }

    #[test]
    fn one_batch_holds_a_permutation() {
        let batches = epoch_batches(10, 10, 3, 0, true);
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort_unstable();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(10, 10, 3, 0, true), batches);
        assert_eq!(epoch_batches(10, 4, 3, 1, true).len(), 2);
        assert_eq!(epoch_batches(10, 4, 3, 1, false).len(), 3);
    }

    #[test]
    fn draw_uses_same_indices_on_every_device() {
        let ds = toy_dataset(3, 12, 4, 2);
        let view = ds.unlabeled();
        let idx = [7, 2, 9];
        let batch = draw_batch(&view, &idx);
        for (d, b) in batch.iter().enumerate() {
            for (row, &t) in idx.iter().enumerate() {
                assert_eq!(&b[row * 24..(row + 1) * 24], ds.window(d, t));
            }
        }
    }

    #[test]
    fn two_rows_force_the_other_row() {
        let c = resolve_contrastive(&[5, 9], &selection(3), NegativeSampling::Asynchronous, &mut rng::seeded(0)).unwrap();
        for n in &c.negatives {
            assert_eq!(n.rows, vec![1, 0]);
        }
        assert!(resolve_contrastive(&[5], &selection(3), NegativeSampling::Asynchronous, &mut rng::seeded(0)).is_err());
        assert!(resolve_contrastive(&[5], &selection(3), NegativeSampling::Synchronous, &mut rng::seeded(0)).is_ok());
    }

    #[test]
    fn invariants_hold_over_many_batches() {
        let mut r = rng::seeded(1);
        let sel = selection(4);
        for i in 0..200 {
            let idx: Vec<usize> = (0..(2 + i % 30)).collect();
            let a = resolve_contrastive(&idx, &sel, NegativeSampling::Asynchronous, &mut r).unwrap();
            assert_eq!(a.violations(NegativeSampling::Asynchronous), 0);
            let s = resolve_contrastive(&idx, &sel, NegativeSampling::Synchronous, &mut r).unwrap();
            assert_eq!(s.violations(NegativeSampling::Synchronous), 0);
            assert!(s.negatives.iter().all(|n| n.rows.iter().enumerate().all(|(b, &t)| b == t)));
        }
    }

    #[test]
    fn negative_label_collisions_match_class_marginal() {
        // Labeled batch of 512 with class marginal (0.5, 0.3, 0.2).
        let b = 512;
        let labels: Vec<usize> = (0..b).map(|i| if i % 10 < 5 { 0 } else if i % 10 < 8 { 1 } else { 2 }).collect();
        let idx: Vec<usize> = (0..b).collect();
        let sel = selection(1);
        let mut r = rng::seeded(7);
        let trials = 200;
        let mut same = 0usize;
        for _ in 0..trials {
            let c = resolve_contrastive(&idx, &sel, NegativeSampling::Asynchronous, &mut r).unwrap();
            same += c.negatives[0].rows.iter().enumerate().filter(|(row, &t)| labels[*row] == labels[t]).count();
        }
        let n = (trials * b) as f64;
        // P(same label) drawing from the batch without the anchor row.
        let counts: Vec<f64> = (0..3).map(|k| labels.iter().filter(|&&l| l == k).count() as f64).collect();
        let p: f64 = counts.iter().map(|c| c / b as f64 * (c - 1.0) / (b as f64 - 1.0)).sum();
        let observed = same as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((observed - p).abs() < 3.0 * sigma, "{observed} vs {p}");
    }
}
