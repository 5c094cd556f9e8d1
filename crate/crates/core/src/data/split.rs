//! Subject-group folds and stratified label subsets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::MultiDeviceDataset;

/// One leave-one-group-out fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_subjects: Vec<u32>,
    pub heldout_subjects: Vec<u32>,
}

/// Partitions the dataset's subjects into `num_groups` groups whose sizes
/// differ by at most one, and returns one fold per group.
pub fn split_groups(ds: &MultiDeviceDataset, num_groups: usize, seed: u64) -> Result<Vec<Fold>> {
    split_subjects(&ds.subjects(), num_groups, seed)
}

pub fn split_subjects(subjects: &[u32], num_groups: usize, seed: u64) -> Result<Vec<Fold>> {
    if num_groups < 2 {
        return Err(Error::Config(format!("need at least 2 groups, got {num_groups}")));
    }
    let mut subjects = subjects.to_vec();
    subjects.sort_unstable();
    subjects.dedup();
    if num_groups > subjects.len() {
        return Err(Error::Config(format!("{num_groups} groups requested but only {} subjects", subjects.len())));
    }
    subjects.shuffle(&mut rng::seeded(seed));
    let (base, extra) = (subjects.len() / num_groups, subjects.len() % num_groups);
    let mut groups = Vec::with_capacity(num_groups);
    let mut start = 0;
    for g in 0..num_groups {
        let size = base + usize::from(g < extra);
        let mut group = subjects[start..start + size].to_vec();
        group.sort_unstable();
        groups.push(group);
        start += size;
    }
    Ok((0..num_groups)
        .map(|g| {
            let mut train: Vec<u32> = groups.iter().enumerate().filter(|(h, _)| *h != g).flat_map(|(_, s)| s.clone()).collect();
            train.sort_unstable();
            Fold { index: g, train_subjects: train, heldout_subjects: groups[g].clone() }
        })
        .collect())
}

/// Labeled windows of one device used for supervised training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSubset {
    pub device_id: String,
    /// Sorted window indices into the source dataset.
    pub window_indices: Vec<usize>,
    pub fraction: f64,
}

impl LabeledSubset {
    /// Copies the subset's windows (`[n, W, C]`) and labels out of `ds`.
    pub fn gather(&self, ds: &MultiDeviceDataset) -> Result<(Vec<f32>, Vec<usize>)> {
        let d = ds.device_index(&self.device_id)?;
        let labels = ds.labels().ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        let mut x = Vec::with_capacity(self.window_indices.len() * ds.window_size());
        let mut y = Vec::with_capacity(self.window_indices.len());
        for &t in &self.window_indices {
            x.extend_from_slice(ds.window(d, t));
            y.push(labels[t]);
        }
        Ok((x, y))
    }

    pub fn len(&self) -> usize {
        self.window_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_indices.is_empty()
    }
}

/// Per-class counts summing to `round(fraction * n)`, each within one of
/// exact proportionality; ties in the remainder are broken by `rng`.
/// A class with any windows keeps at least one.
pub(crate) fn stratified_counts<R: Rng + ?Sized>(class_sizes: &[usize], fraction: f64, rng: &mut R) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let total = (fraction * n as f64).round() as usize;
    let quotas: Vec<f64> = class_sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Random tie-break key per class, then order by remainder.
    let keys: Vec<u64> = class_sizes.iter().map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(keys[a].cmp(&keys[b]))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        if counts[c] < class_sizes[c] {
            counts[c] += 1;
        }
    }
    for c in 0..counts.len() {
        if class_sizes[c] > 0 && counts[c] == 0 {
            counts[c] = 1;
            let donor = (0..counts.len()).filter(|&k| counts[k] > 1).max_by_key(|&k| (counts[k], std::cmp::Reverse(k)));
            if let Some(k) = donor {
                counts[k] -= 1;
            }
        }
    }
    counts
}

/// Stratified random subset of the labeled windows of `device_id`.
pub fn sample_label_fraction(ds: &MultiDeviceDataset, device_id: &str, fraction: f64, seed: u64) -> Result<LabeledSubset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    ds.device_index(device_id)?;
    let labels = ds.labels().ok_or_else(|| Error::Data("dataset has no labels".into()))?;
    let k = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (t, &l) in labels.iter().enumerate() {
        by_class[l].push(t);
    }
    let mut r = rng::seeded(seed);
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, fraction, &mut r);
    let mut picked = Vec::new();
    for (mut members, n) in by_class.into_iter().zip(counts) {
        members.shuffle(&mut r);
        picked.extend_from_slice(&members[..n]);
    }
    picked.sort_unstable();
    Ok(LabeledSubset { device_id: device_id.to_string(), window_indices: picked, fraction })
}
