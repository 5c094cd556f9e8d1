//! Per-device, per-channel min/max scaling to `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{MultiDeviceDataset, Split};

/// Channel extremes of the split the statistics were computed on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub source: Split,
    pub device_ids: Vec<String>,
    /// `[D][C]`
    pub min: Vec<Vec<f64>>,
    pub max: Vec<Vec<f64>>,
}

impl NormStats {
    pub fn compute(ds: &MultiDeviceDataset) -> Self {
        let c = ds.channels();
        let mut min = vec![vec![f64::INFINITY; c]; ds.num_devices()];
        let mut max = vec![vec![f64::NEG_INFINITY; c]; ds.num_devices()];
        for d in 0..ds.num_devices() {
            for row in ds.device_windows(d).chunks_exact(c) {
                for (k, &v) in row.iter().enumerate() {
                    let v = v as f64;
                    min[d][k] = min[d][k].min(v);
                    max[d][k] = max[d][k].max(v);
                }
            }
        }
        Self {
            source: ds.provenance.split,
            device_ids: ds.devices().iter().map(|d| d.device_id.clone()).collect(),
            min,
            max,
        }
    }

    fn device_row(&self, device_id: &str) -> Result<usize> {
        self.device_ids
            .iter()
            .position(|d| d == device_id)
            .ok_or_else(|| Error::Data(format!("normalization statistics have no entry for device '{device_id}'")))
    }
}

/// Scales every channel so the statistics' min maps to -1 and max to +1.
///
/// Without `stats`, they are computed from `ds` itself, which should then be
/// the training split. Channels with zero range map to 0.
pub fn normalize(ds: &MultiDeviceDataset, stats: Option<&NormStats>) -> Result<(MultiDeviceDataset, NormStats)> {
    if ds.provenance.normalized_with.is_some() {
        return Err(Error::Ordering("dataset is already normalized".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::compute(ds),
    };
    let c = ds.channels();
    let mut out = ds.clone();
    for d in 0..ds.num_devices() {
        let id = &ds.devices()[d].device_id;
        let r = stats.device_row(id)?;
        if stats.min[r].len() != c {
            return Err(Error::Shape(format!("statistics for '{id}' cover {} channels, dataset has {c}", stats.min[r].len())));
        }
        for k in 0..c {
            if stats.max[r][k] - stats.min[r][k] <= 0.0 {
                log::warn!("device {id} channel {k} has zero range; mapping to 0");
            }
        }
        for row in out.device_windows_mut(d).chunks_exact_mut(c) {
            for (k, v) in row.iter_mut().enumerate() {
                let (lo, hi) = (stats.min[r][k], stats.max[r][k]);
                let range = hi - lo;
                *v = if range > 0.0 { (2.0 * (*v as f64 - lo) / range - 1.0) as f32 } else { 0.0 };
            }
        }
    }
    out.provenance.normalized_with = Some(stats.source);
    Ok((out, stats))
}

/// Inverse of [`normalize`] for the same statistics.
pub fn denormalize(ds: &MultiDeviceDataset, stats: &NormStats) -> Result<MultiDeviceDataset> {
    let c = ds.channels();
    let mut out = ds.clone();
    for d in 0..ds.num_devices() {
        let r = stats.device_row(&ds.devices()[d].device_id)?;
        for row in out.device_windows_mut(d).chunks_exact_mut(c) {
            for (k, v) in row.iter_mut().enumerate() {
                let (lo, hi) = (stats.min[r][k], stats.max[r][k]);
                *v = ((*v as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32;
            }
        }
    }
    out.provenance.normalized_with = None;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::toy_dataset;
    use crate::data::DeviceDescriptor;
    use proptest::prelude::*;

    fn one_channel(values: Vec<f32>) -> MultiDeviceDataset {
        let n = values.len();
        MultiDeviceDataset::new(
            "n",
            vec![DeviceDescriptor::new("a", 50.0, "p")],
            1,
            1,
            vec![values],
            None,
            vec![0; n],
            vec![0.0; n],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_range_maps_zero_to_zero() {
        let (out, _) = normalize(&one_channel(vec![-9.8, 0.0, 9.8]), None).unwrap();
        assert_eq!(out.device_windows(0), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn affine_map() {
        let (out, _) = normalize(&one_channel(vec![0.0, 3.0, 4.0]), None).unwrap();
        assert_eq!(out.device_windows(0), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn held_out_may_exceed_range_and_zero_range_is_zero() {
        let (_, stats) = normalize(&one_channel(vec![0.0, 4.0]), None).unwrap();
        let (out, _) = normalize(&one_channel(vec![8.0]), Some(&stats)).unwrap();
        assert_eq!(out.device_windows(0), &[3.0]);
        let (flat, _) = normalize(&one_channel(vec![2.0, 2.0]), None).unwrap();
        assert_eq!(flat.device_windows(0), &[0.0, 0.0]);
    }

    #[test]
    fn double_normalization_is_an_ordering_error() {
        let (out, _) = normalize(&toy_dataset(2, 3, 4, 2), None).unwrap();
        assert!(matches!(normalize(&out, None), Err(Error::Ordering(_))));
    }

    #[test]
    fn provenance_records_source_split() {
        let ds = toy_dataset(2, 8, 4, 2);
        let train = ds.select_subjects(&[0, 1], Split::Train(2));
        let test = ds.select_subjects(&[2, 3], Split::Heldout(2));
        let (_, stats) = normalize(&train, None).unwrap();
        let (t, _) = normalize(&test, Some(&stats)).unwrap();
        assert_eq!(t.provenance.normalized_with, Some(Split::Train(2)));
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-50.0f32..50.0, 2..40)) {
            let ds = one_channel(values.clone());
            let (n, stats) = normalize(&ds, None).unwrap();
            for v in n.device_windows(0) {
                prop_assert!((-1.0..=1.0).contains(v));
            }
            let back = denormalize(&n, &stats).unwrap();
            let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for (a, b) in back.device_windows(0).iter().zip(&values) {
                // f32 storage: 1e-6 absolute per unit of half-range.
                let tol = 1e-6 * f64::max(1.0, (hi - lo) as f64 / 2.0);
                prop_assert!(((a - b) as f64).abs() <= tol);
            }
        }
    }
}
