//! Maximum mean discrepancy between batches of flattened windows.
//!
//! Uses the RBF kernel `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))` and the
//! biased (V-statistic) estimator, so the squared value is never negative
//! up to rounding and is clamped at 0 before the square root.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::scalar::{gemm, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance of the pooled samples.
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn fixed(sigma: f64) -> Self {
        Self { bandwidth: Bandwidth::Fixed(sigma) }
    }

    fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => Err(Error::Config(format!("bandwidth {s} must be positive"))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth_used: f64,
    pub n_x: usize,
    pub n_y: usize,
}

/// Squared Euclidean distances between all rows of `z` (`rows x d`).
///
/// Uses the Gram expansion, except that near-zero entries are recomputed
/// directly so identical rows give exactly 0.
fn sq_distances(z: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    let a = MatRef::row_major(z, rows, d);
    gemm(1.0, a, a.t(), 0.0, &mut g);
    let norms: Vec<f64> = (0..rows).map(|i| g[i * rows + i]).collect();
    let mut d2 = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in (i + 1)..rows {
            let mut v = norms[i] + norms[j] - 2.0 * g[i * rows + j];
            if v <= 1e-9 * (norms[i] + norms[j]) {
                v = z[i * d..(i + 1) * d].iter().zip(&z[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
            }
            d2[i * rows + j] = v;
            d2[j * rows + i] = v;
        }
    }
    d2
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median of the pairwise Euclidean distances (upper triangle) of a
/// `rows x rows` squared-distance matrix. Falls back to 1 when all samples
/// coincide.
fn median_heuristic(d2: &[f64], rows: usize) -> f64 {
    let dists: Vec<f64> = (0..rows).flat_map(|i| ((i + 1)..rows).map(move |j| (i, j))).map(|(i, j)| d2[i * rows + j].sqrt()).collect();
    if dists.is_empty() {
        return 1.0;
    }
    let m = median(dists);
    if m > 0.0 {
        m
    } else {
        log::warn!("all pooled samples coincide; using bandwidth 1");
        1.0
    }
}

fn resolve_bandwidth(kernel: &KernelSpec, d2: &[f64], rows: usize) -> f64 {
    match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_heuristic(d2, rows),
    }
}

/// Biased MMD between rows `a` and rows `b` of a pooled distance matrix.
fn mmd_blocks(d2: &[f64], rows: usize, a: std::ops::Range<usize>, b: std::ops::Range<usize>, sigma: f64) -> f64 {
    let inv = -1.0 / (2.0 * sigma * sigma);
    let block_mean = |r1: &std::ops::Range<usize>, r2: &std::ops::Range<usize>| {
        let mut s = 0.0;
        for i in r1.clone() {
            let row = &d2[i * rows..(i + 1) * rows];
            for j in r2.clone() {
                s += (row[j] * inv).exp();
            }
        }
        s / (r1.len() * r2.len()) as f64
    };
    let sq = block_mean(&a, &a) + block_mean(&b, &b) - 2.0 * block_mean(&a, &b);
    sq.max(0.0).sqrt()
}

fn check_sets(sets: &[&[f64]], d: usize) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::Shape("sample dimension must be positive".into()));
    }
    sets.iter()
        .map(|s| {
            if s.len() % d != 0 {
                return Err(Error::Shape(format!("sample set of {} values is not a multiple of dimension {d}", s.len())));
            }
            let n = s.len() / d;
            if n < 2 {
                return Err(Error::InsufficientSamples { needed: 2, got: n });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite value in MMD input".into()));
            }
            Ok(n)
        })
        .collect()
}

/// MMD between sample sets `x` (`n x d`) and `y` (`m x d`), row-major.
/// Symmetric in its arguments bit for bit.
pub fn compute_mmd(x: &[f64], y: &[f64], d: usize, kernel: &KernelSpec) -> Result<MmdResult> {
    kernel.validate()?;
    let sizes = check_sets(&[x, y], d)?;
    let swap = match sizes[0].cmp(&sizes[1]) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => x.iter().zip(y).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Greater),
    };
    let (p, q) = if swap { (y, x) } else { (x, y) };
    let (np, nq) = (p.len() / d, q.len() / d);
    let rows = np + nq;
    let mut z = Vec::with_capacity(rows * d);
    z.extend_from_slice(p);
    z.extend_from_slice(q);
    let d2 = sq_distances(&z, rows, d);
    let sigma = resolve_bandwidth(kernel, &d2, rows);
    let value = mmd_blocks(&d2, rows, 0..np, np..rows, sigma);
    Ok(MmdResult { value, bandwidth_used: sigma, n_x: sizes[0], n_y: sizes[1] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMmd {
    /// One score per candidate, in input order.
    pub scores: Vec<f64>,
    pub bandwidth: f64,
}

/// MMD between the anchor batch and each candidate batch, all sharing one
/// bandwidth derived from the pooled samples.
pub fn pairwise_mmd(anchor: &[f64], candidates: &[&[f64]], d: usize, kernel: &KernelSpec) -> Result<PairwiseMmd> {
    kernel.validate()?;
    if candidates.is_empty() {
        return Err(Error::Config("pairwise MMD needs at least one candidate".into()));
    }
    let mut sets = vec![anchor];
    sets.extend_from_slice(candidates);
    let sizes = check_sets(&sets, d)?;
    if sizes.iter().any(|&n| n != sizes[0]) {
        return Err(Error::Shape("all batches must have the same number of samples".into()));
    }
    let n = sizes[0];
    let rows = n * sets.len();
    let z: Vec<f64> = sets.concat();
    let d2 = sq_distances(&z, rows, d);
    let sigma = resolve_bandwidth(kernel, &d2, rows);
    let scores = (1..sets.len()).map(|k| mmd_blocks(&d2, rows, 0..n, k * n..(k + 1) * n, sigma)).collect();
    Ok(PairwiseMmd { scores, bandwidth: sigma })
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(n: usize, d: usize, seed: u64, offset: f64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n * d).map(|_| r.random_range(-1.0..1.0) + offset).collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let x = random(8, 20, 1, 0.0);
        assert_eq!(compute_mmd(&x, &x, 20, &KernelSpec::default()).unwrap().value, 0.0);
    }

    #[test]
    fn hand_computed_two_point_case() {
        let r = compute_mmd(&[0.0, 0.0], &[1.0, 1.0], 1, &KernelSpec::fixed(1.0)).unwrap();
        let expected_sq = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((r.value * r.value - expected_sq).abs() < 1e-12);
        assert!((r.value - 0.887_1).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        let k = KernelSpec::default();
        assert!(matches!(compute_mmd(&[1.0], &[1.0, 2.0], 1, &k), Err(Error::InsufficientSamples { .. })));
        assert!(matches!(compute_mmd(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2, &k), Err(Error::Shape(_))));
        assert!(pairwise_mmd(&[1.0, 2.0], &[], 1, &k).is_err());
    }

    #[test]
    fn pairwise_copies_are_zero_and_offset_orders() {
        let d = 30;
        let a = random(16, d, 3, 0.0);
        let r = pairwise_mmd(&a, &[&a, &a], d, &KernelSpec::default()).unwrap();
        assert_eq!(r.scores, vec![0.0, 0.0]);
        let near: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let far: Vec<f64> = a.iter().map(|v| v + 2.0).collect();
        let r = pairwise_mmd(&a, &[&far, &near], d, &KernelSpec::default()).unwrap();
        assert!(r.scores[0] > r.scores[1]);
    }

    #[test]
    fn ordering_fixture_is_preserved() {
        let d = 24;
        let a = random(32, d, 4, 0.0);
        let offsets = [0.05, 0.1, 0.2, 0.35, 0.5, 1.0];
        let cands: Vec<Vec<f64>> =
            offsets.iter().enumerate().map(|(k, o)| random(32, d, 100 + k as u64, 0.0).iter().zip(&a).map(|(n, v)| v + 0.05 * n + o).collect()).collect();
        let refs: Vec<&[f64]> = cands.iter().map(|c| &c[..]).collect();
        let r = pairwise_mmd(&a, &refs, d, &KernelSpec::default()).unwrap();
        assert!(r.scores.windows(2).all(|p| p[0] < p[1]), "{:?}", r.scores);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_nonnegative_and_scale_free(n in 2usize..10, m in 2usize..10, d in 1usize..12, seed in 0u64..1000, sigma in 0.1f64..5.0) {
            let x = random(n, d, seed, 0.0);
            let y = random(m, d, seed + 1, 0.3);
            for k in [KernelSpec::default(), KernelSpec::fixed(sigma)] {
                let a = compute_mmd(&x, &y, d, &k).unwrap();
                let b = compute_mmd(&y, &x, d, &k).unwrap();
                prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
                prop_assert!(a.value >= 0.0);
            }
            let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let a = compute_mmd(&x, &y, d, &KernelSpec::fixed(sigma)).unwrap().value;
            let b = compute_mmd(&x2, &y2, d, &KernelSpec::fixed(2.0 * sigma)).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
