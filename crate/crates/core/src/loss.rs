//! Training objectives and their gradients.
//!
//! The multi-view contrastive loss for one anchor `z` with positives `p_i`,
//! negatives `n_j` and negative weights `w_j` is
//!
//! ```text
//! L = -log( sum_i e^{s(z,p_i)/tau} / (sum_i e^{s(z,p_i)/tau} + sum_j w_j e^{s(z,n_j)/tau}) )
//! ```
//!
//! with `s` the cosine similarity. Internally every term is a logit
//! (`s/tau`, plus `ln w_j` for negatives) and the ratio is evaluated as a
//! difference of log-sum-exps.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::nn::Scalar;

/// Added to vector norms inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

static ZERO_NORM_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_zero_norm() {
    if !ZERO_NORM_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("zero-norm embedding in cosine similarity; using epsilon-regularized norm");
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

fn norm<T: Scalar>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// `a.b / ((|a| + eps)(|b| + eps))`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        warn_zero_norm();
    }
    dot(a, b) / ((na + COSINE_EPS) * (nb + COSINE_EPS))
}

/// Adds `g * d cos(a, b) / da` to `out`.
fn cosine_grad_a<T: Scalar>(a: &[T], b: &[T], g: f64, out: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    let (da, db) = (na + COSINE_EPS, nb + COSINE_EPS);
    let ab = dot(a, b);
    let c1 = g / (da * db);
    let c2 = if na > 0.0 { g * ab / (da * da * db * na) } else { 0.0 };
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += c1 * y.as_f64() - c2 * x.as_f64();
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss for a single anchor. Negatives with weight 0 drop out.
pub fn multiview_contrastive_loss<T: Scalar>(anchor: &[T], positives: &[&[T]], negatives: &[&[T]], weights: &[f64], tau: f64) -> f64 {
    assert!(!positives.is_empty(), "at least one positive required");
    assert_eq!(negatives.len(), weights.len(), "one weight per negative");
    assert!(tau > 0.0, "temperature must be positive");
    let pos: Vec<f64> = positives.iter().map(|p| cosine_similarity(anchor, p) / tau).collect();
    let neg: Vec<f64> =
        negatives.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(n, &w)| cosine_similarity(anchor, n) / tau + w.ln()).collect();
    contrastive_from_logits(&pos, &neg)
}

/// `logsumexp(pos ∪ neg) − logsumexp(pos)`, exactly 0 without negatives.
pub fn contrastive_from_logits(pos: &[f64], neg: &[f64]) -> f64 {
    if neg.is_empty() {
        return 0.0;
    }
    let all = log_sum_exp(pos.iter().chain(neg).copied());
    let p = log_sum_exp(pos.iter().copied());
    (all - p).max(0.0)
}

/// Mean batch loss and its gradients, laid out like the inputs.
pub struct McGrads<T> {
    pub loss: f64,
    pub d_anchor: Vec<T>,
    pub d_positives: Vec<Vec<T>>,
    pub d_negatives: Vec<Vec<T>>,
}

/// Batch contrastive loss: row `b` of `anchor` is contrasted with row `b`
/// of every `positives[i]` and of every `negatives[j]` (already gathered so
/// that rows line up).
pub fn multiview_contrastive_batch<T: Scalar>(
    anchor: &[T],
    positives: &[&[T]],
    negatives: &[&[T]],
    weights: &[f64],
    dim: usize,
    tau: f64,
) -> McGrads<T> {
    assert!(!positives.is_empty(), "at least one positive required");
    assert_eq!(negatives.len(), weights.len(), "one weight per negative");
    assert!(tau > 0.0, "temperature must be positive");
    let b = anchor.len() / dim;
    let mut d_anchor = vec![0.0f64; anchor.len()];
    let mut d_pos = vec![vec![0.0f64; anchor.len()]; positives.len()];
    let mut d_neg = vec![vec![0.0f64; anchor.len()]; negatives.len()];
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    let active: Vec<usize> = (0..negatives.len()).filter(|&j| weights[j] > 0.0).collect();
    for row in 0..b {
        let r = row * dim..(row + 1) * dim;
        let z = &anchor[r.clone()];
        let pos: Vec<f64> = positives.iter().map(|p| cosine_similarity(z, &p[r.clone()]) / tau).collect();
        let neg: Vec<f64> = active.iter().map(|&j| cosine_similarity(z, &negatives[j][r.clone()]) / tau + weights[j].ln()).collect();
        total += contrastive_from_logits(&pos, &neg);
        if active.is_empty() {
            continue;
        }
        let all = log_sum_exp(pos.iter().chain(&neg).copied());
        let lp = log_sum_exp(pos.iter().copied());
        // dL/dlogit, scaled by 1/(tau B) to give dL/dsim for the batch mean.
        let scale = inv_b / tau;
        for (i, &l) in pos.iter().enumerate() {
            let g = ((l - all).exp() - (l - lp).exp()) * scale;
            let p = &positives[i][r.clone()];
            cosine_grad_a(z, p, g, &mut d_anchor[r.clone()]);
            cosine_grad_a(p, z, g, &mut d_pos[i][r.clone()]);
        }
        for (k, &j) in active.iter().enumerate() {
            let g = (neg[k] - all).exp() * scale;
            let n = &negatives[j][r.clone()];
            cosine_grad_a(z, n, g, &mut d_anchor[r.clone()]);
            cosine_grad_a(n, z, g, &mut d_neg[j][r.clone()]);
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    McGrads {
        loss: total * inv_b,
        d_anchor: cast(d_anchor),
        d_positives: d_pos.into_iter().map(cast).collect(),
        d_negatives: d_neg.into_iter().map(cast).collect(),
    }
}

/// Mean of `-ln p[label]` over rows of a probability matrix.
pub fn cross_entropy<T: Scalar>(probs: &[T], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    labels.iter().enumerate().map(|(i, &y)| -probs[i * classes + y].as_f64().max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n as f64
}

/// Softmax cross-entropy on logits; returns the mean loss and `dL/dlogits`.
pub fn cross_entropy_with_logits<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let lse = log_sum_exp(row.iter().map(|v| v.as_f64()));
        total += lse - row[y].as_f64();
        for k in 0..classes {
            let p = (row[k].as_f64() - lse).exp();
            let g = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
            grad[i * classes + k] = T::of(g);
        }
    }
    (total / n as f64, grad)
}

/// Mean squared error and its gradient with respect to `recon`.
pub fn mse<T: Scalar>(recon: &[T], target: &[T]) -> (f64, Vec<T>) {
    assert_eq!(recon.len(), target.len());
    let n = recon.len() as f64;
    let mut grad = Vec::with_capacity(recon.len());
    let mut total = 0.0;
    for (r, t) in recon.iter().zip(target) {
        let d = r.as_f64() - t.as_f64();
        total += d * d;
        grad.push(T::of(2.0 * d / n));
    }
    (total / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn no_negatives_is_zero() {
        let z = [1.0, 0.0];
        assert_eq!(multiview_contrastive_loss::<f64>(&z, &[&[0.0, 1.0]], &[], &[], 0.05), 0.0);
        assert_eq!(multiview_contrastive_loss::<f64>(&z, &[&[0.0, 1.0]], &[&[1.0, 1.0]], &[0.0], 0.05), 0.0);
    }

    #[test]
    fn symmetric_pair_is_ln2() {
        let z = [1.0, 2.0, 3.0];
        let l = multiview_contrastive_loss::<f64>(&z, &[&[3.0, 2.0, 1.0]], &[&[3.0, 2.0, 1.0]], &[1.0], 0.05);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn two_term_case_equals_infonce() {
        let mut r = rng::seeded(2);
        for _ in 0..20 {
            let (z, p, n) = (random_vec(&mut r, 8), random_vec(&mut r, 8), random_vec(&mut r, 8));
            let tau = 0.1;
            let sp = cosine_similarity(&z, &p) / tau;
            let sn = cosine_similarity(&z, &n) / tau;
            let infonce = -(sp.exp() / (sp.exp() + sn.exp())).ln();
            let l = multiview_contrastive_loss(&z, &[&p[..]], &[&n[..]], &[1.0], tau);
            assert!((l - infonce).abs() < 1e-9);
        }
    }

    #[test]
    fn monotone_in_similarities_and_weights() {
        let z = [1.0, 0.0];
        let at = |cos: f64| [cos, (1.0 - cos * cos).sqrt()];
        let l = |sp: f64, sn: f64, w: f64| multiview_contrastive_loss::<f64>(&z, &[&at(sp)], &[&at(sn)], &[w], 0.5);
        assert!(l(0.5, 0.3, 1.0) < l(0.5, 0.4, 1.0));
        assert!(l(0.6, 0.3, 1.0) < l(0.5, 0.3, 1.0));
        assert!(l(0.5, 0.3, 0.5) < l(0.5, 0.3, 1.0));
    }

    #[test]
    fn zero_vector_does_not_produce_nan() {
        let l = multiview_contrastive_loss::<f64>(&[0.0, 0.0], &[&[1.0, 0.0]], &[&[0.0, 1.0]], &[1.0], 0.05);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_per_anchor_mean_and_fd() {
        let mut r = rng::seeded(5);
        let (b, dim, tau) = (3, 5, 0.2);
        let a = random_vec(&mut r, b * dim);
        let p = random_vec(&mut r, b * dim);
        let n1 = random_vec(&mut r, b * dim);
        let n2 = random_vec(&mut r, b * dim);
        let w = [1.0, 0.4];
        let g = multiview_contrastive_batch(&a, &[&p], &[&n1, &n2], &w, dim, tau);
        let mean: f64 = (0..b)
            .map(|i| {
                let s = i * dim..(i + 1) * dim;
                multiview_contrastive_loss(&a[s.clone()], &[&p[s.clone()]], &[&n1[s.clone()], &n2[s.clone()]], &w, tau)
            })
            .sum::<f64>()
            / b as f64;
        assert!((g.loss - mean).abs() < 1e-12);
        let f = |a: &[f64], p: &[f64], n1: &[f64]| multiview_contrastive_batch(a, &[p], &[n1, &n2], &w, dim, tau).loss;
        let h = 1e-6;
        for i in 0..b * dim {
            for (which, analytic) in [(0, g.d_anchor[i]), (1, g.d_positives[0][i]), (2, g.d_negatives[0][i])] {
                let (mut ap, mut pp, mut np) = (a.clone(), p.clone(), n1.clone());
                let (mut am, mut pm, mut nm) = (a.clone(), p.clone(), n1.clone());
                match which {
                    0 => {
                        ap[i] += h;
                        am[i] -= h
                    }
                    1 => {
                        pp[i] += h;
                        pm[i] -= h
                    }
                    _ => {
                        np[i] += h;
                        nm[i] -= h
                    }
                }
                let fd = (f(&ap, &pp, &np) - f(&am, &pm, &nm)) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "{which} {i}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0], &[1, 0], 3), 0.0);
        assert!((cross_entropy(&[0.25f64; 4], &[2], 4) - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy_with_logits(&[0.0f64; 4], &[3], 4);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_fd() {
        let mut r = rng::seeded(8);
        let logits = random_vec(&mut r, 12);
        let labels = [0, 3, 1];
        let (_, g) = cross_entropy_with_logits(&logits, &labels, 4);
        for i in 0..12 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (cross_entropy_with_logits(&p, &labels, 4).0 - cross_entropy_with_logits(&m, &labels, 4).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn mse_examples() {
        let x = [1.0f64, -2.0, 3.5];
        assert_eq!(mse(&x, &x).0, 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert!((mse(&shifted, &x).0 - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn temperature_scaling_invariance(sp in -1.0f64..1.0, sn in proptest::collection::vec(-1.0f64..1.0, 1..5), c in 0.1f64..10.0, tau in 0.01f64..1.0) {
            let pos = [sp / tau];
            let neg: Vec<f64> = sn.iter().map(|s| s / tau).collect();
            let pos_c = [(sp * c) / (tau * c)];
            let neg_c: Vec<f64> = sn.iter().map(|s| (s * c) / (tau * c)).collect();
            let a = contrastive_from_logits(&pos, &neg);
            let b = contrastive_from_logits(&pos_c, &neg_c);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn finite_at_low_temperature(seed in 0u64..500) {
            let mut r = rng::seeded(seed);
            let z = random_vec(&mut r, 16);
            let p = random_vec(&mut r, 16);
            let ns: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut r, 16)).collect();
            let refs: Vec<&[f64]> = ns.iter().map(|v| &v[..]).collect();
            let l = multiview_contrastive_loss(&z, &[&p[..]], &refs, &[1.0; 6], 0.05);
            prop_assert!(l.is_finite() && l >= 0.0);
        }
    }
}
