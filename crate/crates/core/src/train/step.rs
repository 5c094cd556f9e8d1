//! Loss and gradient of one training step for each objective.
//!
//! Generic over [`Scalar`] so the gradient checks can run the exact training
//! code in `f64`.

use rand::RngCore;

use crate::loss::{cross_entropy_with_logits, mse, multiview_contrastive_batch};
use crate::nn::{AutoEncoder, Classifier, FeatureExtractor, GradScope, Scalar, TrainableMask, EMBEDDING_DIM};
use crate::sampling::ContrastiveBatch;

pub struct StepOutput<G> {
    /// Objective value including the L2 term.
    pub loss: f64,
    /// Objective value without the L2 term.
    pub data_loss: f64,
    pub grads: G,
}

fn gather_rows<T: Scalar>(emb: &[T], block: usize, batch: usize, rows: &[usize]) -> Vec<T> {
    let base = block * batch * EMBEDDING_DIM;
    let mut out = Vec::with_capacity(rows.len() * EMBEDDING_DIM);
    for &r in rows {
        out.extend_from_slice(&emb[base + r * EMBEDDING_DIM..base + (r + 1) * EMBEDDING_DIM]);
    }
    out
}

fn scatter_rows<T: Scalar>(d_emb: &mut [T], block: usize, batch: usize, rows: &[usize], grad: &[T]) {
    let base = block * batch * EMBEDDING_DIM;
    for (i, &r) in rows.iter().enumerate() {
        let dst = &mut d_emb[base + r * EMBEDDING_DIM..base + (r + 1) * EMBEDDING_DIM];
        for (d, &g) in dst.iter_mut().zip(&grad[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM]) {
            *d += g;
        }
    }
}

/// Contrastive objective for one batch.
///
/// `device_batches[i]` is the `[B, W, C]` batch of device `i`;
/// `candidate_devices[c]` maps selection candidate `c` to its device index.
/// Every device that takes part is pushed through the extractor in a single
/// forward pass, so all roles see the same parameters.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_step<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    device_batches: &[&[T]],
    anchor_device: usize,
    candidate_devices: &[usize],
    batch: &ContrastiveBatch,
    width: usize,
    tau: f64,
    dropout_rng: Option<&mut dyn RngCore>,
) -> StepOutput<FeatureExtractor<T>> {
    let b = batch.len();
    let mut used = vec![anchor_device];
    used.extend(batch.positives.iter().map(|p| candidate_devices[p.candidate]));
    used.extend(batch.negatives.iter().map(|n| candidate_devices[n.candidate]));
    used.sort_unstable();
    used.dedup();
    let block = |device: usize| used.binary_search(&device).expect("device in use");

    let mut x = Vec::with_capacity(used.len() * device_batches[anchor_device].len());
    for &d in &used {
        x.extend_from_slice(device_batches[d]);
    }
    let rows = used.len() * b;
    let (emb, cache) = extractor.forward(&x, rows, width, dropout_rng);
    assert_eq!(cache.version, extractor.version, "embeddings produced by stale parameters");

    let identity: Vec<usize> = (0..b).collect();
    let anchor = gather_rows(&emb, block(anchor_device), b, &identity);
    let pos: Vec<Vec<T>> =
        batch.positives.iter().map(|p| gather_rows(&emb, block(candidate_devices[p.candidate]), b, &p.rows)).collect();
    let neg: Vec<Vec<T>> =
        batch.negatives.iter().map(|n| gather_rows(&emb, block(candidate_devices[n.candidate]), b, &n.rows)).collect();
    let weights: Vec<f64> = batch.negatives.iter().map(|n| n.weight).collect();
    let pos_refs: Vec<&[T]> = pos.iter().map(Vec::as_slice).collect();
    let neg_refs: Vec<&[T]> = neg.iter().map(Vec::as_slice).collect();
    let mc = multiview_contrastive_batch(&anchor, &pos_refs, &neg_refs, &weights, EMBEDDING_DIM, tau);

    let mut d_emb = vec![T::zero(); emb.len()];
    scatter_rows(&mut d_emb, block(anchor_device), b, &identity, &mc.d_anchor);
    for (p, g) in batch.positives.iter().zip(&mc.d_positives) {
        scatter_rows(&mut d_emb, block(candidate_devices[p.candidate]), b, &p.rows, g);
    }
    for (n, g) in batch.negatives.iter().zip(&mc.d_negatives) {
        scatter_rows(&mut d_emb, block(candidate_devices[n.candidate]), b, &n.rows, g);
    }
    let mut grads = extractor.zeros_like();
    extractor.backward(&x, &cache, &d_emb, &mut grads, GradScope::all());
    extractor.add_l2_grad(&mut grads, &TrainableMask::all());
    StepOutput { loss: mc.loss + extractor.l2_penalty(), data_loss: mc.loss, grads }
}

/// Cross-entropy objective on `n` windows; also returns the number of
/// training-pass predictions that matched the labels.
pub fn supervised_step<T: Scalar>(
    model: &Classifier<T>,
    x: &[T],
    y: &[usize],
    width: usize,
    mask: &TrainableMask,
    dropout_rng: Option<&mut dyn RngCore>,
) -> (StepOutput<Classifier<T>>, usize) {
    let n = y.len();
    let k = model.head.num_classes();
    let (emb, cache) = model.extractor.forward(x, n, width, dropout_rng);
    let (logits, head_cache) = model.head.logits(&emb, n);
    let correct = logits
        .chunks_exact(k)
        .zip(y)
        .filter(|(row, &label)| {
            let best = row.iter().enumerate().fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            best == label
        })
        .count();
    let (ce, d_logits) = cross_entropy_with_logits(&logits, y, k);
    let mut grads = model.zeros_like();
    let d_emb = model.head.backward(&emb, &head_cache, &d_logits, &mut grads.head, mask.any_extractor());
    if let Some(d_emb) = d_emb {
        model.extractor.backward(x, &cache, &d_emb, &mut grads.extractor, GradScope::from_mask(mask));
    }
    model.extractor.add_l2_grad(&mut grads.extractor, mask);
    (StepOutput { loss: ce + model.extractor.l2_penalty(), data_loss: ce, grads }, correct)
}

/// Reconstruction objective on `n` windows of `[W, C]`.
pub fn autoencoder_step<T: Scalar>(
    ae: &AutoEncoder<T>,
    x: &[T],
    n: usize,
    width: usize,
    dropout_rng: Option<&mut dyn RngCore>,
) -> StepOutput<AutoEncoder<T>> {
    let (emb, cache) = ae.encoder.forward(x, n, width, dropout_rng);
    let (recon, dec_cache) = ae.decoder.forward(&emb, n);
    let (loss, d_recon) = mse(&recon, x);
    let mut grads = ae.zeros_like();
    let d_emb = ae.decoder.backward(&emb, &dec_cache, &d_recon, &mut grads.decoder);
    ae.encoder.backward(x, &cache, &d_emb, &mut grads.encoder, GradScope::all());
    ae.encoder.add_l2_grad(&mut grads.encoder, &TrainableMask::all());
    StepOutput { loss: loss + ae.encoder.l2_penalty(), data_loss: loss, grads }
}
