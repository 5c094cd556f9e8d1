use std::time::Instant;

use rand::RngCore;

use super::step::contrastive_step;
use super::{Convergence, Plateau, SelectionAudit, TrainConfig, TrainLog};
use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::mmd::to_f64;
use crate::nn::{FeatureExtractor, Optimizer, Params, TrainableMask, MIN_WINDOW};
use crate::rng;
use crate::sampling::{draw_batch, epoch_batches, resolve_contrastive};
use crate::selection::{select_devices, SelectionResult};

fn audit(epoch: usize, step: u64, sel: &SelectionResult) -> SelectionAudit {
    SelectionAudit {
        epoch,
        step,
        positives: sel.positive_ids().into_iter().map(String::from).collect(),
        negatives: sel.negatives.iter().map(|&(c, w)| (sel.candidate_ids[c].clone(), w)).collect(),
        mmd: sel
            .mmd_scores
            .as_ref()
            .map(|s| sel.candidate_ids.iter().cloned().zip(s.iter().copied()).collect())
            .unwrap_or_default(),
    }
}

/// Self-supervised pretraining of the anchor's feature extractor on
/// time-aligned unlabeled windows of every device in `view`.
pub fn pretrain_collossl(view: &UnlabeledView<'_>, cfg: &TrainConfig) -> Result<(FeatureExtractor<f32>, TrainLog)> {
    cfg.validate()?;
    let started = Instant::now();
    let view = view.excluding(&cfg.exclude_devices)?;
    if view.num_devices() < 2 {
        return Err(Error::Config(format!("need ≥ 2 devices for contrastive pretraining, have {}", view.num_devices())));
    }
    let anchor = view.device_position(&cfg.anchor_id)?;
    if view.window_len() < MIN_WINDOW {
        return Err(Error::Config(format!("window of {} samples is shorter than the minimum {MIN_WINDOW}", view.window_len())));
    }
    let t = view.num_windows();
    if t < cfg.batch_size {
        return Err(Error::InsufficientSamples { needed: cfg.batch_size, got: t });
    }
    let candidate_devices: Vec<usize> = (0..view.num_devices()).filter(|&d| d != anchor).collect();
    let candidate_ids: Vec<String> = candidate_devices.iter().map(|&d| view.device(d).device_id.clone()).collect();
    let (w, d) = (view.window_len(), view.window_size());

    let mut ext = FeatureExtractor::<f32>::new(view.channels(), &mut rng::seeded(rng::derive(cfg.seed, &[rng::tag("extractor")])));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.pretrain_lr);
    let mut dropout_rng = rng::seeded(rng::derive(cfg.seed, &[rng::tag("dropout")]));
    let mut sel_rng = rng::seeded(rng::derive(cfg.seed, &[rng::tag("selection")]));
    let mut log = TrainLog::new("pretrain");
    let mut plateau = Plateau::new(cfg.patience, cfg.min_rel_improvement);
    let mask = TrainableMask::all();

    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = epoch_batches(t, cfg.batch_size, cfg.seed, epoch as u64, true);
        let mut epoch_sel: Option<SelectionResult> = None;
        let mut total = 0.0;
        for idx in &batches {
            let data = draw_batch(&view, idx);
            let sel = match (&epoch_sel, cfg.selection_per_epoch) {
                (Some(s), true) => s.clone(),
                _ => {
                    let anchor_f64 = to_f64(&data[anchor]);
                    let cands: Vec<Vec<f64>> = candidate_devices.iter().map(|&c| to_f64(&data[c])).collect();
                    let cand_refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
                    let s = select_devices(&cfg.anchor_id, &anchor_f64, &candidate_ids, &cand_refs, d, &cfg.selection, &mut sel_rng)?;
                    log.selections.push(audit(epoch, log.final_step, &s));
                    epoch_sel = Some(s.clone());
                    s
                }
            };
            let cb = resolve_contrastive(idx, &sel, cfg.sampling_mode, &mut sel_rng)?;
            let refs: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
            let out = contrastive_step(&ext, &refs, anchor, &candidate_devices, &cb, w, cfg.tau, Some(&mut dropout_rng as &mut dyn RngCore));
            let grads_finite = out.grads.tensors().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()));
            if !out.loss.is_finite() || !grads_finite {
                log.convergence = Convergence::NonFiniteLoss;
                log.abort_reason = Some(format!("loss {} at epoch {epoch}, step {}", out.loss, log.final_step));
                break 'epochs;
            }
            opt.step(&mut ext, &out.grads, &mask);
            log.final_step += 1;
            total += out.loss;
        }
        let mean = total / batches.len() as f64;
        log.epoch_losses.push(mean);
        log::debug!("pretrain epoch {epoch}: loss {mean:.6}");
        if plateau.update(mean) {
            log.convergence = Convergence::Plateau;
            break;
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((ext, log))
}
