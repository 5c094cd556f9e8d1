use std::time::Instant;

use rand::RngCore;

use super::step::autoencoder_step;
use super::{Convergence, Plateau, TrainConfig, TrainLog};
use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::nn::{AutoEncoder, Decoder, FeatureExtractor, Optimizer, Params, TrainableMask, MIN_WINDOW};
use crate::rng;
use crate::sampling::epoch_batches;

/// Trains an encoder/decoder pair on reconstruction of unlabeled windows,
/// either of the anchor alone or pooled over every device of `view`.
pub fn pretrain_autoencoder(view: &UnlabeledView<'_>, cfg: &TrainConfig, pooled: bool) -> Result<(AutoEncoder<f32>, TrainLog)> {
    cfg.validate()?;
    let started = Instant::now();
    let anchor = view.device_position(&cfg.anchor_id)?;
    let (w, c) = (view.window_len(), view.channels());
    if w < MIN_WINDOW {
        return Err(Error::Config(format!("window of {w} samples is shorter than the minimum {MIN_WINDOW}")));
    }
    let devices: Vec<usize> = if pooled { (0..view.num_devices()).collect() } else { vec![anchor] };
    let samples: Vec<(usize, usize)> = devices.iter().flat_map(|&d| (0..view.num_windows()).map(move |t| (d, t))).collect();
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }

    let mut init = rng::seeded(rng::derive(cfg.seed, &[rng::tag("extractor")]));
    let encoder = FeatureExtractor::<f32>::new(c, &mut init);
    let decoder = Decoder::new(w, c, &mut rng::seeded(rng::derive(cfg.seed, &[rng::tag("decoder")])));
    let mut ae = AutoEncoder { encoder, decoder };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.autoencoder_lr);
    let mut dropout_rng = rng::seeded(rng::derive(cfg.seed, &[rng::tag("ae-dropout")]));
    let mut log = TrainLog::new(if pooled { "autoencoder_multi" } else { "autoencoder_single" });
    let mut plateau = Plateau::new(cfg.patience, cfg.min_rel_improvement);
    let mask = TrainableMask::all();
    let order_seed = rng::derive(cfg.seed, &[rng::tag("ae-order")]);

    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = epoch_batches(samples.len(), cfg.batch_size, order_seed, epoch as u64, false);
        let mut total = 0.0;
        for idx in &batches {
            let mut x = Vec::with_capacity(idx.len() * view.window_size());
            for &i in idx {
                let (d, t) = samples[i];
                x.extend_from_slice(view.window(d, t));
            }
            let out = autoencoder_step(&ae, &x, idx.len(), w, Some(&mut dropout_rng as &mut dyn RngCore));
            if !out.loss.is_finite() || !out.grads.tensors().iter().all(|(_, g)| g.iter().all(|v| v.is_finite())) {
                log.convergence = Convergence::NonFiniteLoss;
                log.abort_reason = Some(format!("loss {} at epoch {epoch}, step {}", out.loss, log.final_step));
                break 'epochs;
            }
            opt.step(&mut ae, &out.grads, &mask);
            log.final_step += 1;
            total += out.data_loss * idx.len() as f64;
        }
        let mean = total / samples.len() as f64;
        log.epoch_losses.push(mean);
        log::debug!("autoencoder epoch {epoch}: mse {mean:.6}");
        if plateau.update(mean) {
            log.convergence = Convergence::Plateau;
            break;
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((ae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn reconstruction_error_decreases() {
        let ds = generate(&SynthConfig { num_devices: 2, num_classes: 3, num_subjects: 2, windows_per_subject_per_class: 8, ..Default::default() })
            .unwrap();
        let cfg = TrainConfig { anchor_id: "device0".into(), batch_size: 16, max_epochs: 8, ..Default::default() };
        for pooled in [false, true] {
            let (_, log) = pretrain_autoencoder(&ds.unlabeled(), &cfg, pooled).unwrap();
            assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0], "{:?}", log.epoch_losses);
        }
    }
}
