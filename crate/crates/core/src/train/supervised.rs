use std::time::Instant;

use rand::RngCore;

use super::autoencoder::pretrain_autoencoder;
use super::pretrain::pretrain_collossl;
use super::step::supervised_step;
use super::{Convergence, Method, Plateau, TrainConfig, TrainLog};
use crate::data::{sample_label_fraction, LabeledSubset, MultiDeviceDataset};
use crate::error::{Error, Result};
use crate::nn::{freeze_partition, Classifier, ClassifierHead, FeatureExtractor, FreezeMode, Optimizer, Params, TrainableMask, EMBEDDING_DIM};
use crate::rng;
use crate::sampling::epoch_batches;

/// Labeled windows `[n, W, C]` ready for supervised training.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl LabeledBatch {
    pub fn from_subset(ds: &MultiDeviceDataset, subset: &LabeledSubset) -> Result<Self> {
        let (x, y) = subset.gather(ds)?;
        Ok(Self { x, y, width: ds.window_len(), channels: ds.channels(), num_classes: ds.num_classes() })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Supervised training of `model` on `data`, updating only the parameter
/// groups in `mask`.
pub fn fit_classifier(
    mut model: Classifier<f32>,
    data: &LabeledBatch,
    mask: &TrainableMask,
    cfg: &TrainConfig,
    phase: &str,
) -> Result<(Classifier<f32>, TrainLog)> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let started = Instant::now();
    let window = data.width * data.channels;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.finetune_lr);
    let mut dropout_rng = rng::seeded(rng::derive(cfg.seed, &[rng::tag(phase), rng::tag("dropout")]));
    let order_seed = rng::derive(cfg.seed, &[rng::tag(phase), rng::tag("order")]);
    let mut log = TrainLog::new(phase);
    let mut plateau = Plateau::new(cfg.patience, cfg.min_rel_improvement);

    'epochs: for epoch in 0..cfg.finetune_max_epochs {
        let mut total = 0.0;
        let mut correct = 0usize;
        for idx in epoch_batches(data.len(), cfg.finetune_batch(), order_seed, epoch as u64, false) {
            let mut x = Vec::with_capacity(idx.len() * window);
            let mut y = Vec::with_capacity(idx.len());
            for &i in &idx {
                x.extend_from_slice(&data.x[i * window..(i + 1) * window]);
                y.push(data.y[i]);
            }
            let (out, hits) = supervised_step(&model, &x, &y, data.width, mask, Some(&mut dropout_rng as &mut dyn RngCore));
            if !out.loss.is_finite() || !out.grads.tensors().iter().all(|(_, g)| g.iter().all(|v| v.is_finite())) {
                log.convergence = Convergence::NonFiniteLoss;
                log.abort_reason = Some(format!("loss {} at epoch {epoch}, step {}", out.loss, log.final_step));
                break 'epochs;
            }
            opt.step(&mut model, &out.grads, mask);
            log.final_step += 1;
            total += out.loss * idx.len() as f64;
            correct += hits;
        }
        let mean = total / data.len() as f64;
        log.epoch_losses.push(mean);
        log.epoch_accuracy.push(correct as f64 / data.len() as f64);
        if plateau.update(mean) {
            log.convergence = Convergence::Plateau;
            break;
        }
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((model, log))
}

fn new_head(cfg: &TrainConfig, num_classes: usize) -> ClassifierHead<f32> {
    ClassifierHead::new(EMBEDDING_DIM, num_classes, &mut rng::seeded(rng::derive(cfg.seed, &[rng::tag("head")])))
}

fn fresh_extractor(cfg: &TrainConfig, channels: usize) -> FeatureExtractor<f32> {
    FeatureExtractor::new(channels, &mut rng::seeded(rng::derive(cfg.seed, &[rng::tag("extractor")])))
}

/// Adds a classification head to `extractor` and trains it on the labeled
/// anchor windows of `subset`, with `cfg.freeze_mode` deciding which
/// layers move.
pub fn finetune(
    extractor: FeatureExtractor<f32>,
    ds: &MultiDeviceDataset,
    subset: &LabeledSubset,
    cfg: &TrainConfig,
) -> Result<(Classifier<f32>, TrainLog)> {
    cfg.validate()?;
    let data = LabeledBatch::from_subset(ds, subset)?;
    let model = Classifier { extractor, head: new_head(cfg, data.num_classes) };
    fit_classifier(model, &data, &freeze_partition(cfg.freeze_mode), cfg, "finetune")
}

/// A trained anchor classifier and the logs of every phase that built it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub method: Method,
    pub classifier: Classifier<f32>,
    pub logs: Vec<TrainLog>,
    pub labeled_windows: usize,
}

fn label_seed(cfg: &TrainConfig) -> u64 {
    rng::derive(cfg.seed, &[rng::tag("labels")])
}

/// Trains `method` on the (training-fold) dataset `ds`, using labels of the
/// anchor at `cfg.label_fraction` (every device for `SupervisedMulti`).
pub fn train_method(method: Method, ds: &MultiDeviceDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    ds.device_index(&cfg.anchor_id)?;
    let subset = sample_label_fraction(ds, &cfg.anchor_id, cfg.label_fraction, label_seed(cfg))?;
    let mut logs = Vec::new();
    let (classifier, labeled_windows) = match method {
        Method::Collossl => {
            let (ext, log) = pretrain_collossl(&ds.unlabeled(), cfg)?;
            log.ensure_finite()?;
            logs.push(log);
            let (model, log) = finetune(ext, ds, &subset, cfg)?;
            logs.push(log);
            (model, subset.len())
        }
        Method::RandomFrozen | Method::SupervisedSingle => {
            let data = LabeledBatch::from_subset(ds, &subset)?;
            let mode = if method == Method::RandomFrozen { FreezeMode::HeadOnly } else { FreezeMode::AllTrainable };
            let model = Classifier { extractor: fresh_extractor(cfg, ds.channels()), head: new_head(cfg, ds.num_classes()) };
            let (model, log) = fit_classifier(model, &data, &freeze_partition(mode), cfg, method.name())?;
            logs.push(log);
            (model, data.len())
        }
        Method::SupervisedMulti => {
            let mut pooled =
                LabeledBatch { x: Vec::new(), y: Vec::new(), width: ds.window_len(), channels: ds.channels(), num_classes: ds.num_classes() };
            for dev in ds.devices() {
                let s = sample_label_fraction(ds, &dev.device_id, cfg.label_fraction, label_seed(cfg))?;
                let part = LabeledBatch::from_subset(ds, &s)?;
                pooled.x.extend(part.x);
                pooled.y.extend(part.y);
            }
            let model = Classifier { extractor: fresh_extractor(cfg, ds.channels()), head: new_head(cfg, ds.num_classes()) };
            let (model, log) = fit_classifier(model, &pooled, &freeze_partition(FreezeMode::AllTrainable), cfg, method.name())?;
            logs.push(log);
            (model, pooled.len())
        }
        Method::AutoencoderSingle | Method::AutoencoderMulti => {
            let (ae, log) = pretrain_autoencoder(&ds.unlabeled(), cfg, method == Method::AutoencoderMulti)?;
            log.ensure_finite()?;
            logs.push(log);
            let (model, log) = finetune(ae.encoder, ds, &subset, cfg)?;
            logs.push(log);
            (model, subset.len())
        }
    };
    if let Some(last) = logs.last() {
        last.ensure_finite()?;
    }
    Ok(TrainedModel { method, classifier, logs, labeled_windows })
}

/// Baseline trainers; every method except the contrastive one.
pub fn train_baseline(kind: Method, ds: &MultiDeviceDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    if kind == Method::Collossl {
        return Err(Error::Config("collossl is not a baseline".into()));
    }
    train_method(kind, ds, cfg)
}
