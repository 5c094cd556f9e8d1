//! Training loops: contrastive pretraining, supervised fine-tuning and the
//! baseline trainers.

mod autoencoder;
mod pretrain;
pub mod step;
mod supervised;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FreezeMode, OptimizerKind};
use crate::sampling::NegativeSampling;
use crate::selection::SelectionConfig;

pub use autoencoder::pretrain_autoencoder;
pub use pretrain::pretrain_collossl;
pub use supervised::{finetune, fit_classifier, train_baseline, train_method, LabeledBatch, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub anchor_id: String,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    /// Learning rate of the autoencoder reconstruction phase.
    pub autoencoder_lr: f64,
    pub batch_size: usize,
    /// Fine-tuning batch size; `None` uses `batch_size`.
    pub finetune_batch_size: Option<usize>,
    pub tau: f64,
    /// Epoch cap for pretraining (contrastive or autoencoder).
    pub max_epochs: usize,
    /// Epoch cap for supervised training.
    pub finetune_max_epochs: usize,
    pub patience: usize,
    /// Smallest relative loss improvement that resets patience.
    pub min_rel_improvement: f64,
    pub selection: SelectionConfig,
    pub sampling_mode: NegativeSampling,
    pub freeze_mode: FreezeMode,
    pub optimizer: OptimizerKind,
    pub label_fraction: f64,
    pub seed: u64,
    /// Devices hidden from pretraining.
    pub exclude_devices: Vec<String>,
    /// Select devices once per epoch instead of once per batch.
    pub selection_per_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            anchor_id: String::new(),
            pretrain_lr: 1e-5,
            finetune_lr: 1e-3,
            autoencoder_lr: 1e-3,
            batch_size: 512,
            finetune_batch_size: None,
            tau: 0.05,
            max_epochs: 100,
            finetune_max_epochs: 100,
            patience: 5,
            min_rel_improvement: 1e-4,
            selection: SelectionConfig::default(),
            sampling_mode: NegativeSampling::Asynchronous,
            freeze_mode: FreezeMode::LastConvAndHead,
            optimizer: OptimizerKind::Adam,
            label_fraction: 1.0,
            seed: 0,
            exclude_devices: Vec::new(),
            selection_per_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [("pretrain_lr", self.pretrain_lr), ("finetune_lr", self.finetune_lr), ("autoencoder_lr", self.autoencoder_lr), ("tau", self.tau)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.finetune_batch_size == Some(0) {
            return Err(Error::Config("finetune_batch_size must be positive".into()));
        }
        if self.max_epochs == 0 || self.finetune_max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epoch caps and patience must be positive".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label_fraction {} outside (0, 1]", self.label_fraction)));
        }
        if self.exclude_devices.contains(&self.anchor_id) {
            return Err(Error::Config(format!("anchor '{}' cannot be excluded", self.anchor_id)));
        }
        Ok(())
    }

    pub fn finetune_batch(&self) -> usize {
        self.finetune_batch_size.unwrap_or(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    Plateau,
    MaxEpochs,
    /// A non-finite loss stopped training; the model is the last good state.
    NonFiniteLoss,
}

/// One device-selection decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub epoch: usize,
    pub step: u64,
    pub positives: Vec<String>,
    /// `(device, weight)` for every negative.
    pub negatives: Vec<(String, f64)>,
    /// `(device, MMD)` for every candidate when scores were computed.
    pub mmd: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: String,
    pub epoch_losses: Vec<f64>,
    /// Training-pass accuracy per epoch (supervised phases only).
    pub epoch_accuracy: Vec<f64>,
    pub selections: Vec<SelectionAudit>,
    pub wall_clock_seconds: f64,
    pub final_step: u64,
    pub convergence: Convergence,
    pub abort_reason: Option<String>,
}

impl TrainLog {
    fn new(phase: &str) -> Self {
        Self {
            phase: phase.into(),
            epoch_losses: Vec::new(),
            epoch_accuracy: Vec::new(),
            selections: Vec::new(),
            wall_clock_seconds: 0.0,
            final_step: 0,
            convergence: Convergence::MaxEpochs,
            abort_reason: None,
        }
    }

    /// Numerical error when training stopped on a non-finite loss.
    pub fn ensure_finite(&self) -> Result<()> {
        match (&self.convergence, &self.abort_reason) {
            (Convergence::NonFiniteLoss, reason) => Err(Error::Numerical(format!(
                "{} aborted: {}",
                self.phase,
                reason.as_deref().unwrap_or("non-finite loss")
            ))),
            _ => Ok(()),
        }
    }

    /// Copy with the timing field cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_seconds: 0.0, ..self.clone() }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["phase", "epoch", "loss", "accuracy"]).map_err(csv_err)?;
        for (i, l) in self.epoch_losses.iter().enumerate() {
            let acc = self.epoch_accuracy.get(i).map(|a| a.to_string()).unwrap_or_default();
            w.write_record([self.phase.clone(), i.to_string(), l.to_string(), acc]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_selection_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("epoch,step,positives,negative_weights,mmd\n");
        let join = |v: &[(String, f64)]| v.iter().map(|(d, x)| format!("{d}={x}")).collect::<Vec<_>>().join(";");
        for s in &self.selections {
            body.push_str(&format!("{},{},{},{},{}\n", s.epoch, s.step, s.positives.join(";"), join(&s.negatives), join(&s.mmd)));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Relative-plateau stopping rule.
#[derive(Clone, Debug)]
pub(crate) struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
    min_rel: f64,
}

impl Plateau {
    pub(crate) fn new(patience: usize, min_rel: f64) -> Self {
        Self { best: f64::INFINITY, stale: 0, patience, min_rel }
    }

    /// Records an epoch loss; true once `patience` epochs passed without a
    /// relative improvement of at least `min_rel` over the best loss.
    pub(crate) fn update(&mut self, loss: f64) -> bool {
        let improved = if self.best.is_finite() {
            (self.best - loss) / self.best.abs().max(f64::MIN_POSITIVE) >= self.min_rel
        } else {
            true
        };
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.best = self.best.min(loss);
        self.stale >= self.patience
    }
}

/// Every training method that produces an anchor-device classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Collossl,
    RandomFrozen,
    SupervisedSingle,
    SupervisedMulti,
    AutoencoderSingle,
    AutoencoderMulti,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Collossl,
        Method::RandomFrozen,
        Method::SupervisedSingle,
        Method::SupervisedMulti,
        Method::AutoencoderSingle,
        Method::AutoencoderMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Collossl => "collossl",
            Method::RandomFrozen => "random_frozen",
            Method::SupervisedSingle => "supervised_single",
            Method::SupervisedMulti => "supervised_multi",
            Method::AutoencoderSingle => "autoencoder_single",
            Method::AutoencoderMulti => "autoencoder_multi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_once_anchor_set() {
        let cfg = TrainConfig { anchor_id: "a".into(), ..Default::default() };
        cfg.validate().unwrap();
        assert_eq!((cfg.pretrain_lr, cfg.finetune_lr, cfg.batch_size, cfg.tau), (1e-5, 1e-3, 512, 0.05));
        assert!(TrainConfig { batch_size: 1, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { tau: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { exclude_devices: vec!["a".into()], ..cfg }.validate().is_err());
    }

    #[test]
    fn plateau_waits_for_patience() {
        let mut p = Plateau::new(2, 1e-4);
        assert!(!p.update(1.0));
        assert!(!p.update(0.5));
        assert!(!p.update(0.49999));
        assert!(p.update(0.5));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::parse("supervised-single").unwrap(), Method::SupervisedSingle);
        assert!(Method::parse("bogus").is_err());
    }
}
