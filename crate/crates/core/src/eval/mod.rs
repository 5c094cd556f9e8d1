//! Metrics, leave-one-group-out evaluation, experiment sweeps and exports.

mod export;
mod metrics;
mod robustness;
mod sweep;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{normalize, split_groups, MultiDeviceDataset, Split};
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng;
use crate::train::{train_method, Method, TrainConfig};

pub use export::{export_embeddings, load_embeddings};
pub use metrics::{confusion_matrix, macro_f1, mean_std, per_class_f1};
pub use robustness::{run_robustness, RobustnessLevel, RobustnessReport, RobustnessSource};
pub use sweep::{sweep_label_fractions, SweepRow, SweepTable};

/// sha256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("serializable config");
    let text = serde_json::to_string(&canonical).expect("serializable config");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub train: TrainConfig,
    pub num_groups: usize,
    /// Evaluate only the first folds (all when unset).
    pub max_folds: Option<usize>,
    /// Seed of the subject-to-group partition.
    pub split_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), num_groups: 5, max_folds: None, split_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub index: usize,
    pub seed: u64,
    pub heldout_subjects: Vec<u32>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub labeled_windows: usize,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub anchor_id: String,
    pub label_fraction: f64,
    pub per_fold_f1: Vec<f64>,
    pub mean_f1: f64,
    /// Population standard deviation of `per_fold_f1`.
    pub std_f1: f64,
    /// Mean over folds of each class's F1.
    pub per_class_f1: Vec<f64>,
    pub class_names: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub config_fingerprint: String,
    pub runtime_seconds: f64,
}

impl ExperimentReport {
    pub fn without_timing(&self) -> Self {
        Self { runtime_seconds: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// One row per fold plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,label_fraction,fold,macro_f1\n");
        for f in &self.folds {
            out.push_str(&format!("{},{},{},{}\n", self.method, self.label_fraction, f.index, f.macro_f1));
        }
        out.push_str(&format!("{},{},mean,{}\n", self.method, self.label_fraction, self.mean_f1));
        out.push_str(&format!("{},{},std,{}\n", self.method, self.label_fraction, self.std_f1));
        out
    }
}

/// Anchor-device macro-F1 of `model` on every window of `ds`.
pub fn evaluate_classifier(model: &Classifier<f32>, ds: &MultiDeviceDataset, anchor_id: &str) -> Result<(f64, Vec<f64>)> {
    let d = ds.device_index(anchor_id)?;
    let labels = ds.labels().ok_or_else(|| Error::Data("evaluation data has no labels".into()))?;
    if labels.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let (w, n) = (ds.window_len(), ds.window_size());
    let x = ds.device_windows(d);
    let mut predictions = Vec::with_capacity(labels.len());
    for chunk in x.chunks(256 * n) {
        predictions.extend(model.predict(chunk, chunk.len() / n, w));
    }
    let k = ds.num_classes();
    Ok((macro_f1(&predictions, labels, k), per_class_f1(&predictions, labels, k)))
}

/// Derived seed of fold `index`.
pub fn fold_seed(base: u64, index: usize) -> u64 {
    rng::derive(base, &[rng::tag("fold"), index as u64])
}

/// Applied to each normalized training fold before training.
pub type FoldHook<'a> = dyn Fn(&MultiDeviceDataset, usize) -> Result<MultiDeviceDataset> + 'a;

/// Leave-one-group-out evaluation of `method` on `ds`.
pub fn run_logo_cv(ds: &MultiDeviceDataset, method: Method, cfg: &EvalConfig) -> Result<ExperimentReport> {
    run_logo_cv_with(ds, method, cfg, None)
}

/// As [`run_logo_cv`], with an optional transform of each training fold
/// applied after normalization.
pub fn run_logo_cv_with(
    ds: &MultiDeviceDataset,
    method: Method,
    cfg: &EvalConfig,
    train_hook: Option<&FoldHook<'_>>,
) -> Result<ExperimentReport> {
    cfg.train.validate()?;
    if ds.provenance.normalized_with.is_some() {
        return Err(Error::Ordering("cross-validation normalizes each fold; pass unnormalized data".into()));
    }
    let started = Instant::now();
    let folds = split_groups(ds, cfg.num_groups, cfg.split_seed)?;
    let take = cfg.max_folds.unwrap_or(folds.len()).min(folds.len());
    let mut results = Vec::with_capacity(take);
    for fold in folds.into_iter().take(take) {
        let seed = fold_seed(cfg.train.seed, fold.index);
        let train_raw = ds.select_subjects(&fold.train_subjects, Split::Train(fold.index));
        let test_raw = ds.select_subjects(&fold.heldout_subjects, Split::Heldout(fold.index));
        let (mut train, stats) = normalize(&train_raw, None)?;
        let (test, _) = normalize(&test_raw, Some(&stats))?;
        for part in [&train, &test] {
            if part.provenance.normalized_with != Some(Split::Train(fold.index)) {
                return Err(Error::Data(format!("fold {} normalized with statistics from {:?}", fold.index, part.provenance.normalized_with)));
            }
        }
        if let Some(hook) = train_hook {
            train = hook(&train, fold.index)?;
        }
        let tcfg = TrainConfig { seed, ..cfg.train.clone() };
        let model = train_method(method, &train, &tcfg)?;
        let (f1, per_class) = evaluate_classifier(&model.classifier, &test, &cfg.train.anchor_id)?;
        log::info!("{} fold {}: macro-F1 {f1:.4}", method.name(), fold.index);
        results.push(FoldResult {
            index: fold.index,
            seed,
            heldout_subjects: fold.heldout_subjects,
            train_windows: train.num_windows(),
            test_windows: test.num_windows(),
            labeled_windows: model.labeled_windows,
            macro_f1: f1,
            per_class_f1: per_class,
        });
    }
    Ok(assemble(method, ds, cfg, results, started.elapsed().as_secs_f64()))
}

fn assemble(method: Method, ds: &MultiDeviceDataset, cfg: &EvalConfig, folds: Vec<FoldResult>, runtime: f64) -> ExperimentReport {
    let per_fold: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
    let (mean, std) = mean_std(&per_fold);
    let k = ds.num_classes();
    let per_class = (0..k).map(|c| folds.iter().map(|f| f.per_class_f1[c]).sum::<f64>() / folds.len() as f64).collect();
    ExperimentReport {
        method: method.name().into(),
        anchor_id: cfg.train.anchor_id.clone(),
        label_fraction: cfg.train.label_fraction,
        per_fold_f1: per_fold,
        mean_f1: mean,
        std_f1: std,
        per_class_f1: per_class,
        class_names: ds.class_names().to_vec(),
        folds,
        config_fingerprint: fingerprint(&(method, cfg)),
        runtime_seconds: runtime,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    pub(crate) fn tiny() -> (MultiDeviceDataset, EvalConfig) {
        let ds = generate(&SynthConfig { num_devices: 3, num_classes: 3, num_subjects: 4, windows_per_subject_per_class: 6, ..Default::default() })
            .unwrap();
        let train = TrainConfig {
            anchor_id: "device0".into(),
            batch_size: 16,
            pretrain_lr: 1e-3,
            max_epochs: 2,
            finetune_max_epochs: 3,
            finetune_batch_size: Some(32),
            ..Default::default()
        };
        (ds, EvalConfig { train, num_groups: 2, ..Default::default() })
    }

    #[test]
    fn folds_are_disjoint_and_report_consistent() {
        let (ds, cfg) = tiny();
        let r = run_logo_cv(&ds, Method::SupervisedSingle, &cfg).unwrap();
        assert_eq!(r.per_fold_f1.len(), 2);
        let (m, s) = mean_std(&r.per_fold_f1);
        assert!((m - r.mean_f1).abs() < 1e-9 && (s - r.std_f1).abs() < 1e-9);
        let all: Vec<u32> = r.folds.iter().flat_map(|f| f.heldout_subjects.clone()).collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        assert_eq!(sorted, ds.subjects());
        assert!(r.per_fold_f1.iter().all(|f| (0.0..=1.0).contains(f)));
        assert_eq!(r.folds.iter().map(|f| f.train_windows + f.test_windows).collect::<Vec<_>>(), vec![ds.num_windows(); 2]);
    }

    #[test]
    fn same_seed_same_report() {
        let (ds, cfg) = tiny();
        let a = run_logo_cv(&ds, Method::Collossl, &cfg).unwrap();
        let b = run_logo_cv(&ds, Method::Collossl, &cfg).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn fingerprint_ignores_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": [1, 2], "b": 1}"#).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        assert_ne!(fingerprint(&a), fingerprint(&serde_json::json!({"a": [2, 1], "b": 1})));
    }

    #[test]
    fn normalized_input_is_rejected() {
        let (ds, cfg) = tiny();
        let (n, _) = normalize(&ds, None).unwrap();
        assert!(matches!(run_logo_cv(&n, Method::RandomFrozen, &cfg), Err(Error::Ordering(_))));
    }
}
