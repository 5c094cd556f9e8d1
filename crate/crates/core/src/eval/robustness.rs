use serde::{Deserialize, Serialize};

use super::{run_logo_cv, run_logo_cv_with, EvalConfig, ExperimentReport};
use crate::data::{segment_windows, MultiDeviceDataset, RawRecording, SegmentConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::{inject_heterogeneity, inject_misalignment, inject_missing, Perturbation, PerturbationSpec};
use crate::train::Method;

/// Data a robustness grid starts from. Misalignment needs the raw streams.
pub enum RobustnessSource<'a> {
    Windows(&'a MultiDeviceDataset),
    Raw { raw: &'a RawRecording, segment: &'a SegmentConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessLevel {
    pub perturbation: PerturbationSpec,
    pub description: String,
    pub report: ExperimentReport,
    /// Mean macro-F1 minus the unperturbed mean.
    pub delta_mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub method: String,
    pub baseline: ExperimentReport,
    pub levels: Vec<RobustnessLevel>,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("perturbation,mean_f1,std_f1,delta_mean_f1\n");
        out.push_str(&format!("none,{},{},0\n", self.baseline.mean_f1, self.baseline.std_f1));
        for l in &self.levels {
            out.push_str(&format!("\"{}\",{},{},{}\n", l.description, l.report.mean_f1, l.report.std_f1, l.delta_mean_f1));
        }
        out
    }
}

fn with_anchor(spec: &PerturbationSpec, cfg: &EvalConfig) -> PerturbationSpec {
    let mut s = spec.clone();
    if s.anchor.is_none() {
        s.anchor = Some(cfg.train.anchor_id.clone());
    }
    s
}

/// Runs the full pipeline on the unperturbed data and at every level of
/// `specs`. Heterogeneity and misalignment change the data before it is
/// split; missing-device zeroing is applied to each normalized training
/// fold, since only pretraining reads the non-anchor devices.
pub fn run_robustness(source: RobustnessSource<'_>, specs: &[PerturbationSpec], method: Method, cfg: &EvalConfig) -> Result<RobustnessReport> {
    let misaligned = specs.iter().any(|s| matches!(s.perturbation, Perturbation::Misalignment { .. }));
    let base = match (&source, misaligned) {
        (RobustnessSource::Windows(ds), false) => (*ds).clone(),
        (RobustnessSource::Windows(_), true) => {
            return Err(Error::Config("misalignment levels need the raw recording, not windows".into()));
        }
        (RobustnessSource::Raw { raw, segment }, true) => {
            let zero = PerturbationSpec::new(Perturbation::Misalignment { shift_seconds: 0.0 }, 0);
            inject_misalignment(raw, &with_anchor(&zero, cfg), segment)?
        }
        (RobustnessSource::Raw { raw, segment }, false) => segment_windows(raw, segment)?,
    };
    let baseline = run_logo_cv(&base, method, cfg)?;
    let mut levels = Vec::with_capacity(specs.len());
    for spec in specs {
        let spec = with_anchor(spec, cfg);
        let report = match spec.perturbation {
            Perturbation::Heterogeneity { .. } => run_logo_cv(&inject_heterogeneity(&base, &spec)?, method, cfg)?,
            Perturbation::Missing { .. } => {
                let hook = |train: &MultiDeviceDataset, fold: usize| -> Result<MultiDeviceDataset> {
                    let per_fold = PerturbationSpec { seed: rng::derive(spec.seed, &[fold as u64]), ..spec.clone() };
                    Ok(inject_missing(train, &per_fold)?.0)
                };
                run_logo_cv_with(&base, method, cfg, Some(&hook))?
            }
            Perturbation::Misalignment { .. } => {
                let RobustnessSource::Raw { raw, segment } = &source else { unreachable!("checked above") };
                run_logo_cv(&inject_misalignment(raw, &spec, segment)?, method, cfg)?
            }
        };
        log::info!("{}: mean macro-F1 {:.4}", spec.describe(), report.mean_f1);
        levels.push(RobustnessLevel {
            description: spec.describe(),
            delta_mean_f1: report.mean_f1 - baseline.mean_f1,
            perturbation: spec,
            report,
        });
    }
    Ok(RobustnessReport { method: method.name().into(), baseline, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::tests::tiny;
    use crate::synth::{generate_raw, segment_config, SynthConfig};

    #[test]
    fn each_kind_runs_and_reports_deltas() {
        let (ds, cfg) = tiny();
        let specs = [
            PerturbationSpec::new(Perturbation::Heterogeneity { sigma_scale: 0.1, sigma_bias: 0.1 }, 1),
            PerturbationSpec::new(Perturbation::Missing { p_u: 0.5 }, 2),
        ];
        let r = run_robustness(RobustnessSource::Windows(&ds), &specs, Method::RandomFrozen, &cfg).unwrap();
        assert_eq!(r.levels.len(), 2);
        for l in &r.levels {
            assert!((l.delta_mean_f1 - (l.report.mean_f1 - r.baseline.mean_f1)).abs() < 1e-12);
        }
        assert_eq!(r.to_csv().lines().count(), 4);
    }

    #[test]
    fn misalignment_requires_raw() {
        let (ds, cfg) = tiny();
        let spec = [PerturbationSpec::new(Perturbation::Misalignment { shift_seconds: 0.5 }, 0)];
        assert!(run_robustness(RobustnessSource::Windows(&ds), &spec, Method::RandomFrozen, &cfg).is_err());
        let sc = SynthConfig { num_devices: 3, num_classes: 3, num_subjects: 4, windows_per_subject_per_class: 6, ..Default::default() };
        let raw = generate_raw(&sc).unwrap();
        let seg = segment_config(&sc);
        let r = run_robustness(RobustnessSource::Raw { raw: &raw, segment: &seg }, &spec, Method::RandomFrozen, &cfg).unwrap();
        assert_eq!(r.levels[0].perturbation.anchor.as_deref(), Some("device0"));
    }
}
