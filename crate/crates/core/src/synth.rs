//! Synthetic multi-device activity data and the three perturbations used in
//! robustness experiments.
//!
//! Each class has a 6-channel latent motion: a constant gravity direction on
//! the accelerometer axes plus two or three sinusoids. The dominant
//! frequencies of different classes are at least 1 Hz apart. Subjects
//! perturb amplitude, tempo and phase. Device `i` observes the latent signal
//! through a fixed rotation of both sensor triads, a per-channel gain and a
//! bias whose magnitude grows linearly from 0 (device 0) to
//! `device_transform_spread` (last device), plus white noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::window::{segment_windows, DeviceStream, RawRecording, SegmentConfig, Session};
use crate::data::{DeviceDescriptor, MultiDeviceDataset, IMU_CHANNELS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_devices: usize,
    pub num_classes: usize,
    pub num_subjects: usize,
    pub windows_per_subject_per_class: usize,
    pub sampling_rate_hz: f64,
    pub window_seconds: f64,
    pub device_transform_spread: f64,
    pub noise_std: f64,
    /// Standard deviation of per-subject amplitude and tempo changes.
    pub subject_variation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_devices: 5,
            num_classes: 6,
            num_subjects: 8,
            windows_per_subject_per_class: 42,
            sampling_rate_hz: 25.0,
            window_seconds: 2.0,
            device_transform_spread: 0.5,
            noise_std: 0.3,
            subject_variation: 0.1,
            seed: 0,
        }
    }
}

/// Longest run of same-class windows in a generated session.
const MAX_BOUT_WINDOWS: usize = 4;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.num_devices < 2 {
            return fail("num_devices must be at least 2");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.num_subjects < 1 || self.windows_per_subject_per_class < 1 {
            return fail("need at least one subject and one window per class");
        }
        if !(self.sampling_rate_hz > 0.0) {
            return fail("sampling_rate_hz must be positive");
        }
        if !(self.device_transform_spread >= 0.0) || !(self.noise_std >= 0.0) || !(self.subject_variation >= 0.0) {
            return fail("spread, noise and subject variation must be non-negative");
        }
        SegmentConfig::new(self.window_seconds).window_samples(self.sampling_rate_hz)?;
        self.class_spacing()?;
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.window_seconds * self.sampling_rate_hz).round() as usize
    }

    /// Spacing between class dominant frequencies, starting at 1 Hz and
    /// staying below 80 % of Nyquist.
    fn class_spacing(&self) -> Result<f64> {
        let top = 0.4 * self.sampling_rate_hz;
        let spacing = ((top - 1.0) / (self.num_classes - 1) as f64).min(1.5);
        if spacing < 1.0 {
            return Err(Error::Config(format!(
                "{} classes need dominant frequencies 1 Hz apart below {top:.2} Hz; raise sampling_rate_hz",
                self.num_classes
            )));
        }
        Ok(spacing)
    }

    fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("activity{c}")).collect()
    }
}

struct Component {
    freq: f64,
    amp: f64,
    /// Direction over the six channels.
    dir: [f64; IMU_CHANNELS],
}

struct ClassModel {
    gravity: [f64; 3],
    comps: Vec<Component>,
}

struct DeviceView {
    rotation: [[f64; 3]; 3],
    gain: [f64; IMU_CHANNELS],
    bias: [f64; IMU_CHANNELS],
}

fn unit3<R: Rng + ?Sized>(r: &mut R) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: [f64; 3] = [n.sample(r), n.sample(r), n.sample(r)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn unit6<R: Rng + ?Sized>(r: &mut R) -> [f64; IMU_CHANNELS] {
    let (a, g) = (unit3(r), unit3(r));
    let s = std::f64::consts::FRAC_1_SQRT_2;
    [a[0] * s, a[1] * s, a[2] * s, g[0] * s, g[1] * s, g[2] * s]
}

/// Rotation by `angle` about `axis` (Rodrigues).
fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn class_models(cfg: &SynthConfig) -> Result<Vec<ClassModel>> {
    let spacing = cfg.class_spacing()?;
    let top = 0.4 * cfg.sampling_rate_hz;
    Ok((0..cfg.num_classes)
        .map(|c| {
            let mut r = rng::seeded(rng::derive(cfg.seed, &[rng::tag("class"), c as u64]));
            let mut comps = vec![Component { freq: 1.0 + spacing * c as f64, amp: 1.0, dir: unit6(&mut r) }];
            let extra = r.random_range(1..=2);
            for _ in 0..extra {
                comps.push(Component { freq: r.random_range(0.5..top), amp: r.random_range(0.2..0.5), dir: unit6(&mut r) });
            }
            ClassModel { gravity: unit3(&mut r), comps }
        })
        .collect())
}

fn device_views(cfg: &SynthConfig) -> Vec<DeviceView> {
    let d = cfg.num_devices;
    (0..d)
        .map(|i| {
            let m = cfg.device_transform_spread * i as f64 / (d - 1) as f64;
            let mut r = rng::seeded(rng::derive(cfg.seed, &[rng::tag("device"), i as u64]));
            let axis = unit3(&mut r);
            let angle = m * (PI / 2.0) * r.random_range(0.75..1.25);
            let n = Normal::new(0.0, 1.0).unwrap();
            let mut gain = [1.0; IMU_CHANNELS];
            let mut bias = [0.0; IMU_CHANNELS];
            for k in 0..IMU_CHANNELS {
                gain[k] = (0.5 * m * n.sample(&mut r)).exp();
                bias[k] = m * n.sample(&mut r);
            }
            DeviceView { rotation: rotation(axis, angle), gain, bias }
        })
        .collect()
}

/// Continuous per-subject sessions before windowing. Sessions follow each
/// other on one timeline with a 10 s gap; every bout is a whole number of
/// windows long and starts on a window boundary.
pub fn generate_raw(cfg: &SynthConfig) -> Result<RawRecording> {
    cfg.validate()?;
    let classes = class_models(cfg)?;
    let views = device_views(cfg);
    let w = cfg.window_len();
    let rate = cfg.sampling_rate_hz;
    let dt = 1.0 / rate;
    let mut sessions = Vec::with_capacity(cfg.num_subjects);
    let mut t_offset = 0.0;
    for s in 0..cfg.num_subjects {
        let mut r = rng::seeded(rng::derive(cfg.seed, &[rng::tag("subject"), s as u64]));
        let sv = Normal::new(1.0, cfg.subject_variation).unwrap();
        let amp_s = sv.sample(&mut r).max(0.5);
        let tempo = Normal::new(1.0, 0.3 * cfg.subject_variation).unwrap().sample(&mut r).clamp(0.8, 1.2);
        let phases: Vec<Vec<f64>> = classes.iter().map(|m| m.comps.iter().map(|_| r.random_range(0.0..2.0 * PI)).collect()).collect();

        let mut bouts = Vec::new();
        for c in 0..cfg.num_classes {
            let mut left = cfg.windows_per_subject_per_class;
            while left > 0 {
                let len = r.random_range(1..=MAX_BOUT_WINDOWS).min(left);
                bouts.push((c, len));
                left -= len;
            }
        }
        bouts.shuffle(&mut r);

        let n_total: usize = bouts.iter().map(|b| b.1 * w).sum();
        let timestamps: Vec<f64> = (0..n_total).map(|i| t_offset + i as f64 * dt).collect();
        let mut latent = Vec::with_capacity(n_total * IMU_CHANNELS);
        let mut labels = Vec::with_capacity(n_total);
        let mut i = 0usize;
        for &(c, len) in &bouts {
            let model = &classes[c];
            let amp_b = amp_s * Normal::new(1.0, 0.05).unwrap().sample(&mut r);
            let shift = r.random_range(0.0..2.0 * PI);
            for _ in 0..len * w {
                let t = i as f64 * dt;
                let mut v = [0.0; IMU_CHANNELS];
                v[..3].copy_from_slice(&model.gravity);
                for (k, comp) in model.comps.iter().enumerate() {
                    let f = comp.freq * tempo;
                    let phase = phases[c][k] + if k == 0 { 0.0 } else { shift };
                    let a = amp_b * comp.amp * (2.0 * PI * f * t + phase).sin();
                    for (vc, d) in v.iter_mut().zip(&comp.dir) {
                        *vc += a * d;
                    }
                }
                latent.extend_from_slice(&v);
                labels.push(Some(c));
                i += 1;
            }
        }

        let noise = Normal::new(0.0, cfg.noise_std).unwrap();
        let streams = views
            .iter()
            .enumerate()
            .map(|(d, view)| {
                let mut nr = rng::seeded(rng::derive(cfg.seed, &[rng::tag("noise"), s as u64, d as u64]));
                let mut samples = Vec::with_capacity(latent.len());
                for row in latent.chunks_exact(IMU_CHANNELS) {
                    let mut out = [0.0; IMU_CHANNELS];
                    for triad in 0..2 {
                        for a in 0..3 {
                            let mut acc = 0.0;
                            for b in 0..3 {
                                acc += view.rotation[a][b] * row[triad * 3 + b];
                            }
                            out[triad * 3 + a] = acc;
                        }
                    }
                    for ((o, g), b) in out.iter().zip(&view.gain).zip(&view.bias) {
                        let eps = if cfg.noise_std > 0.0 { noise.sample(&mut nr) } else { 0.0 };
                        samples.push((o * g + b + eps) as f32);
                    }
                }
                DeviceStream { timestamps: timestamps.clone(), samples }
            })
            .collect();
        sessions.push(Session { subject: s as u32 + 1, streams, labels: Some(labels) });
        t_offset += n_total as f64 * dt + 10.0;
    }
    Ok(RawRecording {
        name: "synthetic".into(),
        devices: (0..cfg.num_devices).map(|d| DeviceDescriptor::new(format!("device{d}"), rate, format!("position{d}"))).collect(),
        channels: IMU_CHANNELS,
        class_names: cfg.class_names(),
        sessions,
    })
}

pub fn segment_config(cfg: &SynthConfig) -> SegmentConfig {
    SegmentConfig::new(cfg.window_seconds)
}

/// Windowed synthetic dataset: [`generate_raw`] followed by segmentation.
pub fn generate(cfg: &SynthConfig) -> Result<MultiDeviceDataset> {
    segment_windows(&generate_raw(cfg)?, &segment_config(cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    Heterogeneity { sigma_scale: f64, sigma_bias: f64 },
    Missing { p_u: f64 },
    Misalignment { shift_seconds: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    /// Devices to perturb. Empty means every device for heterogeneity and
    /// every non-anchor device otherwise.
    #[serde(default)]
    pub target_devices: Vec<String>,
    /// Device that is never dropped or shifted; the first device when unset.
    #[serde(default)]
    pub anchor: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(perturbation: Perturbation, seed: u64) -> Self {
        Self { perturbation, target_devices: Vec::new(), anchor: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.perturbation {
            Perturbation::Heterogeneity { sigma_scale, sigma_bias } if !(sigma_scale >= 0.0 && sigma_bias >= 0.0) => {
                Err(Error::Config("heterogeneity sigmas must be non-negative".into()))
            }
            Perturbation::Missing { p_u } if !(0.0..=1.0).contains(&p_u) => Err(Error::Config(format!("p_u {p_u} outside [0, 1]"))),
            Perturbation::Misalignment { shift_seconds } if !(shift_seconds >= 0.0) => {
                Err(Error::Config("shift_seconds must be non-negative".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match self.perturbation {
            Perturbation::Heterogeneity { sigma_scale, sigma_bias } => format!("heterogeneity(scale={sigma_scale},bias={sigma_bias})"),
            Perturbation::Missing { p_u } => format!("missing(p_u={p_u})"),
            Perturbation::Misalignment { shift_seconds } => format!("misalignment(shift={shift_seconds}s)"),
        }
    }

    /// Resolves target device indices against `ids`.
    fn targets(&self, ids: &[&str], include_anchor: bool) -> Result<(usize, Vec<usize>)> {
        let anchor = match &self.anchor {
            Some(a) => ids.iter().position(|d| d == a).ok_or_else(|| Error::Config(format!("unknown anchor device '{a}'")))?,
            None => 0,
        };
        if self.target_devices.is_empty() {
            return Ok((anchor, (0..ids.len()).filter(|&i| include_anchor || i != anchor).collect()));
        }
        let mut out = Vec::new();
        for t in &self.target_devices {
            let i = ids.iter().position(|d| d == t).ok_or_else(|| Error::Config(format!("unknown target device '{t}'")))?;
            if i == anchor && !include_anchor {
                return Err(Error::Config(format!("anchor device '{t}' cannot be a target of {}", self.describe())));
            }
            out.push(i);
        }
        Ok((anchor, out))
    }
}

/// `X' = S (X - B)` on one device with per-channel `S` and `B`.
pub fn apply_scale_bias(ds: &mut MultiDeviceDataset, device: usize, scale: &[f32], bias: &[f32]) {
    let c = ds.channels();
    for row in ds.device_windows_mut(device).chunks_exact_mut(c) {
        for k in 0..c {
            row[k] = scale[k] * (row[k] - bias[k]);
        }
    }
}

/// Scale and bias errors drawn once per target device and channel:
/// `S ~ N(1, sigma_scale)`, `B ~ N(0, sigma_bias)`. Must precede normalization.
pub fn inject_heterogeneity(ds: &MultiDeviceDataset, spec: &PerturbationSpec) -> Result<MultiDeviceDataset> {
    spec.validate()?;
    let Perturbation::Heterogeneity { sigma_scale, sigma_bias } = spec.perturbation else {
        return Err(Error::Config("expected a heterogeneity perturbation".into()));
    };
    if ds.provenance.normalized_with.is_some() {
        return Err(Error::Ordering("heterogeneity must be injected before normalization".into()));
    }
    let ids: Vec<&str> = ds.devices().iter().map(|d| d.device_id.as_str()).collect();
    let (_, targets) = spec.targets(&ids, true)?;
    let mut out = ds.clone();
    let c = ds.channels();
    for d in targets {
        let mut r = rng::seeded(rng::derive(spec.seed, &[rng::tag("heterogeneity"), rng::tag(ids[d])]));
        let ns = Normal::new(1.0, sigma_scale).unwrap();
        let nb = Normal::new(0.0, sigma_bias).unwrap();
        let scale: Vec<f32> = (0..c).map(|_| ns.sample(&mut r) as f32).collect();
        let bias: Vec<f32> = (0..c).map(|_| nb.sample(&mut r) as f32).collect();
        apply_scale_bias(&mut out, d, &scale, &bias);
    }
    out.provenance.perturbations.push(spec.describe());
    Ok(out)
}

/// Zeroes whole windows of non-anchor devices, each independently with
/// probability `p_u`. Returns the dataset and the number of zeroed windows.
pub fn inject_missing(ds: &MultiDeviceDataset, spec: &PerturbationSpec) -> Result<(MultiDeviceDataset, usize)> {
    spec.validate()?;
    let Perturbation::Missing { p_u } = spec.perturbation else {
        return Err(Error::Config("expected a missing-device perturbation".into()));
    };
    if ds.provenance.normalized_with.is_none() {
        log::warn!("zeroing windows of an unnormalized dataset; zeros are meant to be post-normalization");
    }
    let ids: Vec<&str> = ds.devices().iter().map(|d| d.device_id.as_str()).collect();
    let (_, targets) = spec.targets(&ids, false)?;
    let mut out = ds.clone();
    let n = ds.window_size();
    let mut zeroed = 0;
    for d in targets {
        let mut r = rng::seeded(rng::derive(spec.seed, &[rng::tag("missing"), rng::tag(ids[d])]));
        let data = out.device_windows_mut(d);
        for t in 0..ds.num_windows() {
            if r.random_bool(p_u) {
                data[t * n..(t + 1) * n].fill(0.0);
                zeroed += 1;
            }
        }
    }
    out.provenance.perturbations.push(spec.describe());
    Ok((out, zeroed))
}

/// Shifts the clocks of non-anchor streams by `shift_seconds` and segments
/// on the anchor's grid; windows a shifted device no longer covers are dropped.
pub fn inject_misalignment(raw: &RawRecording, spec: &PerturbationSpec, segment: &SegmentConfig) -> Result<MultiDeviceDataset> {
    spec.validate()?;
    let Perturbation::Misalignment { shift_seconds } = spec.perturbation else {
        return Err(Error::Config("expected a misalignment perturbation".into()));
    };
    let ids: Vec<&str> = raw.devices.iter().map(|d| d.device_id.as_str()).collect();
    let (anchor, targets) = spec.targets(&ids, false)?;
    let mut shifted = raw.clone();
    if shift_seconds != 0.0 {
        for s in &mut shifted.sessions {
            for &d in &targets {
                for t in &mut s.streams[d].timestamps {
                    *t += shift_seconds;
                }
            }
        }
    }
    let cfg = SegmentConfig { reference_device: anchor, ..*segment };
    let mut ds = segment_windows(&shifted, &cfg)?;
    ds.provenance.perturbations.push(spec.describe());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize;
    use crate::mmd::{compute_mmd, KernelSpec};

    fn small(spread: f64, noise: f64) -> SynthConfig {
        SynthConfig {
            num_devices: 3,
            num_classes: 3,
            num_subjects: 2,
            windows_per_subject_per_class: 4,
            device_transform_spread: spread,
            noise_std: noise,
            ..Default::default()
        }
    }

    #[test]
    fn zero_spread_and_noise_gives_identical_devices() {
        let ds = generate(&small(0.0, 0.0)).unwrap();
        assert_eq!(ds.device_windows(0), ds.device_windows(1));
        assert_eq!(ds.device_windows(0), ds.device_windows(2));
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = small(0.5, 0.2);
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(a.num_windows(), 2 * 3 * 4);
        assert_eq!(a.window_len(), 50);
        let labels = a.labels().unwrap();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 8);
        }
        a.validate().unwrap();
    }

    #[test]
    fn too_many_classes_for_rate_is_config_error() {
        let cfg = SynthConfig { num_classes: 12, sampling_rate_hz: 20.0, window_seconds: 2.5, ..Default::default() };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    fn flat(ds: &MultiDeviceDataset, d: usize) -> Vec<f64> {
        ds.device_windows(d).iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn wider_spread_increases_mmd() {
        let lo = generate(&SynthConfig { device_transform_spread: 0.1, ..small(0.1, 0.1) }).unwrap();
        let hi = generate(&SynthConfig { device_transform_spread: 0.5, ..small(0.5, 0.1) }).unwrap();
        let d = lo.window_size();
        let kernel = KernelSpec::default();
        let m_lo = compute_mmd(&flat(&lo, 0), &flat(&lo, 2), d, &kernel).unwrap().value;
        let m_hi = compute_mmd(&flat(&hi, 0), &flat(&hi, 2), d, &kernel).unwrap().value;
        assert!(m_hi > m_lo, "{m_hi} <= {m_lo}");
    }

    #[test]
    fn nearest_centroid_beats_chance_below_noise_threshold() {
        // Documented separability threshold: noise_std <= 1.0.
        let cfg = SynthConfig { num_subjects: 4, windows_per_subject_per_class: 10, noise_std: 1.0, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        let (n, k) = (ds.window_size(), ds.num_classes());
        let labels = ds.labels().unwrap();
        let train: Vec<usize> = (0..ds.num_windows()).filter(|&t| ds.subject_ids()[t] <= 2).collect();
        let test: Vec<usize> = (0..ds.num_windows()).filter(|&t| ds.subject_ids()[t] > 2).collect();
        let mut centroids = vec![vec![0.0f64; n]; k];
        let mut counts = vec![0usize; k];
        for &t in &train {
            counts[labels[t]] += 1;
            for (c, v) in centroids[labels[t]].iter_mut().zip(ds.window(0, t)) {
                *c += *v as f64;
            }
        }
        for (c, m) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *m as f64);
        }
        let correct = test
            .iter()
            .filter(|&&t| {
                let x = ds.window(0, t);
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - *v as f64).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - *v as f64).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == labels[t]
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 2.0 / k as f64, "accuracy {acc}");
    }

    #[test]
    fn heterogeneity_identity_and_arithmetic() {
        let ds = generate(&small(0.3, 0.1)).unwrap();
        let spec = PerturbationSpec::new(Perturbation::Heterogeneity { sigma_scale: 0.0, sigma_bias: 0.0 }, 1);
        let same = inject_heterogeneity(&ds, &spec).unwrap();
        assert_eq!(same.device_windows(1), ds.device_windows(1));

        let mut constant = ds.clone();
        constant.device_windows_mut(0).fill(3.0);
        apply_scale_bias(&mut constant, 0, &[2.0; 6], &[1.0; 6]);
        assert!(constant.device_windows(0).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn heterogeneity_is_invertible_and_ordered_before_normalization() {
        let ds = generate(&small(0.3, 0.1)).unwrap();
        let mut out = ds.clone();
        let (s, b) = ([1.1f32, 0.9, 1.05, 0.95, 1.2, 0.8], [0.1f32, -0.2, 0.05, 0.0, 0.3, -0.1]);
        apply_scale_bias(&mut out, 1, &s, &b);
        let c = ds.channels();
        for (i, (x, y)) in out.device_windows(1).iter().zip(ds.device_windows(1)).enumerate() {
            let k = i % c;
            assert!((x / s[k] + b[k] - y).abs() < 1e-5);
        }
        let (norm, _) = normalize(&ds, None).unwrap();
        let spec = PerturbationSpec::new(Perturbation::Heterogeneity { sigma_scale: 0.05, sigma_bias: 0.05 }, 1);
        assert!(matches!(inject_heterogeneity(&norm, &spec), Err(Error::Ordering(_))));
    }

    #[test]
    fn missing_boundaries_and_anchor_protection() {
        let ds = generate(&small(0.3, 0.1)).unwrap();
        let none = inject_missing(&ds, &PerturbationSpec::new(Perturbation::Missing { p_u: 0.0 }, 2)).unwrap();
        assert_eq!(none.0, {
            let mut d = ds.clone();
            d.provenance.perturbations.push("missing(p_u=0)".into());
            d
        });
        let mut all = PerturbationSpec::new(Perturbation::Missing { p_u: 1.0 }, 2);
        all.target_devices = vec!["device1".into()];
        let (out, zeroed) = inject_missing(&ds, &all).unwrap();
        assert_eq!(zeroed, ds.num_windows());
        assert!(out.device_windows(1).iter().all(|&v| v == 0.0));
        assert_eq!(out.device_windows(0), ds.device_windows(0));
        all.target_devices = vec!["device0".into()];
        assert!(inject_missing(&ds, &all).is_err());
    }

    #[test]
    fn missing_rate_within_binomial_interval() {
        let cfg = SynthConfig { num_devices: 2, num_classes: 2, num_subjects: 5, windows_per_subject_per_class: 100, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.num_windows(), 1000);
        let (_, zeroed) = inject_missing(&ds, &PerturbationSpec::new(Perturbation::Missing { p_u: 0.2 }, 11)).unwrap();
        assert!((166..=236).contains(&zeroed), "{zeroed}");
    }

    #[test]
    fn misalignment_zero_and_full_window() {
        let cfg = small(0.3, 0.1);
        let raw = generate_raw(&cfg).unwrap();
        let seg = segment_config(&cfg);
        let base = segment_windows(&raw, &seg).unwrap();
        let zero = inject_misalignment(&raw, &PerturbationSpec::new(Perturbation::Misalignment { shift_seconds: 0.0 }, 0), &seg).unwrap();
        assert_eq!(zero.device_windows(1), base.device_windows(1));
        assert_eq!(zero.num_windows(), base.num_windows());

        let shifted =
            inject_misalignment(&raw, &PerturbationSpec::new(Perturbation::Misalignment { shift_seconds: cfg.window_seconds }, 0), &seg)
                .unwrap();
        // One window lost per subject at the session start.
        assert_eq!(shifted.num_windows(), base.num_windows() - cfg.num_subjects);
        for t in 0..shifted.num_windows() {
            let time = shifted.window_times()[t];
            let j = base.window_times().iter().position(|&x| (x - time).abs() < 1e-9).unwrap();
            assert_eq!(shifted.window(0, t), base.window(0, j));
            for (a, b) in shifted.window(1, t).iter().zip(base.window(1, j - 1)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn half_second_shift_is_25_samples_at_50hz() {
        let cfg = SynthConfig { sampling_rate_hz: 50.0, ..small(0.3, 0.0) };
        let raw = generate_raw(&cfg).unwrap();
        let seg = segment_config(&cfg);
        let spec = PerturbationSpec::new(Perturbation::Misalignment { shift_seconds: 0.5 }, 0);
        let shifted = inject_misalignment(&raw, &spec, &seg).unwrap();
        let s = &raw.sessions[0].streams[1].samples;
        let w = shifted.window(1, 0);
        let first_kept = (shifted.window_times()[0] * 50.0).round() as usize;
        for i in 0..100 {
            for c in 0..6 {
                assert!((w[i * 6 + c] - s[(first_kept + i - 25) * 6 + c]).abs() < 1e-5);
            }
        }
    }
}
