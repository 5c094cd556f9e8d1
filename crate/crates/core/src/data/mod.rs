//! Time-synchronous multi-device data model.
//!
//! A [`MultiDeviceDataset`] holds `T` windows of `W` samples × `C` channels
//! for each of `D` devices. Window `j` covers the same wall-clock interval on
//! every device, so labels and subject ids are stored once per window.

pub mod adapters;
pub mod io;
pub mod normalize;
pub mod split;
pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_raw, save_dataset, save_raw, Manifest};
pub use normalize::{denormalize, normalize, NormStats};
pub use split::{sample_label_fraction, split_groups, Fold, LabeledSubset};
pub use window::{segment_windows, DeviceStream, RawRecording, SegmentConfig, Session};

/// Number of channels in an IMU sample: 3-axis accelerometer then 3-axis gyroscope.
pub const IMU_CHANNELS: usize = 6;
pub const IMU_COLUMNS: [&str; IMU_CHANNELS] = ["ax", "ay", "az", "gx", "gy", "gz"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub device_id: String,
    pub sampling_rate_hz: f64,
    pub position_label: String,
}

impl DeviceDescriptor {
    pub fn new(device_id: impl Into<String>, sampling_rate_hz: f64, position_label: impl Into<String>) -> Self {
        Self { device_id: device_id.into(), sampling_rate_hz, position_label: position_label.into() }
    }
}

/// Which part of an experiment a dataset (or derived statistic) came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "split", content = "fold")]
pub enum Split {
    #[default]
    Full,
    Train(usize),
    Heldout(usize),
}

/// Provenance carried alongside the arrays so leakage can be asserted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub split: Split,
    /// Split the normalization statistics were computed on, once normalized.
    pub normalized_with: Option<Split>,
    /// Perturbations applied, in order.
    pub perturbations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDeviceDataset {
    pub name: String,
    devices: Vec<DeviceDescriptor>,
    window_len: usize,
    channels: usize,
    /// Per device, `[T, W, C]` row-major.
    windows: Vec<Vec<f32>>,
    labels: Option<Vec<usize>>,
    subject_ids: Vec<u32>,
    /// Start time of each window on the shared clock, seconds.
    window_times: Vec<f64>,
    class_names: Vec<String>,
    pub provenance: Provenance,
}

impl MultiDeviceDataset {
    /// Builds a dataset, checking every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        devices: Vec<DeviceDescriptor>,
        window_len: usize,
        channels: usize,
        windows: Vec<Vec<f32>>,
        labels: Option<Vec<usize>>,
        subject_ids: Vec<u32>,
        window_times: Vec<f64>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            devices,
            window_len,
            channels,
            windows,
            labels,
            subject_ids,
            window_times,
            class_names,
            provenance: Provenance::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::Data("dataset has no devices".into()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if !(d.sampling_rate_hz > 0.0) {
                return Err(Error::Data(format!("device {} has non-positive sampling rate", d.device_id)));
            }
            if self.devices[..i].iter().any(|o| o.device_id == d.device_id) {
                return Err(Error::Data(format!("duplicate device id {}", d.device_id)));
            }
        }
        if self.windows.len() != self.devices.len() {
            return Err(Error::Shape(format!("{} window arrays for {} devices", self.windows.len(), self.devices.len())));
        }
        let t = self.subject_ids.len();
        let per = self.window_len * self.channels;
        for (d, w) in self.devices.iter().zip(&self.windows) {
            if w.len() != t * per {
                return Err(Error::Alignment(format!(
                    "device {} holds {} values, expected {} windows of {}x{}",
                    d.device_id,
                    w.len(),
                    t,
                    self.window_len,
                    self.channels
                )));
            }
            if let Some(pos) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "device {}: non-finite value in window {}",
                    d.device_id,
                    pos / per.max(1)
                )));
            }
        }
        if self.window_times.len() != t {
            return Err(Error::Shape("window time index length differs from window count".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != t {
                return Err(Error::Shape(format!("{} labels for {} windows", labels.len(), t)));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.class_names.len()) {
                return Err(Error::Data(format!("label {bad} outside [0, {})", self.class_names.len())));
            }
        }
        Ok(())
    }

    pub fn devices(&self) -> &[DeviceDescriptor] {
        &self.devices
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn num_windows(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Values per window (`W * C`).
    pub fn window_size(&self) -> usize {
        self.window_len * self.channels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn subject_ids(&self) -> &[u32] {
        &self.subject_ids
    }

    pub fn window_times(&self) -> &[f64] {
        &self.window_times
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn device_index(&self, device_id: &str) -> Result<usize> {
        self.devices
            .iter()
            .position(|d| d.device_id == device_id)
            .ok_or_else(|| Error::Config(format!("unknown device '{device_id}'")))
    }

    /// All windows of one device, `[T, W, C]`.
    pub fn device_windows(&self, device: usize) -> &[f32] {
        &self.windows[device]
    }

    pub(crate) fn device_windows_mut(&mut self, device: usize) -> &mut [f32] {
        &mut self.windows[device]
    }

    pub fn window(&self, device: usize, t: usize) -> &[f32] {
        let n = self.window_size();
        &self.windows[device][t * n..(t + 1) * n]
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s = self.subject_ids.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Copies the given windows (in order) into a new dataset.
    pub fn select_windows(&self, indices: &[usize]) -> Self {
        let n = self.window_size();
        let windows = self
            .windows
            .iter()
            .map(|w| {
                let mut out = Vec::with_capacity(indices.len() * n);
                for &t in indices {
                    out.extend_from_slice(&w[t * n..(t + 1) * n]);
                }
                out
            })
            .collect();
        Self {
            name: self.name.clone(),
            devices: self.devices.clone(),
            window_len: self.window_len,
            channels: self.channels,
            windows,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&t| l[t]).collect()),
            subject_ids: indices.iter().map(|&t| self.subject_ids[t]).collect(),
            window_times: indices.iter().map(|&t| self.window_times[t]).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Windows belonging to any of `subjects`, tagged with `split`.
    pub fn select_subjects(&self, subjects: &[u32], split: Split) -> Self {
        let idx: Vec<usize> = (0..self.num_windows()).filter(|&t| subjects.contains(&self.subject_ids[t])).collect();
        let mut out = self.select_windows(&idx);
        out.provenance.split = split;
        out
    }

    /// Copy restricted to the listed devices, in the given order.
    pub fn select_devices(&self, device_ids: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = device_ids.iter().map(|id| self.device_index(id)).collect::<Result<_>>()?;
        let mut out = self.clone();
        out.devices = idx.iter().map(|&i| self.devices[i].clone()).collect();
        out.windows = idx.iter().map(|&i| self.windows[i].clone()).collect();
        Ok(out)
    }

    /// Label-free view used by self-supervised pretraining.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView { ds: self, devices: (0..self.num_devices()).collect() }
    }

    /// Same windows with labels removed.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        out.labels = None;
        out
    }
}

/// Read-only view exposing windows and device metadata but never labels.
///
/// Pretraining entry points take this type, so they cannot read labels:
///
/// ```compile_fail
/// let ds = collossl::synth::generate(&Default::default()).unwrap();
/// let view = ds.unlabeled();
/// let _ = view.labels();
/// ```
#[derive(Clone, Debug)]
pub struct UnlabeledView<'a> {
    ds: &'a MultiDeviceDataset,
    devices: Vec<usize>,
}

impl<'a> UnlabeledView<'a> {
    /// Drops the listed devices from the view.
    pub fn excluding(&self, device_ids: &[String]) -> Result<Self> {
        for id in device_ids {
            self.ds.device_index(id)?;
        }
        let devices = self
            .devices
            .iter()
            .copied()
            .filter(|&i| !device_ids.contains(&self.ds.devices[i].device_id))
            .collect();
        Ok(Self { ds: self.ds, devices })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn device(&self, i: usize) -> &DeviceDescriptor {
        &self.ds.devices[self.devices[i]]
    }

    pub fn device_ids(&self) -> Vec<&str> {
        self.devices.iter().map(|&i| self.ds.devices[i].device_id.as_str()).collect()
    }

    pub fn device_position(&self, device_id: &str) -> Result<usize> {
        self.devices
            .iter()
            .position(|&i| self.ds.devices[i].device_id == device_id)
            .ok_or_else(|| Error::Config(format!("device '{device_id}' not available for pretraining")))
    }

    pub fn num_windows(&self) -> usize {
        self.ds.num_windows()
    }

    pub fn window_len(&self) -> usize {
        self.ds.window_len
    }

    pub fn channels(&self) -> usize {
        self.ds.channels
    }

    pub fn window_size(&self) -> usize {
        self.ds.window_size()
    }

    pub fn window(&self, i: usize, t: usize) -> &'a [f32] {
        self.ds.window(self.devices[i], t)
    }

    pub fn window_times(&self) -> &'a [f64] {
        &self.ds.window_times
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    /// Small deterministic dataset: value = device*1000 + window*10 + channel.
    pub fn toy_dataset(devices: usize, t: usize, w: usize, classes: usize) -> MultiDeviceDataset {
        let c = IMU_CHANNELS;
        let descs = (0..devices).map(|d| DeviceDescriptor::new(format!("dev{d}"), 50.0, format!("pos{d}"))).collect();
        let windows = (0..devices)
            .map(|d| {
                (0..t * w * c)
                    .map(|i| (d * 1000 + (i / (w * c)) * 10 + i % c) as f32 + (i % w) as f32 * 0.01)
                    .collect()
            })
            .collect();
        MultiDeviceDataset::new(
            "toy",
            descs,
            w,
            c,
            windows,
            Some((0..t).map(|i| i % classes).collect()),
            (0..t).map(|i| (i % 4) as u32).collect(),
            (0..t).map(|i| i as f64).collect(),
            (0..classes).map(|k| format!("class{k}")).collect(),
        )
        .unwrap()
    }
}
