//! Continuous multi-device streams and their segmentation into windows.

use crate::error::{Error, Result};

use super::{DeviceDescriptor, MultiDeviceDataset};

/// One device's samples with their timestamps (seconds).
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceStream {
    pub timestamps: Vec<f64>,
    /// `[N, C]` row-major.
    pub samples: Vec<f32>,
}

impl DeviceStream {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// A contiguous recording of one subject on every device.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub subject: u32,
    /// One stream per device, in the recording's device order.
    pub streams: Vec<DeviceStream>,
    /// Per-sample class on the reference device's timestamps (`None` = unlabeled).
    pub labels: Option<Vec<Option<usize>>>,
}

/// Raw, unsegmented multi-device recording.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub name: String,
    pub devices: Vec<DeviceDescriptor>,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub sessions: Vec<Session>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentConfig {
    pub window_seconds: f64,
    /// Fraction of a window shared with the next one, in `[0, 1)`.
    pub overlap: f64,
    /// Device whose timestamp grid every other device is resampled onto.
    pub reference_device: usize,
}

impl SegmentConfig {
    pub fn new(window_seconds: f64) -> Self {
        Self { window_seconds, overlap: 0.0, reference_device: 0 }
    }

    /// Samples per window at `rate_hz`; errors unless the product is integral.
    pub fn window_samples(&self, rate_hz: f64) -> Result<usize> {
        let w = self.window_seconds * rate_hz;
        let r = w.round();
        if !(self.window_seconds > 0.0) || (w - r).abs() > 1e-6 || r < 1.0 {
            return Err(Error::Config(format!(
                "window of {} s at {} Hz is not a whole number of samples ({w})",
                self.window_seconds, rate_hz
            )));
        }
        Ok(r as usize)
    }
}

/// Linearly interpolates `src` onto `grid`. Returns the resampled `[grid, C]`
/// values and the half-open range of grid indices inside the source's span.
pub(crate) fn resample_linear(src: &DeviceStream, channels: usize, grid: &[f64]) -> (Vec<f32>, usize, usize) {
    let mut out = vec![0f32; grid.len() * channels];
    let ts = &src.timestamps;
    if ts.is_empty() {
        return (out, 0, 0);
    }
    let (t0, t1) = (ts[0], ts[ts.len() - 1]);
    let tol = 1e-9;
    let first = grid.partition_point(|&g| g < t0 - tol);
    let last = grid.partition_point(|&g| g <= t1 + tol);
    let mut j = 0usize;
    for (gi, &g) in grid.iter().enumerate().take(last).skip(first) {
        while j + 1 < ts.len() && ts[j + 1] <= g + tol {
            j += 1;
        }
        let dst = &mut out[gi * channels..(gi + 1) * channels];
        if j + 1 >= ts.len() || (ts[j] - g).abs() <= tol {
            dst.copy_from_slice(&src.samples[j * channels..(j + 1) * channels]);
        } else {
            let frac = ((g - ts[j]) / (ts[j + 1] - ts[j])).clamp(0.0, 1.0);
            let a = &src.samples[j * channels..(j + 1) * channels];
            let b = &src.samples[(j + 1) * channels..(j + 2) * channels];
            for c in 0..channels {
                dst[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * frac) as f32;
            }
        }
    }
    (out, first, last)
}

fn check_monotonic(stream: &DeviceStream, device: &str) -> Result<()> {
    if stream.timestamps.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::Data(format!("device {device}: timestamps not strictly increasing")));
    }
    Ok(())
}

/// Majority label of a window; `None` when unlabeled samples win or the top
/// two classes tie.
fn majority(labels: &[Option<usize>], classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; classes + 1];
    for l in labels {
        match l {
            Some(c) => counts[*c] += 1,
            None => counts[classes] += 1,
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    let winners: Vec<usize> = (0..=classes).filter(|&c| counts[c] == best).collect();
    match winners.as_slice() {
        [c] if *c < classes => Some(*c),
        _ => None,
    }
}

/// Cuts every session into time-aligned windows.
///
/// Non-reference devices are linearly resampled onto the reference device's
/// timestamps when their clocks differ. A window is kept only if every device
/// covers all of its samples and, for labeled recordings, its samples have a
/// unique majority class; dropped windows are dropped on all devices.
pub fn segment_windows(raw: &RawRecording, cfg: &SegmentConfig) -> Result<MultiDeviceDataset> {
    let d = raw.devices.len();
    if d == 0 {
        return Err(Error::Data("recording has no devices".into()));
    }
    if cfg.reference_device >= d {
        return Err(Error::Config("reference device index out of range".into()));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("overlap {} outside [0, 1)", cfg.overlap)));
    }
    let rate = raw.devices[cfg.reference_device].sampling_rate_hz;
    let w = cfg.window_samples(rate)?;
    let hop = ((w as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    let c = raw.channels;
    let labeled = raw.sessions.iter().any(|s| s.labels.is_some());

    let mut windows: Vec<Vec<f32>> = vec![Vec::new(); d];
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    let mut times = Vec::new();

    for (si, session) in raw.sessions.iter().enumerate() {
        if session.streams.len() != d {
            return Err(Error::Data(format!("session {si}: {} streams for {d} devices", session.streams.len())));
        }
        let reference = &session.streams[cfg.reference_device];
        let grid = &reference.timestamps;
        let n = grid.len();
        if let Some(l) = &session.labels {
            if l.len() != n {
                return Err(Error::Shape(format!("session {si}: {} labels for {n} reference samples", l.len())));
            }
        }
        let mut aligned: Vec<(std::borrow::Cow<'_, [f32]>, usize, usize)> = Vec::with_capacity(d);
        for (k, stream) in session.streams.iter().enumerate() {
            let id = &raw.devices[k].device_id;
            if stream.samples.len() != stream.len() * c {
                return Err(Error::Shape(format!("session {si}, device {id}: sample array does not match timestamps")));
            }
            check_monotonic(stream, id)?;
            let same_rate = (raw.devices[k].sampling_rate_hz - rate).abs() < 1e-9;
            if same_rate && stream.len().abs_diff(n) > w {
                return Err(Error::Alignment(format!(
                    "session {si}: device {id} has {} samples, reference has {n} (differ by more than one window)",
                    stream.len()
                )));
            }
            let identical_clock = stream.len() == n && stream.timestamps.iter().zip(grid).all(|(a, b)| (a - b).abs() < 1e-9);
            if identical_clock {
                aligned.push((std::borrow::Cow::Borrowed(&stream.samples[..]), 0, n));
            } else {
                let (vals, first, last) = resample_linear(stream, c, grid);
                aligned.push((std::borrow::Cow::Owned(vals), first, last));
            }
        }

        let mut start = 0;
        while start + w <= n {
            let end = start + w;
            let covered = aligned.iter().all(|(_, first, last)| *first <= start && end <= *last);
            let label = match &session.labels {
                Some(l) => majority(&l[start..end], raw.class_names.len()),
                None => None,
            };
            let keep = covered && (!labeled || label.is_some());
            if keep {
                for (k, (vals, _, _)) in aligned.iter().enumerate() {
                    windows[k].extend_from_slice(&vals[start * c..end * c]);
                }
                labels.push(label.unwrap_or(0));
                subjects.push(session.subject);
                times.push(grid[start]);
            }
            start += hop;
        }
    }

    let devices = raw
        .devices
        .iter()
        .map(|dd| DeviceDescriptor { sampling_rate_hz: rate, ..dd.clone() })
        .collect();
    MultiDeviceDataset::new(
        raw.name.clone(),
        devices,
        w,
        c,
        windows,
        labeled.then_some(labels),
        subjects,
        times,
        raw.class_names.clone(),
    )
}
