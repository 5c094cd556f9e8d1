//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.toml
//! <root>/data/<device_id>.csv      timestamp,ax,ay,az,gx,gy,gz
//! <root>/labels.csv                timestamp,label,subject
//! <root>/windows/<device_id>.f32   little-endian [T, W, C]
//! <root>/windows/<device_id>.shape
//! <root>/windows/index.csv         window,start_time,subject,label
//! ```
//!
//! Raw CSVs share one timeline. `labels.csv` has one row per sample of the
//! reference device; a change of subject starts a new session. Within a
//! session consecutive timestamps may not be further apart than 1.5 sample
//! periods.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::window::{segment_windows, DeviceStream, RawRecording, SegmentConfig, Session};
use super::{DeviceDescriptor, MultiDeviceDataset, Provenance, IMU_CHANNELS, IMU_COLUMNS};

const GAP_TOLERANCE_PERIODS: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDevice {
    pub id: String,
    #[serde(default)]
    pub position: String,
    /// Overrides the dataset-wide rate for this device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate_hz: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub channels: usize,
    pub sampling_rate_hz: f64,
    /// Needed to segment raw CSVs; ignored when `windows/` exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_seconds: Option<f64>,
    #[serde(default)]
    pub overlap: f64,
    /// Device whose clock the others are resampled onto; the first one by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_device: Option<String>,
    pub class_names: Vec<String>,
    pub devices: Vec<ManifestDevice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        write_file(&root.join("manifest.toml"), text.as_bytes())
    }

    pub fn descriptors(&self) -> Vec<DeviceDescriptor> {
        self.devices
            .iter()
            .map(|d| DeviceDescriptor::new(d.id.clone(), d.sampling_rate_hz.unwrap_or(self.sampling_rate_hz), d.position.clone()))
            .collect()
    }

    pub fn reference_index(&self) -> Result<usize> {
        match &self.reference_device {
            None => Ok(0),
            Some(id) => self
                .devices
                .iter()
                .position(|d| &d.id == id)
                .ok_or_else(|| Error::Config(format!("reference device '{id}' not in manifest"))),
        }
    }

    pub fn segment_config(&self) -> Result<SegmentConfig> {
        let window_seconds = self
            .window_seconds
            .ok_or_else(|| Error::Config("manifest needs window_seconds to segment raw streams".into()))?;
        Ok(SegmentConfig { window_seconds, overlap: self.overlap, reference_device: self.reference_index()? })
    }

    fn for_dataset(ds: &MultiDeviceDataset) -> Self {
        let devices = ds.devices();
        let rate = devices[0].sampling_rate_hz;
        Self {
            name: ds.name.clone(),
            channels: ds.channels(),
            sampling_rate_hz: rate,
            window_seconds: Some(ds.window_len() as f64 / rate),
            overlap: 0.0,
            reference_device: None,
            class_names: ds.class_names().to_vec(),
            devices: devices
                .iter()
                .map(|d| ManifestDevice {
                    id: d.device_id.clone(),
                    position: d.position_label.clone(),
                    sampling_rate_hz: (d.sampling_rate_hz != rate).then_some(d.sampling_rate_hz),
                })
                .collect(),
            provenance: Some(ds.provenance.clone()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeFile {
    windows: usize,
    window_len: usize,
    channels: usize,
    dtype: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Ingest { path: path.to_path_buf(), line, msg: format!("{kind:?}") },
    }
}

fn channel_header(channels: usize) -> Vec<String> {
    if channels == IMU_CHANNELS {
        IMU_COLUMNS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..channels).map(|c| format!("c{c}")).collect()
    }
}

/// Writes the windowed archive plus a manifest.
pub fn save_dataset(ds: &MultiDeviceDataset, root: &Path) -> Result<()> {
    Manifest::for_dataset(ds).write(root)?;
    let dir = root.join("windows");
    for (d, desc) in ds.devices().iter().enumerate() {
        let bytes: Vec<u8> = ds.device_windows(d).iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&dir.join(format!("{}.f32", desc.device_id)), &bytes)?;
        let shape = ShapeFile {
            windows: ds.num_windows(),
            window_len: ds.window_len(),
            channels: ds.channels(),
            dtype: "f32le".into(),
        };
        let text = toml::to_string(&shape).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&dir.join(format!("{}.shape", desc.device_id)), text.as_bytes())?;
    }
    let index = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index).map_err(|e| csv_error(&index, e))?;
    w.write_record(["window", "start_time", "subject", "label"]).map_err(|e| csv_error(&index, e))?;
    for t in 0..ds.num_windows() {
        let label = ds.labels().map(|l| l[t].to_string()).unwrap_or_default();
        w.write_record([t.to_string(), ds.window_times()[t].to_string(), ds.subject_ids()[t].to_string(), label])
            .map_err(|e| csv_error(&index, e))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))
}

/// Loads `root`, preferring the windowed archive and otherwise segmenting
/// the raw CSV streams with the manifest's window settings.
pub fn load_dataset(root: &Path) -> Result<MultiDeviceDataset> {
    let manifest = Manifest::read(root)?;
    if root.join("windows").join("index.csv").exists() {
        load_windows(root, &manifest)
    } else {
        let raw = load_raw_with(root, &manifest)?;
        segment_windows(&raw, &manifest.segment_config()?)
    }
}

fn load_windows(root: &Path, manifest: &Manifest) -> Result<MultiDeviceDataset> {
    let dir = root.join("windows");
    let index = dir.join("index.csv");
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(&index).map_err(|e| csv_error(&index, e))?;
    let (mut times, mut subjects, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let mut any_label = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&index, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |msg: String| Error::Ingest { path: index.clone(), line, msg };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", rec.len())));
        }
        times.push(rec[1].trim().parse::<f64>().map_err(|e| bad(format!("start_time: {e}")))?);
        subjects.push(rec[2].trim().parse::<u32>().map_err(|e| bad(format!("subject: {e}")))?);
        let l = rec[3].trim();
        if l.is_empty() {
            labels.push(None);
        } else {
            any_label = true;
            labels.push(Some(l.parse::<usize>().map_err(|e| bad(format!("label: {e}")))?));
        }
    }
    let labels = if any_label {
        Some(labels.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::Data("index.csv mixes labeled and unlabeled windows".into()))?)
    } else {
        None
    };
    let t = times.len();
    let mut windows = Vec::with_capacity(manifest.devices.len());
    let mut window_len = None;
    for dev in &manifest.devices {
        let shape_path = dir.join(format!("{}.shape", dev.id));
        let data_path = dir.join(format!("{}.f32", dev.id));
        if !data_path.exists() {
            return Err(Error::Data(format!("device '{}' listed in manifest but {} is missing", dev.id, data_path.display())));
        }
        let text = fs::read_to_string(&shape_path).map_err(|e| Error::io(&shape_path, e))?;
        let shape: ShapeFile = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", shape_path.display())))?;
        if shape.dtype != "f32le" || shape.channels != manifest.channels || shape.windows != t {
            return Err(Error::Shape(format!(
                "{}: {} windows x {} channels ({}) disagrees with manifest/index ({} x {})",
                shape_path.display(),
                shape.windows,
                shape.channels,
                shape.dtype,
                t,
                manifest.channels
            )));
        }
        if *window_len.get_or_insert(shape.window_len) != shape.window_len {
            return Err(Error::Alignment(format!("device '{}' has a different window length", dev.id)));
        }
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if bytes.len() != t * shape.window_len * shape.channels * 4 {
            return Err(Error::Shape(format!("{}: {} bytes does not match its shape file", data_path.display(), bytes.len())));
        }
        windows.push(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect());
    }
    let mut ds = MultiDeviceDataset::new(
        manifest.name.clone(),
        manifest.descriptors(),
        window_len.unwrap_or(0),
        manifest.channels,
        windows,
        labels,
        subjects,
        times,
        manifest.class_names.clone(),
    )?;
    if let Some(p) = &manifest.provenance {
        ds.provenance = p.clone();
    }
    Ok(ds)
}

/// Writes raw per-device CSVs, `labels.csv` and a manifest. Sessions must
/// follow each other on one timeline.
pub fn save_raw(raw: &RawRecording, root: &Path, segment: Option<&SegmentConfig>) -> Result<()> {
    if raw.devices.is_empty() {
        return Err(Error::Data("recording has no devices".into()));
    }
    let reference = segment.map(|s| s.reference_device).unwrap_or(0);
    let rate = raw.devices[reference].sampling_rate_hz;
    let manifest = Manifest {
        name: raw.name.clone(),
        channels: raw.channels,
        sampling_rate_hz: rate,
        window_seconds: segment.map(|s| s.window_seconds),
        overlap: segment.map(|s| s.overlap).unwrap_or(0.0),
        reference_device: (reference != 0).then(|| raw.devices[reference].device_id.clone()),
        class_names: raw.class_names.clone(),
        devices: raw
            .devices
            .iter()
            .map(|d| ManifestDevice {
                id: d.device_id.clone(),
                position: d.position_label.clone(),
                sampling_rate_hz: (d.sampling_rate_hz != rate).then_some(d.sampling_rate_hz),
            })
            .collect(),
        provenance: None,
    };
    manifest.write(root)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(channel_header(raw.channels));
    for (k, dev) in raw.devices.iter().enumerate() {
        let path = root.join("data").join(format!("{}.csv", dev.device_id));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(&header).map_err(|e| csv_error(&path, e))?;
        let mut last = f64::NEG_INFINITY;
        for s in &raw.sessions {
            let stream = &s.streams[k];
            if stream.timestamps.first().is_some_and(|&t| t <= last) {
                return Err(Error::Data(format!("device {}: sessions overlap in time", dev.device_id)));
            }
            for (i, ts) in stream.timestamps.iter().enumerate() {
                let mut rec = vec![ts.to_string()];
                rec.extend(stream.samples[i * raw.channels..(i + 1) * raw.channels].iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
            }
            last = stream.timestamps.last().copied().unwrap_or(last);
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["timestamp", "label", "subject"]).map_err(|e| csv_error(&path, e))?;
    for s in &raw.sessions {
        for (i, ts) in s.streams[reference].timestamps.iter().enumerate() {
            let label = s.labels.as_ref().and_then(|l| l[i]).map(|c| raw.class_names[c].clone()).unwrap_or_default();
            w.write_record([ts.to_string(), label, s.subject.to_string()]).map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_raw(root: &Path) -> Result<(RawRecording, Manifest)> {
    let manifest = Manifest::read(root)?;
    let raw = load_raw_with(root, &manifest)?;
    Ok((raw, manifest))
}

struct LabelRow {
    timestamp: f64,
    label: Option<usize>,
    subject: u32,
}

fn read_labels(path: &Path, class_names: &[String]) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |msg: String| Error::Ingest { path: path.to_path_buf(), line, msg };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 columns (timestamp,label,subject), found {}", rec.len())));
        }
        let timestamp = rec[0].trim().parse::<f64>().map_err(|e| bad(format!("timestamp: {e}")))?;
        let l = rec[1].trim();
        let label = if l.is_empty() {
            None
        } else if let Some(k) = class_names.iter().position(|c| c == l) {
            Some(k)
        } else {
            match l.parse::<usize>() {
                Ok(k) if k < class_names.len() => Some(k),
                _ => return Err(bad(format!("unknown class '{l}'"))),
            }
        };
        let subject = rec[2].trim().parse::<u32>().map_err(|e| bad(format!("subject: {e}")))?;
        rows.push(LabelRow { timestamp, label, subject });
    }
    Ok(rows)
}

fn read_device_csv(path: &Path, channels: usize) -> Result<(Vec<f64>, Vec<f32>, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() != channels + 1 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("header has {} columns, expected timestamp + {channels} channels", header.len()),
        });
    }
    let (mut ts, mut vals, mut lines) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |msg: String| Error::Ingest { path: path.to_path_buf(), line, msg };
        if rec.len() != channels + 1 {
            return Err(bad(format!("row {line} has {} columns, expected {}", rec.len(), channels + 1)));
        }
        ts.push(rec[0].trim().parse::<f64>().map_err(|e| bad(format!("timestamp: {e}")))?);
        for c in 1..=channels {
            let v = rec[c].trim().parse::<f32>().map_err(|e| bad(format!("column {c}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in column {c}")));
            }
            vals.push(v);
        }
        lines.push(line);
    }
    Ok((ts, vals, lines))
}

fn load_raw_with(root: &Path, manifest: &Manifest) -> Result<RawRecording> {
    let devices = manifest.descriptors();
    let reference = manifest.reference_index()?;
    let c = manifest.channels;
    let labels_path = root.join("labels.csv");
    let rows = read_labels(&labels_path, &manifest.class_names)?;
    // Session boundaries: subject changes along the reference timeline.
    let mut starts: Vec<(usize, f64, u32)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if starts.last().is_none_or(|s| s.2 != r.subject) {
            starts.push((i, r.timestamp, r.subject));
        }
    }
    let mut sessions: Vec<Session> = starts
        .iter()
        .enumerate()
        .map(|(k, &(i, _, subject))| {
            let end = starts.get(k + 1).map(|s| s.0).unwrap_or(rows.len());
            let labels: Vec<Option<usize>> = rows[i..end].iter().map(|r| r.label).collect();
            Session {
                subject,
                streams: vec![DeviceStream { timestamps: Vec::new(), samples: Vec::new() }; devices.len()],
                labels: labels.iter().any(Option::is_some).then_some(labels),
            }
        })
        .collect();
    let any_labels = sessions.iter().any(|s| s.labels.is_some());
    if any_labels {
        for (k, s) in sessions.iter_mut().enumerate() {
            if s.labels.is_none() {
                let n = starts.get(k + 1).map(|x| x.0).unwrap_or(rows.len()) - starts[k].0;
                s.labels = Some(vec![None; n]);
            }
        }
    }

    for (k, dev) in devices.iter().enumerate() {
        let path: PathBuf = root.join("data").join(format!("{}.csv", dev.device_id));
        if !path.exists() {
            return Err(Error::Data(format!("device '{}' listed in manifest but {} is missing", dev.device_id, path.display())));
        }
        let (ts, vals, lines) = read_device_csv(&path, c)?;
        let period = 1.0 / dev.sampling_rate_hz;
        let mut session = 0usize;
        for i in 0..ts.len() {
            while session + 1 < starts.len() && ts[i] >= starts[session + 1].1 - 0.5 * period {
                session += 1;
            }
            let stream = &mut sessions[session].streams[k];
            if let Some(&prev) = stream.timestamps.last() {
                let dt = ts[i] - prev;
                if dt <= 0.0 {
                    return Err(Error::Ingest { path: path.clone(), line: lines[i], msg: "timestamps not increasing".into() });
                }
                if dt > GAP_TOLERANCE_PERIODS * period {
                    return Err(Error::Ingest {
                        path: path.clone(),
                        line: lines[i],
                        msg: format!("timestamp gap of {dt:.4} s exceeds one sample period ({period:.4} s)"),
                    });
                }
            }
            stream.timestamps.push(ts[i]);
            stream.samples.extend_from_slice(&vals[i * c..(i + 1) * c]);
        }
    }
    for s in &sessions {
        let expected = s.labels.as_ref().map(Vec::len);
        if let Some(n) = expected {
            if s.streams[reference].len() != n {
                return Err(Error::Alignment(format!(
                    "subject {}: labels.csv has {n} rows but reference device has {} samples",
                    s.subject,
                    s.streams[reference].len()
                )));
            }
        }
    }
    Ok(RawRecording { name: manifest.name.clone(), devices, channels: c, class_names: manifest.class_names.clone(), sessions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::toy_dataset;
    use crate::data::Split;

    fn raw_fixture(devices: usize, n: usize) -> RawRecording {
        let rate = 50.0;
        let sessions = (0..2u32)
            .map(|s| {
                let t0 = s as f64 * 100.0;
                Session {
                    subject: s + 1,
                    streams: (0..devices)
                        .map(|d| DeviceStream {
                            timestamps: (0..n).map(|i| t0 + i as f64 / rate).collect(),
                            samples: (0..n * 6).map(|i| (i as f32 * 0.37 + d as f32).sin()).collect(),
                        })
                        .collect(),
                    labels: Some((0..n).map(|i| Some((i / 50) % 2)).collect()),
                }
            })
            .collect();
        RawRecording {
            name: "raw".into(),
            devices: (0..devices).map(|d| DeviceDescriptor::new(format!("d{d}"), rate, format!("p{d}"))).collect(),
            channels: 6,
            class_names: vec!["walk".into(), "sit".into()],
            sessions,
        }
    }

    #[test]
    fn windowed_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy_dataset(2, 10, 8, 3);
        ds.provenance.split = Split::Train(1);
        ds.provenance.perturbations.push("heterogeneity".into());
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn raw_round_trip_then_segment() {
        let dir = tempfile::tempdir().unwrap();
        let raw = raw_fixture(3, 200);
        let seg = SegmentConfig::new(1.0);
        save_raw(&raw, dir.path(), Some(&seg)).unwrap();
        let (back, _) = load_raw(dir.path()).unwrap();
        assert_eq!(back, raw);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, segment_windows(&raw, &seg).unwrap());
        assert_eq!(ds.num_windows(), 8);
    }

    #[test]
    fn missing_device_file_names_device() {
        let dir = tempfile::tempdir().unwrap();
        save_raw(&raw_fixture(2, 100), dir.path(), Some(&SegmentConfig::new(1.0))).unwrap();
        fs::remove_file(dir.path().join("data/d1.csv")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("'d1'"), "{err}");
    }

    #[test]
    fn short_row_reports_row_number() {
        let dir = tempfile::tempdir().unwrap();
        save_raw(&raw_fixture(2, 100), dir.path(), Some(&SegmentConfig::new(1.0))).unwrap();
        let path = dir.path().join("data/d0.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[5] = "0.08,1,2,3,4,5".into();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Ingest { line, msg, .. }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("5 columns") || msg.contains("6 columns"), "{msg}");
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn gap_within_session_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut raw = raw_fixture(2, 100);
        for t in raw.sessions[0].streams[1].timestamps.iter_mut().skip(40) {
            *t += 0.5;
        }
        save_raw(&raw, dir.path(), Some(&SegmentConfig::new(1.0))).unwrap();
        assert!(matches!(load_raw(dir.path()), Err(Error::Ingest { .. })));
    }
}
