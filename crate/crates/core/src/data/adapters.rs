//! Readers for the public multi-device activity datasets, producing a
//! [`RawRecording`] ready for [`segment_windows`](super::segment_windows).
//!
//! * RealWorld (HAR): extracted per-subject CSVs,
//!   `proband<N>/data/{acc,Gyroscope}_<activity>_<position>.csv`, columns
//!   `id,attr_time,attr_x,attr_y,attr_z` with `attr_time` in milliseconds.
//! * PAMAP2: `subject<N>.dat`, whitespace separated, 54 columns, 100 Hz.
//! * Opportunity: `S<N>-<run>.dat`, whitespace separated, 250 columns, 30 Hz.
//!
//! Rows with missing values or the null class break a recording into
//! separate sessions, so no window straddles a gap.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::window::{resample_linear, DeviceStream, RawRecording, Session};
use super::{DeviceDescriptor, IMU_CHANNELS};

pub const REALWORLD_ACTIVITIES: [&str; 8] =
    ["climbingdown", "climbingup", "jumping", "lying", "running", "sitting", "standing", "walking"];
pub const REALWORLD_POSITIONS: [&str; 7] = ["chest", "forearm", "head", "shin", "thigh", "upperarm", "waist"];
pub const REALWORLD_RATE_HZ: f64 = 50.0;

#[derive(Clone, Debug)]
pub struct RealWorldOptions {
    pub positions: Vec<String>,
    /// All `proband*` directories when `None`.
    pub subjects: Option<Vec<u32>>,
    pub sampling_rate_hz: f64,
}

impl Default for RealWorldOptions {
    fn default() -> Self {
        Self {
            positions: REALWORLD_POSITIONS.iter().map(|s| s.to_string()).collect(),
            subjects: None,
            sampling_rate_hz: REALWORLD_RATE_HZ,
        }
    }
}

fn read_triaxial(path: &Path) -> Result<(Vec<f64>, Vec<f32>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<(f64, [f32; 3])> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |msg: String| Error::Ingest { path: path.to_path_buf(), line, msg };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 columns (id,attr_time,attr_x,attr_y,attr_z), found {}", rec.len())));
        }
        let t: f64 = rec[1].trim().parse().map_err(|e| bad(format!("attr_time: {e}")))?;
        let mut v = [0f32; 3];
        for k in 0..3 {
            v[k] = rec[2 + k].trim().parse().map_err(|e| bad(format!("axis {k}: {e}")))?;
        }
        if v.iter().all(|x| x.is_finite()) {
            rows.push((t / 1000.0, v));
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    rows.dedup_by(|b, a| b.0 <= a.0);
    Ok((rows.iter().map(|r| r.0).collect(), rows.iter().flat_map(|r| r.1).collect()))
}

fn proband_dirs(root: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(n) = name.strip_prefix("proband").and_then(|n| n.parse::<u32>().ok()) {
            out.push((n, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Reads the extracted RealWorld layout. Each (subject, activity) recording
/// becomes one session on a uniform grid spanning the interval every
/// selected device covers; accelerometer and gyroscope are resampled onto it.
pub fn load_realworld(root: &Path, opts: &RealWorldOptions) -> Result<RawRecording> {
    if opts.positions.len() < 2 {
        return Err(Error::Config("RealWorld needs at least two positions".into()));
    }
    for p in &opts.positions {
        if !REALWORLD_POSITIONS.contains(&p.as_str()) {
            return Err(Error::Config(format!("unknown RealWorld position '{p}'")));
        }
    }
    let mut probands = proband_dirs(root)?;
    if let Some(keep) = &opts.subjects {
        probands.retain(|(n, _)| keep.contains(n));
    }
    if probands.is_empty() {
        return Err(Error::Data(format!("no proband directories under {}", root.display())));
    }
    let period = 1.0 / opts.sampling_rate_hz;
    let mut sessions = Vec::new();
    for (subject, dir) in &probands {
        let data = dir.join("data");
        for (class, activity) in REALWORLD_ACTIVITIES.iter().enumerate() {
            let mut parts = Vec::new();
            let mut complete = true;
            for pos in &opts.positions {
                let acc = data.join(format!("acc_{activity}_{pos}.csv"));
                let gyr = data.join(format!("Gyroscope_{activity}_{pos}.csv"));
                if !acc.exists() || !gyr.exists() {
                    complete = false;
                    break;
                }
                parts.push((read_triaxial(&acc)?, read_triaxial(&gyr)?));
            }
            if !complete {
                log::warn!("proband{subject}: {activity} missing for some position; skipped");
                continue;
            }
            let start = parts.iter().flat_map(|(a, g)| [a.0.first(), g.0.first()]).map(|t| t.copied().unwrap_or(f64::INFINITY)).fold(f64::NEG_INFINITY, f64::max);
            let end = parts.iter().flat_map(|(a, g)| [a.0.last(), g.0.last()]).map(|t| t.copied().unwrap_or(f64::NEG_INFINITY)).fold(f64::INFINITY, f64::min);
            if !(end > start) {
                log::warn!("proband{subject}: {activity} recordings do not overlap; skipped");
                continue;
            }
            let n = ((end - start) / period).floor() as usize + 1;
            let grid: Vec<f64> = (0..n).map(|i| start + i as f64 * period).collect();
            let streams = parts
                .iter()
                .map(|((at, av), (gt, gv))| {
                    let (a, _, _) = resample_linear(&DeviceStream { timestamps: at.clone(), samples: av.clone() }, 3, &grid);
                    let (g, _, _) = resample_linear(&DeviceStream { timestamps: gt.clone(), samples: gv.clone() }, 3, &grid);
                    let samples = a.chunks_exact(3).zip(g.chunks_exact(3)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect();
                    DeviceStream { timestamps: grid.clone(), samples }
                })
                .collect();
            sessions.push(Session { subject: *subject, streams, labels: Some(vec![Some(class); n]) });
        }
    }
    sessions.sort_by(|a, b| (a.subject, a.streams[0].timestamps[0]).partial_cmp(&(b.subject, b.streams[0].timestamps[0])).unwrap());
    Ok(RawRecording {
        name: "realworld".into(),
        devices: opts.positions.iter().map(|p| DeviceDescriptor::new(p.clone(), opts.sampling_rate_hz, p.clone())).collect(),
        channels: IMU_CHANNELS,
        class_names: REALWORLD_ACTIVITIES.iter().map(|s| s.to_string()).collect(),
        sessions,
    })
}

/// Column layout of one whitespace-separated table format.
struct TableLayout<'a> {
    /// 0-based timestamp column and its scale to seconds.
    time_col: usize,
    time_scale: f64,
    label_col: usize,
    /// (device id, 0-based acc columns, 0-based gyro columns)
    devices: &'a [(&'a str, [usize; 3], [usize; 3])],
    /// Raw label value → class index; anything else is dropped.
    classes: &'a [(u32, &'a str)],
    rate_hz: f64,
}

fn read_table(path: &Path, layout: &TableLayout<'_>, subject: u32, target_rate: Option<f64>) -> Result<Vec<Session>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ncols = layout.devices.iter().flat_map(|(_, a, g)| a.iter().chain(g)).chain([&layout.time_col, &layout.label_col]).max().copied().unwrap_or(0) + 1;
    let d = layout.devices.len();
    let period = 1.0 / layout.rate_hz;
    let mut sessions = Vec::new();
    let mut run_t: Vec<f64> = Vec::new();
    let mut run_x: Vec<f32> = Vec::new();
    let mut run_y: Vec<Option<usize>> = Vec::new();

    let mut flush = |t: &mut Vec<f64>, x: &mut Vec<f32>, y: &mut Vec<Option<usize>>| {
        if t.len() >= 2 {
            sessions.push((std::mem::take(t), std::mem::take(x), std::mem::take(y)));
        }
        t.clear();
        x.clear();
        y.clear();
    };

    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < ncols {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("row has {} columns, expected at least {ncols}", fields.len()),
            });
        }
        let parse = |c: usize| -> Result<f64> {
            fields[c].parse::<f64>().map_err(|e| Error::Ingest { path: path.to_path_buf(), line: lineno + 1, msg: format!("column {}: {e}", c + 1) })
        };
        let t = parse(layout.time_col)? * layout.time_scale;
        let raw_label = parse(layout.label_col)?;
        let class = layout.classes.iter().position(|(v, _)| raw_label.is_finite() && *v as f64 == raw_label);
        let mut row = Vec::with_capacity(d * IMU_CHANNELS);
        for (_, acc, gyr) in layout.devices {
            for &c in acc.iter().chain(gyr) {
                row.push(parse(c)? as f32);
            }
        }
        let valid = class.is_some() && row.iter().all(|v| v.is_finite());
        let contiguous = run_t.last().is_none_or(|&p| t - p > 0.0 && t - p <= 1.5 * period);
        if !valid || !contiguous {
            flush(&mut run_t, &mut run_x, &mut run_y);
        }
        if valid {
            run_t.push(t);
            run_x.extend_from_slice(&row);
            run_y.push(class);
        }
    }
    flush(&mut run_t, &mut run_x, &mut run_y);

    let width = d * IMU_CHANNELS;
    Ok(sessions
        .into_iter()
        .map(|(t, x, y)| {
            let (t, x, y) = match target_rate {
                Some(rate) if (rate - layout.rate_hz).abs() > 1e-9 => {
                    let n = ((t[t.len() - 1] - t[0]) * rate).floor() as usize + 1;
                    let grid: Vec<f64> = (0..n).map(|i| t[0] + i as f64 / rate).collect();
                    let (xs, _, _) = resample_linear(&DeviceStream { timestamps: t.clone(), samples: x }, width, &grid);
                    let ys = grid
                        .iter()
                        .map(|g| {
                            let j = t.partition_point(|v| v <= g).saturating_sub(1);
                            let j = if j + 1 < t.len() && (t[j + 1] - g).abs() < (g - t[j]).abs() { j + 1 } else { j };
                            y[j]
                        })
                        .collect();
                    (grid, xs, ys)
                }
                _ => (t, x, y),
            };
            let streams = (0..d)
                .map(|k| DeviceStream {
                    timestamps: t.clone(),
                    samples: x.chunks_exact(width).flat_map(|r| r[k * IMU_CHANNELS..(k + 1) * IMU_CHANNELS].iter().copied()).collect(),
                })
                .collect();
            Session { subject, streams, labels: Some(y) }
        })
        .collect())
}

fn table_recording(name: &str, layout: &TableLayout<'_>, files: Vec<(u32, PathBuf)>, target_rate: Option<f64>) -> Result<RawRecording> {
    if files.is_empty() {
        return Err(Error::Data(format!("no {name} files found")));
    }
    let mut sessions = Vec::new();
    for (subject, path) in files {
        sessions.extend(read_table(&path, layout, subject, target_rate)?);
    }
    let rate = target_rate.unwrap_or(layout.rate_hz);
    Ok(RawRecording {
        name: name.into(),
        devices: layout.devices.iter().map(|(id, _, _)| DeviceDescriptor::new(*id, rate, *id)).collect(),
        channels: IMU_CHANNELS,
        class_names: layout.classes.iter().map(|(_, n)| n.to_string()).collect(),
        sessions,
    })
}

fn numbered_files(root: &Path, prefix: &str, suffix: &str) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let e = e.map_err(|e| Error::io(root, e))?;
        let name = e.file_name().to_string_lossy().to_string();
        let Some(rest) = name.strip_prefix(prefix) else { continue };
        if !name.ends_with(suffix) {
            continue;
        }
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(n) = digits.parse() {
            out.push((n, e.path()));
        }
    }
    out.sort();
    Ok(out)
}

const PAMAP2_CLASSES: [(u32, &str); 12] = [
    (1, "lying"),
    (2, "sitting"),
    (3, "standing"),
    (4, "walking"),
    (5, "running"),
    (6, "cycling"),
    (7, "nordic_walking"),
    (12, "ascending_stairs"),
    (13, "descending_stairs"),
    (16, "vacuum_cleaning"),
    (17, "ironing"),
    (24, "rope_jumping"),
];

/// Reads `subject<N>.dat` files: hand, chest and ankle IMUs (±16 g
/// accelerometer and gyroscope), protocol activities only.
pub fn load_pamap2(root: &Path, target_rate_hz: Option<f64>) -> Result<RawRecording> {
    // Each IMU block is 17 columns: temperature, acc16 (3), acc6 (3), gyro (3), ...
    let block = |base: usize| ([base + 1, base + 2, base + 3], [base + 7, base + 8, base + 9]);
    let (h, c, a) = (block(3), block(20), block(37));
    let devices = [("hand", h.0, h.1), ("chest", c.0, c.1), ("ankle", a.0, a.1)];
    let layout = TableLayout { time_col: 0, time_scale: 1.0, label_col: 1, devices: &devices, classes: &PAMAP2_CLASSES, rate_hz: 100.0 };
    table_recording("pamap2", &layout, numbered_files(root, "subject", ".dat")?, target_rate_hz)
}

const OPPORTUNITY_CLASSES: [(u32, &str); 4] = [(1, "stand"), (2, "walk"), (4, "sit"), (5, "lie")];

/// Reads `S<N>-*.dat` files: back, right upper arm, left lower arm and both
/// shoes, with locomotion labels.
pub fn load_opportunity(root: &Path) -> Result<RawRecording> {
    // 1-based column numbers from the dataset's column list.
    let cols = |a: usize, g: usize| ([a - 1, a, a + 1], [g - 1, g, g + 1]);
    let devices = [
        ("back", cols(38, 41).0, cols(38, 41).1),
        ("rua", cols(51, 54).0, cols(51, 54).1),
        ("lla", cols(90, 93).0, cols(90, 93).1),
        ("lshoe", cols(109, 112).0, cols(109, 112).1),
        ("rshoe", cols(125, 128).0, cols(125, 128).1),
    ];
    let layout = TableLayout { time_col: 0, time_scale: 1e-3, label_col: 243, devices: &devices, classes: &OPPORTUNITY_CLASSES, rate_hz: 30.0 };
    table_recording("opportunity", &layout, numbered_files(root, "S", ".dat")?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::window::{segment_windows, SegmentConfig};

    fn write_triaxial(path: &Path, t0_ms: f64, n: usize, rate: f64, f: impl Fn(usize) -> [f32; 3]) {
        let mut s = String::from("id,attr_time,attr_x,attr_y,attr_z\n");
        for i in 0..n {
            let v = f(i);
            s += &format!("{},{},{},{},{}\n", i + 1, t0_ms + i as f64 * 1000.0 / rate, v[0], v[1], v[2]);
        }
        fs::write(path, s).unwrap();
    }

    #[test]
    fn realworld_layout_is_read_and_aligned() {
        let dir = tempfile::tempdir().unwrap();
        for subject in [1, 2] {
            let data = dir.path().join(format!("proband{subject}/data"));
            fs::create_dir_all(&data).unwrap();
            for activity in ["walking", "sitting"] {
                for (k, pos) in ["chest", "head"].iter().enumerate() {
                    let offset = 3.0 * k as f64;
                    write_triaxial(&data.join(format!("acc_{activity}_{pos}.csv")), 1000.0 + offset, 200, 50.0, |i| [i as f32, 0.0, 1.0]);
                    write_triaxial(&data.join(format!("Gyroscope_{activity}_{pos}.csv")), 1001.0 + offset, 200, 50.0, |_| [0.5, 0.5, 0.5]);
                }
            }
        }
        let opts = RealWorldOptions { positions: vec!["chest".into(), "head".into()], ..Default::default() };
        let raw = load_realworld(dir.path(), &opts).unwrap();
        assert_eq!(raw.sessions.len(), 4);
        assert_eq!(raw.sessions[0].subject, 1);
        let s = &raw.sessions[0];
        assert_eq!(s.streams[0].len(), s.streams[1].len());
        assert!(s.streams[0].samples.iter().all(|v| v.is_finite()));
        let ds = segment_windows(&raw, &SegmentConfig::new(1.0)).unwrap();
        assert!(ds.num_windows() >= 4);
        assert_eq!(ds.subjects(), vec![1, 2]);
    }

    fn table_row(ncols: usize, t: f64, label_col: usize, label: u32, fill: f64) -> String {
        let mut v = vec![fill.to_string(); ncols];
        v[0] = t.to_string();
        v[label_col] = label.to_string();
        v.join(" ")
    }

    #[test]
    fn pamap2_splits_at_null_class_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        for i in 0..300 {
            let label = if (100..110).contains(&i) { 0 } else { 4 };
            let mut row = table_row(54, i as f64 * 0.01, 1, label, 0.25);
            if i == 250 {
                row = row.replacen("0.25", "NaN", 5);
            }
            lines.push(row);
        }
        fs::write(dir.path().join("subject101.dat"), lines.join("\n")).unwrap();
        let raw = load_pamap2(dir.path(), None).unwrap();
        let lens: Vec<usize> = raw.sessions.iter().map(|s| s.streams[0].len()).collect();
        assert_eq!(lens, vec![100, 140, 49]);
        assert_eq!(raw.sessions[0].subject, 101);
        assert_eq!(raw.devices.len(), 3);
        let resampled = load_pamap2(dir.path(), Some(50.0)).unwrap();
        assert_eq!(resampled.sessions[0].streams[0].len(), 50);
    }

    #[test]
    fn opportunity_locomotion_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        for i in 0..90 {
            let mut fields: Vec<String> = (0..250).map(|c| (c + 1).to_string()).collect();
            fields[0] = ((i as f64) * 1000.0 / 30.0).to_string();
            fields[243] = if i < 60 { "2" } else { "5" }.to_string();
            lines.push(fields.join(" "));
        }
        fs::write(dir.path().join("S3-ADL1.dat"), lines.join("\n")).unwrap();
        let raw = load_opportunity(dir.path()).unwrap();
        assert_eq!(raw.devices.len(), 5);
        let s = &raw.sessions[0];
        assert_eq!(s.subject, 3);
        // Back accelerometer is columns 38-40, gyro 41-43.
        assert_eq!(&s.streams[0].samples[..6], &[38.0, 39.0, 40.0, 41.0, 42.0, 43.0]);
        assert_eq!(&s.streams[3].samples[..6], &[109.0, 110.0, 111.0, 112.0, 113.0, 114.0]);
        assert_eq!(s.labels.as_ref().unwrap()[0], Some(1));
        assert_eq!(s.labels.as_ref().unwrap()[89], Some(3));
    }
}
