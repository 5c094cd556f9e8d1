//! Writes the two-subject RealWorld-layout fixture used by the tests:
//!
//! ```text
//! cargo run -p collossl --example realworld_fixture -- crates/core/tests/fixtures/realworld
//! ```
//!
//! Signals come from the synthetic generator (8 activities, 3 positions,
//! 50 Hz). Each position gets its own start offset and timestamp jitter so
//! the loader has to align and resample.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use collossl::data::adapters::{REALWORLD_ACTIVITIES, REALWORLD_RATE_HZ};
use collossl::synth::{generate_raw, SynthConfig};
use rand::Rng;

const POSITIONS: [&str; 3] = ["chest", "thigh", "waist"];
const WINDOWS_PER_ACTIVITY: usize = 6;

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).expect("usage: realworld_fixture <out-dir>"));
    let cfg = SynthConfig {
        num_devices: POSITIONS.len(),
        num_classes: REALWORLD_ACTIVITIES.len(),
        num_subjects: 2,
        windows_per_subject_per_class: WINDOWS_PER_ACTIVITY,
        sampling_rate_hz: REALWORLD_RATE_HZ,
        noise_std: 0.5,
        subject_variation: 0.2,
        seed: 2016,
        ..Default::default()
    };
    let raw = generate_raw(&cfg).unwrap();
    let mut jitter = collossl::rng::seeded(7);
    for session in &raw.sessions {
        let dir = out.join(format!("proband{}", session.subject)).join("data");
        fs::create_dir_all(&dir).unwrap();
        let labels = session.labels.as_ref().unwrap();
        for (class, activity) in REALWORLD_ACTIVITIES.iter().enumerate() {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(class)).collect();
            let base_ms = 1_435_000_000_000.0 + 120_000.0 * class as f64 + 1_000_000.0 * session.subject as f64;
            for (d, pos) in POSITIONS.iter().enumerate() {
                let stream = &session.streams[d];
                for (sensor, offset) in [("acc", 0), ("Gyroscope", 3)] {
                    let start = base_ms + 7.0 * d as f64 + if sensor == "acc" { 0.0 } else { 3.0 };
                    let mut text = String::from("id,attr_time,attr_x,attr_y,attr_z\n");
                    for (k, &i) in rows.iter().enumerate() {
                        let t = start + k as f64 * 1000.0 / REALWORLD_RATE_HZ + jitter.random_range(-2.0..2.0);
                        let v = &stream.samples[i * 6 + offset..i * 6 + offset + 3];
                        writeln!(text, "{},{},{:.5},{:.5},{:.5}", k + 1, t.round() as i64, v[0], v[1], v[2]).unwrap();
                    }
                    fs::write(dir.join(format!("{sensor}_{activity}_{pos}.csv")), text).unwrap();
                }
            }
        }
    }
}
