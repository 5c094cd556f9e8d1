use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MultiDeviceDataset;
use crate::error::{Error, Result};
use crate::nn::{FeatureExtractor, EMBEDDING_DIM};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingShape {
    rows: usize,
    cols: usize,
    dtype: String,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes eval-mode embeddings of every window of `device_id` as raw
/// little-endian `f32` `[T, 96]` at `out`, with `<out>.shape` (TOML) and
/// `<out>.labels.csv` (window, subject, label) beside it. Returns `T`.
pub fn export_embeddings(extractor: &FeatureExtractor<f32>, ds: &MultiDeviceDataset, device_id: &str, out: &Path) -> Result<usize> {
    let d = ds.device_index(device_id)?;
    let (w, n) = (ds.window_len(), ds.window_size());
    let mut bytes = Vec::with_capacity(ds.num_windows() * EMBEDDING_DIM * 4);
    for chunk in ds.device_windows(d).chunks(256 * n) {
        for v in extractor.embed(chunk, chunk.len() / n, w) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    let shape = EmbeddingShape { rows: ds.num_windows(), cols: EMBEDDING_DIM, dtype: "f32le".into() };
    let shape_path = sidecar(out, ".shape");
    fs::write(&shape_path, toml::to_string(&shape).map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::io(&shape_path, e))?;
    let mut labels = String::from("window,subject,label\n");
    for t in 0..ds.num_windows() {
        let label = ds.labels().map(|l| ds.class_names()[l[t]].clone()).unwrap_or_default();
        labels.push_str(&format!("{t},{},{label}\n", ds.subject_ids()[t]));
    }
    let labels_path = sidecar(out, ".labels.csv");
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;
    Ok(ds.num_windows())
}

/// Reads an export back as `(values, rows, cols)`.
pub fn load_embeddings(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let shape_path = sidecar(path, ".shape");
    let text = fs::read_to_string(&shape_path).map_err(|e| Error::io(&shape_path, e))?;
    let shape: EmbeddingShape = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", shape_path.display())))?;
    if shape.dtype != "f32le" {
        return Err(Error::Data(format!("unsupported dtype '{}'", shape.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != shape.rows * shape.cols * 4 {
        return Err(Error::Data(format!("{}: {} bytes for a {}x{} f32 matrix", path.display(), bytes.len(), shape.rows, shape.cols)));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((values, shape.rows, shape.cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn export_round_trips_and_is_deterministic() {
        let ds = generate(&SynthConfig { num_devices: 2, num_classes: 3, num_subjects: 2, windows_per_subject_per_class: 5, ..Default::default() })
            .unwrap();
        let ext = FeatureExtractor::<f32>::new(ds.channels(), &mut rng::seeded(0));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.f32"), dir.path().join("b.f32"));
        assert_eq!(export_embeddings(&ext, &ds, "device1", &a).unwrap(), ds.num_windows());
        export_embeddings(&ext, &ds, "device1", &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let (v, rows, cols) = load_embeddings(&a).unwrap();
        assert_eq!((rows, cols), (ds.num_windows(), 96));
        assert_eq!(v, ext.embed(ds.device_windows(1), ds.num_windows(), ds.window_len()));
        let labels = fs::read_to_string(dir.path().join("a.f32.labels.csv")).unwrap();
        assert_eq!(labels.lines().count(), ds.num_windows() + 1);
    }
}
