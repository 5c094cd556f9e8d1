//! Checkpoint archive format.
//!
//! One file: the 8-byte magic `CLSLCKP1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as raw little-endian `f32`
//! in manifest order. The architecture hash covers the model kind and the
//! name and shape of every tensor, so a checkpoint only loads into the
//! architecture that wrote it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Classifier, ClassifierHead, FeatureExtractor, Params, EMBEDDING_DIM};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLSLCKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Extractor,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub architecture_hash: String,
    pub in_channels: usize,
    pub num_classes: Option<usize>,
    pub hidden_units: Option<usize>,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn extractor_shapes(e: &FeatureExtractor<f32>) -> Vec<Vec<usize>> {
    let mut v = Vec::new();
    for c in [&e.conv1, &e.conv2, &e.conv3] {
        v.push(vec![c.kernel, c.in_ch, c.out_ch]);
        v.push(vec![c.out_ch]);
    }
    v
}

fn classifier_shapes(c: &Classifier<f32>) -> Vec<Vec<usize>> {
    let mut v = extractor_shapes(&c.extractor);
    for d in [&c.head.hidden, &c.head.output] {
        v.push(vec![d.inputs, d.outputs]);
        v.push(vec![d.outputs]);
    }
    v
}

fn entries<P: Params<f32>>(model: &P, shapes: Vec<Vec<usize>>) -> Vec<TensorEntry> {
    model.tensors().into_iter().zip(shapes).map(|((name, _), shape)| TensorEntry { name, shape }).collect()
}

pub fn architecture_hash(kind: ModelKind, tensors: &[TensorEntry]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&kind).expect("serializable"));
    for t in tensors {
        h.update(t.name.as_bytes());
        h.update([0u8]);
        for s in &t.shape {
            h.update((*s as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_archive<P: Params<f32>>(path: &Path, manifest: &CheckpointManifest, model: &P) -> Result<()> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Data(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in model.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_extractor(path: &Path, e: &FeatureExtractor<f32>, seed: u64, step: u64) -> Result<()> {
    let tensors = entries(e, extractor_shapes(e));
    let manifest = CheckpointManifest {
        kind: ModelKind::Extractor,
        architecture_hash: architecture_hash(ModelKind::Extractor, &tensors),
        in_channels: e.in_channels(),
        num_classes: None,
        hidden_units: None,
        seed,
        step,
        tensors,
    };
    write_archive(path, &manifest, e)
}

pub fn save_classifier(path: &Path, c: &Classifier<f32>, seed: u64, step: u64) -> Result<()> {
    let tensors = entries(c, classifier_shapes(c));
    let manifest = CheckpointManifest {
        kind: ModelKind::Classifier,
        architecture_hash: architecture_hash(ModelKind::Classifier, &tensors),
        in_channels: c.extractor.in_channels(),
        num_classes: Some(c.head.num_classes()),
        hidden_units: Some(c.head.hidden.outputs),
        seed,
        step,
        tensors,
    };
    write_archive(path, &manifest, c)
}

/// Parses the archive header without touching tensor data.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    Ok(split_archive(path, &fs::read(path).map_err(|e| Error::io(path, e))?)?.0)
}

fn split_archive<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointManifest, &'a [u8])> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| bad(&format!("manifest: {e}")))?;
    Ok((manifest, &bytes[16 + len..]))
}

fn fill<P: Params<f32>>(path: &Path, template: &mut P, expected: &[TensorEntry], kind: ModelKind) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, mut data) = split_archive(path, &bytes)?;
    if manifest.kind != kind {
        return Err(Error::Config(format!("checkpoint holds a {:?}, expected a {kind:?}", manifest.kind)));
    }
    let hash = architecture_hash(kind, expected);
    if manifest.architecture_hash != hash || manifest.tensors != expected {
        return Err(Error::Config(format!(
            "architecture hash mismatch: checkpoint {} vs model {hash}",
            manifest.architecture_hash
        )));
    }
    for (_, t) in template.tensors_mut() {
        let n = t.len() * 4;
        if data.len() < n {
            return Err(Error::Data(format!("{}: truncated tensor data", path.display())));
        }
        for (v, chunk) in t.iter_mut().zip(data[..n].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(Error::Data(format!("{}: {} trailing bytes", path.display(), data.len())));
    }
    Ok(manifest)
}

fn template_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn load_extractor(path: &Path) -> Result<(FeatureExtractor<f32>, CheckpointManifest)> {
    let m = read_manifest(path)?;
    let mut e = FeatureExtractor::<f32>::new(m.in_channels, &mut template_rng());
    let expected = entries(&e, extractor_shapes(&e));
    let m = fill(path, &mut e, &expected, ModelKind::Extractor)?;
    e.version = m.step;
    Ok((e, m))
}

pub fn load_classifier(path: &Path) -> Result<(Classifier<f32>, CheckpointManifest)> {
    let m = read_manifest(path)?;
    let k = m.num_classes.ok_or_else(|| Error::Data("classifier checkpoint without num_classes".into()))?;
    let hidden = m.hidden_units.ok_or_else(|| Error::Data("classifier checkpoint without hidden_units".into()))?;
    let mut r = template_rng();
    let extractor = FeatureExtractor::<f32>::new(m.in_channels, &mut r);
    let head = ClassifierHead::with_hidden(EMBEDDING_DIM, hidden, k, &mut r);
    let mut c = Classifier { extractor, head };
    let expected = entries(&c, classifier_shapes(&c));
    let m = fill(path, &mut c, &expected, ModelKind::Classifier)?;
    c.extractor.version = m.step;
    Ok((c, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ckpt");
        let e = FeatureExtractor::<f32>::new(6, &mut ChaCha8Rng::seed_from_u64(4));
        save_extractor(&p, &e, 4, 17).unwrap();
        let (back, m) = load_extractor(&p).unwrap();
        assert_eq!(m.seed, 4);
        assert_eq!(m.step, 17);
        assert_eq!(back.tensors(), e.tensors());
    }

    #[test]
    fn classifier_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let c = Classifier { extractor: FeatureExtractor::<f32>::new(3, &mut r), head: ClassifierHead::with_hidden(96, 8, 4, &mut r) };
        save_classifier(&p, &c, 1, 2).unwrap();
        let (back, _) = load_classifier(&p).unwrap();
        assert_eq!(back.tensors(), c.tensors());
        assert!(matches!(load_extractor(&p), Err(Error::Config(_))));
    }

    #[test]
    fn tampered_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ckpt");
        let e = FeatureExtractor::<f32>::new(6, &mut ChaCha8Rng::seed_from_u64(0));
        save_extractor(&p, &e, 0, 0).unwrap();
        let mut m = read_manifest(&p).unwrap();
        m.architecture_hash = "0".repeat(64);
        write_archive(&p, &m, &e).unwrap();
        let err = load_extractor(&p).unwrap_err();
        assert!(err.to_string().contains("architecture hash mismatch"), "{err}");
    }

    #[test]
    fn garbage_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"hello world, not a model").unwrap();
        assert!(matches!(load_extractor(&p), Err(Error::Data(_))));
    }
}
