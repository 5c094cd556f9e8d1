//! Trainable models: the 1D-CNN feature extractor, the classification head
//! and the autoencoder decoder, plus the optimizer and checkpoint format.
//!
//! All layers are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
pub mod decoder;
pub mod extractor;
pub mod head;
pub mod layers;
pub mod optim;
pub mod scalar;

use serde::{Deserialize, Serialize};

pub use decoder::Decoder;
pub use extractor::{FeatureExtractor, GradScope, EMBEDDING_DIM, MIN_WINDOW};
pub use head::{softmax_rows, ClassifierHead};
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::Scalar;

/// Named access to every trainable tensor of a model, in a fixed order.
pub trait Params<T> {
    fn tensors(&self) -> Vec<(String, &[T])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])>;
    fn bump_version(&mut self) {}
}

/// Which parameter groups an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    pub conv1: bool,
    pub conv2: bool,
    pub conv3: bool,
    pub head: bool,
    pub decoder: bool,
}

impl TrainableMask {
    pub fn all() -> Self {
        Self { conv1: true, conv2: true, conv3: true, head: true, decoder: true }
    }

    pub fn allows(&self, name: &str) -> bool {
        let group = name.split('.').next().unwrap_or("");
        match group {
            "conv1" => self.conv1,
            "conv2" => self.conv2,
            "conv3" => self.conv3,
            "head" => self.head,
            "decoder" => self.decoder,
            _ => true,
        }
    }

    pub fn any_extractor(&self) -> bool {
        self.conv1 || self.conv2 || self.conv3
    }
}

/// How much of a pretrained model is updated during supervised training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    /// conv1 and conv2 frozen; conv3 and the head trainable.
    #[default]
    LastConvAndHead,
    /// Every parameter trainable.
    AllTrainable,
    /// Extractor fully frozen; only the head trains.
    HeadOnly,
}

pub fn freeze_partition(mode: FreezeMode) -> TrainableMask {
    match mode {
        FreezeMode::LastConvAndHead => TrainableMask { conv1: false, conv2: false, conv3: true, head: true, decoder: false },
        FreezeMode::AllTrainable => TrainableMask::all(),
        FreezeMode::HeadOnly => TrainableMask { conv1: false, conv2: false, conv3: false, head: true, decoder: false },
    }
}

/// Feature extractor with a classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn zeros_like(&self) -> Self {
        Self { extractor: self.extractor.zeros_like(), head: self.head.zeros_like() }
    }

    /// Evaluation-mode class probabilities for `[batch, width, channels]`.
    pub fn predict_proba(&self, x: &[T], batch: usize, width: usize) -> Vec<T> {
        let emb = self.extractor.embed(x, batch, width);
        self.head.forward(&emb, batch)
    }

    pub fn predict(&self, x: &[T], batch: usize, width: usize) -> Vec<usize> {
        let k = self.head.num_classes();
        self.predict_proba(x, batch, width)
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }
}

impl<T: Scalar> Params<T> for Classifier<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut v = self.extractor.tensors();
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut v = self.extractor.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }

    fn bump_version(&mut self) {
        self.extractor.bump_version();
    }
}

/// Encoder (the feature extractor) and decoder trained on reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoEncoder<T> {
    pub encoder: FeatureExtractor<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> AutoEncoder<T> {
    pub fn zeros_like(&self) -> Self {
        Self { encoder: self.encoder.zeros_like(), decoder: self.decoder.zeros_like() }
    }
}

impl<T: Scalar> Params<T> for AutoEncoder<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v
    }

    fn bump_version(&mut self) {
        self.encoder.bump_version();
    }
}
