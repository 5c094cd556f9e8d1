//! Temporal convolutional feature extractor.
//!
//! Three valid convolutions (32/64/96 filters, kernels 24/16/8, stride 1),
//! ReLU after each, dropout after the first two activations, and global max
//! pooling over time into a 96-dimensional embedding.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::layers::{dropout_in_place, relu_backward_in_place, relu_in_place, Conv1d};
use super::scalar::Scalar;
use super::{Params, TrainableMask};

pub const EMBEDDING_DIM: usize = 96;
pub const FILTERS: [usize; 3] = [32, 64, 96];
pub const KERNELS: [usize; 3] = [24, 16, 8];
pub const DROPOUT_RATE: f64 = 0.1;
pub const L2_FACTOR: f64 = 1e-4;

/// Smallest window length that survives the three valid convolutions.
pub const MIN_WINDOW: usize = KERNELS[0] + KERNELS[1] + KERNELS[2] - 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor<T> {
    pub conv1: Conv1d<T>,
    pub conv2: Conv1d<T>,
    pub conv3: Conv1d<T>,
    pub dropout: f64,
    pub l2: f64,
    /// Bumped on every parameter update.
    #[serde(default)]
    pub version: u64,
}

/// Activations retained by a forward pass for the backward pass.
pub struct ExtractorCache<T> {
    pub batch: usize,
    pub width: usize,
    h1: Vec<T>,
    m1: Option<Vec<T>>,
    h2: Vec<T>,
    m2: Option<Vec<T>>,
    r3: Vec<T>,
    argmax: Vec<usize>,
    /// Parameter version the forward pass ran with.
    pub version: u64,
}

/// Which gradients a backward pass must produce.
#[derive(Clone, Copy, Debug)]
pub struct GradScope {
    pub conv1: bool,
    pub conv2: bool,
    pub conv3: bool,
    pub input: bool,
}

impl GradScope {
    pub fn all() -> Self {
        Self { conv1: true, conv2: true, conv3: true, input: false }
    }

    pub fn from_mask(mask: &TrainableMask) -> Self {
        Self { conv1: mask.conv1, conv2: mask.conv2, conv3: mask.conv3, input: false }
    }

    fn below_conv3(&self) -> bool {
        self.conv1 || self.conv2 || self.input
    }

    fn below_conv2(&self) -> bool {
        self.conv1 || self.input
    }
}

impl<T: Scalar> ExtractorCache<T> {
    /// Which ReLUs were active and which step won each max-pool. The loss
    /// is smooth in the parameters wherever this stays constant.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let on = |v: &[T]| v.iter().map(|&x| u32::from(x > T::zero())).collect::<Vec<_>>();
        let mut p = on(&self.h1);
        p.extend(on(&self.h2));
        p.extend(on(&self.r3));
        p.extend(self.argmax.iter().map(|&i| i as u32));
        p
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv1d::new(KERNELS[0], in_channels, FILTERS[0], rng),
            conv2: Conv1d::new(KERNELS[1], FILTERS[0], FILTERS[1], rng),
            conv3: Conv1d::new(KERNELS[2], FILTERS[1], FILTERS[2], rng),
            dropout: DROPOUT_RATE,
            l2: L2_FACTOR,
            version: 0,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_ch
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
            dropout: self.dropout,
            l2: self.l2,
            version: 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            conv3: self.conv3.cast(),
            dropout: self.dropout,
            l2: self.l2,
            version: self.version,
        }
    }

    /// Time length of the last convolution's output.
    pub fn final_len(&self, width: usize) -> Option<usize> {
        self.conv1.out_len(width).and_then(|l| self.conv2.out_len(l)).and_then(|l| self.conv3.out_len(l))
    }

    /// `x: [batch, width, channels]` → embeddings `[batch, 96]`.
    ///
    /// Dropout is applied only when `dropout_rng` is given (training mode).
    pub fn forward(
        &self,
        x: &[T],
        batch: usize,
        width: usize,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> (Vec<T>, ExtractorCache<T>) {
        assert!(width >= MIN_WINDOW, "window of {width} samples is shorter than the minimum {MIN_WINDOW}");
        let l1 = self.conv1.out_len(width).unwrap();
        let l2 = self.conv2.out_len(l1).unwrap();
        let l3 = self.conv3.out_len(l2).unwrap();

        let mut h1 = self.conv1.forward(x, batch, width);
        relu_in_place(&mut h1);
        let m1 = match (dropout_rng.as_deref_mut(), self.dropout > 0.0) {
            (Some(rng), true) => Some(dropout_in_place(&mut h1, self.dropout, rng)),
            _ => None,
        };
        let mut h2 = self.conv2.forward(&h1, batch, l1);
        relu_in_place(&mut h2);
        let m2 = match (dropout_rng, self.dropout > 0.0) {
            (Some(rng), true) => Some(dropout_in_place(&mut h2, self.dropout, rng)),
            _ => None,
        };
        let mut r3 = self.conv3.forward(&h2, batch, l2);
        relu_in_place(&mut r3);

        let f = self.conv3.out_ch;
        let mut emb = vec![T::zero(); batch * f];
        let mut argmax = vec![0usize; batch * f];
        for b in 0..batch {
            let rows = &r3[b * l3 * f..(b + 1) * l3 * f];
            let out = &mut emb[b * f..(b + 1) * f];
            out.copy_from_slice(&rows[..f]);
            let idx = &mut argmax[b * f..(b + 1) * f];
            for t in 1..l3 {
                for (j, &v) in rows[t * f..(t + 1) * f].iter().enumerate() {
                    if v > out[j] {
                        out[j] = v;
                        idx[j] = t;
                    }
                }
            }
        }
        let cache = ExtractorCache { batch, width, h1, m1, h2, m2, r3, argmax, version: self.version };
        (emb, cache)
    }

    /// Evaluation-mode embeddings.
    pub fn embed(&self, x: &[T], batch: usize, width: usize) -> Vec<T> {
        self.forward(x, batch, width, None).0
    }

    /// Backpropagates `d_emb` (`[batch, 96]`), accumulating into `grads` for
    /// the layers selected by `scope`. Returns the input gradient when
    /// `scope.input` is set.
    pub fn backward(
        &self,
        x: &[T],
        cache: &ExtractorCache<T>,
        d_emb: &[T],
        grads: &mut FeatureExtractor<T>,
        scope: GradScope,
    ) -> Option<Vec<T>> {
        let (batch, width) = (cache.batch, cache.width);
        let l1 = self.conv1.out_len(width).unwrap();
        let l2 = self.conv2.out_len(l1).unwrap();
        let l3 = self.conv3.out_len(l2).unwrap();
        let f = self.conv3.out_ch;
        assert_eq!(d_emb.len(), batch * f, "embedding grad shape");

        let mut d_r3 = vec![T::zero(); batch * l3 * f];
        for b in 0..batch {
            for j in 0..f {
                let t = cache.argmax[b * f + j];
                let pos = (b * l3 + t) * f + j;
                if cache.r3[pos] > T::zero() {
                    d_r3[pos] = d_emb[b * f + j];
                }
            }
        }
        if !(scope.conv3 || scope.below_conv3()) {
            return None;
        }
        let mut conv3_grad = if scope.conv3 { None } else { Some(self.conv3.zeros_like()) };
        let g3 = conv3_grad.as_mut().unwrap_or(&mut grads.conv3);
        let mut d_h2 = self.conv3.backward(&cache.h2, batch, l2, &d_r3, g3, scope.below_conv3())?;
        if let Some(m) = &cache.m2 {
            d_h2.iter_mut().zip(m).for_each(|(d, &m)| *d *= m);
        }
        relu_backward_in_place(&mut d_h2, &cache.h2);

        let mut conv2_grad = if scope.conv2 { None } else { Some(self.conv2.zeros_like()) };
        let g2 = conv2_grad.as_mut().unwrap_or(&mut grads.conv2);
        let mut d_h1 = self.conv2.backward(&cache.h1, batch, l1, &d_h2, g2, scope.below_conv2())?;
        if let Some(m) = &cache.m1 {
            d_h1.iter_mut().zip(m).for_each(|(d, &m)| *d *= m);
        }
        relu_backward_in_place(&mut d_h1, &cache.h1);

        let mut conv1_grad = if scope.conv1 { None } else { Some(self.conv1.zeros_like()) };
        let g1 = conv1_grad.as_mut().unwrap_or(&mut grads.conv1);
        self.conv1.backward(x, batch, width, &d_h1, g1, scope.input)
    }

    /// `l2 * Σ w²` over the convolution weights (biases excluded).
    pub fn l2_penalty(&self) -> f64 {
        let sq = |v: &[T]| v.iter().map(|w| w.as_f64() * w.as_f64()).sum::<f64>();
        self.l2 * (sq(&self.conv1.weight) + sq(&self.conv2.weight) + sq(&self.conv3.weight))
    }

    /// Adds `2 * l2 * w` to the weight gradients of the layers in `mask`.
    pub fn add_l2_grad(&self, grads: &mut FeatureExtractor<T>, mask: &TrainableMask) {
        let k = T::of(2.0 * self.l2);
        let pairs = [
            (mask.conv1, &self.conv1.weight, &mut grads.conv1.weight),
            (mask.conv2, &self.conv2.weight, &mut grads.conv2.weight),
            (mask.conv3, &self.conv3.weight, &mut grads.conv3.weight),
        ];
        for (on, w, g) in pairs {
            if on {
                g.iter_mut().zip(w.iter()).for_each(|(g, &w)| *g += k * w);
            }
        }
    }
}

impl<T: Scalar> Params<T> for FeatureExtractor<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        vec![
            ("conv1.weight".into(), &self.conv1.weight[..]),
            ("conv1.bias".into(), &self.conv1.bias[..]),
            ("conv2.weight".into(), &self.conv2.weight[..]),
            ("conv2.bias".into(), &self.conv2.bias[..]),
            ("conv3.weight".into(), &self.conv3.weight[..]),
            ("conv3.bias".into(), &self.conv3.bias[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("conv1.weight".into(), &mut self.conv1.weight[..]),
            ("conv1.bias".into(), &mut self.conv1.bias[..]),
            ("conv2.weight".into(), &mut self.conv2.weight[..]),
            ("conv2.bias".into(), &mut self.conv2.bias[..]),
            ("conv3.weight".into(), &mut self.conv3.weight[..]),
            ("conv3.bias".into(), &mut self.conv3.bias[..]),
        ]
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}
