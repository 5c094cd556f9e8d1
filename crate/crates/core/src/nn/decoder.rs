//! Decoder for the autoencoder baselines.
//!
//! Shape pipeline for a window of `W` samples and `C` channels, with
//! `L1 = W - 23`, `L2 = L1 - 15`, `L3 = L2 - 7` (the encoder's valid-conv
//! lengths):
//!
//! ```text
//! [96] --dense+ReLU--> [L3 * 96] = [L3, 96]
//!      --convT k=8,  96->64, ReLU--> [L2, 64]
//!      --convT k=16, 64->32, ReLU--> [L1, 32]
//!      --convT k=24, 32->C, linear--> [W, C]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{EMBEDDING_DIM, FILTERS, KERNELS};
use super::layers::{relu_backward_in_place, relu_in_place, ConvTranspose1d, Dense};
use super::scalar::Scalar;
use super::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder<T> {
    pub width: usize,
    pub seed_len: usize,
    pub expand: Dense<T>,
    pub deconv1: ConvTranspose1d<T>,
    pub deconv2: ConvTranspose1d<T>,
    pub deconv3: ConvTranspose1d<T>,
}

pub struct DecoderCache<T> {
    batch: usize,
    e: Vec<T>,
    u1: Vec<T>,
    u2: Vec<T>,
}

impl<T: Scalar> DecoderCache<T> {
    pub fn activation_pattern(&self) -> Vec<u32> {
        [&self.e, &self.u1, &self.u2].iter().flat_map(|v| v.iter().map(|&x| u32::from(x > T::zero()))).collect()
    }
}

impl<T: Scalar> Decoder<T> {
    /// Decoder reconstructing `[width, channels]` windows.
    pub fn new<R: Rng + ?Sized>(width: usize, channels: usize, rng: &mut R) -> Self {
        let reduction: usize = KERNELS.iter().map(|k| k - 1).sum();
        assert!(width > reduction, "window too short for the decoder");
        let seed_len = width - reduction;
        Self {
            width,
            seed_len,
            expand: Dense::new(EMBEDDING_DIM, seed_len * FILTERS[2], rng),
            deconv1: ConvTranspose1d::new(KERNELS[2], FILTERS[2], FILTERS[1], rng),
            deconv2: ConvTranspose1d::new(KERNELS[1], FILTERS[1], FILTERS[0], rng),
            deconv3: ConvTranspose1d::new(KERNELS[0], FILTERS[0], channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.deconv3.out_ch
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            width: self.width,
            seed_len: self.seed_len,
            expand: self.expand.zeros_like(),
            deconv1: self.deconv1.zeros_like(),
            deconv2: self.deconv2.zeros_like(),
            deconv3: self.deconv3.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            width: self.width,
            seed_len: self.seed_len,
            expand: self.expand.cast(),
            deconv1: self.deconv1.cast(),
            deconv2: self.deconv2.cast(),
            deconv3: self.deconv3.cast(),
        }
    }

    /// `emb: [batch, 96]` → reconstruction `[batch, width, channels]`.
    pub fn forward(&self, emb: &[T], batch: usize) -> (Vec<T>, DecoderCache<T>) {
        let mut e = self.expand.forward(emb, batch);
        relu_in_place(&mut e);
        let l3 = self.seed_len;
        let mut u1 = self.deconv1.forward(&e, batch, l3);
        relu_in_place(&mut u1);
        let l2 = self.deconv1.out_len(l3);
        let mut u2 = self.deconv2.forward(&u1, batch, l2);
        relu_in_place(&mut u2);
        let l1 = self.deconv2.out_len(l2);
        let out = self.deconv3.forward(&u2, batch, l1);
        debug_assert_eq!(self.deconv3.out_len(l1), self.width);
        (out, DecoderCache { batch, e, u1, u2 })
    }

    /// Returns the gradient with respect to the embedding.
    pub fn backward(&self, emb: &[T], cache: &DecoderCache<T>, d_out: &[T], grads: &mut Decoder<T>) -> Vec<T> {
        let batch = cache.batch;
        let l3 = self.seed_len;
        let l2 = self.deconv1.out_len(l3);
        let l1 = self.deconv2.out_len(l2);
        let mut d_u2 = self.deconv3.backward(&cache.u2, batch, l1, d_out, &mut grads.deconv3, true).unwrap();
        relu_backward_in_place(&mut d_u2, &cache.u2);
        let mut d_u1 = self.deconv2.backward(&cache.u1, batch, l2, &d_u2, &mut grads.deconv2, true).unwrap();
        relu_backward_in_place(&mut d_u1, &cache.u1);
        let mut d_e = self.deconv1.backward(&cache.e, batch, l3, &d_u1, &mut grads.deconv1, true).unwrap();
        relu_backward_in_place(&mut d_e, &cache.e);
        self.expand.backward(emb, batch, &d_e, &mut grads.expand, true).unwrap()
    }
}

impl<T: Scalar> Params<T> for Decoder<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        vec![
            ("decoder.expand.weight".into(), &self.expand.weight[..]),
            ("decoder.expand.bias".into(), &self.expand.bias[..]),
            ("decoder.deconv1.weight".into(), &self.deconv1.weight[..]),
            ("decoder.deconv1.bias".into(), &self.deconv1.bias[..]),
            ("decoder.deconv2.weight".into(), &self.deconv2.weight[..]),
            ("decoder.deconv2.bias".into(), &self.deconv2.bias[..]),
            ("decoder.deconv3.weight".into(), &self.deconv3.weight[..]),
            ("decoder.deconv3.bias".into(), &self.deconv3.bias[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("decoder.expand.weight".into(), &mut self.expand.weight[..]),
            ("decoder.expand.bias".into(), &mut self.expand.bias[..]),
            ("decoder.deconv1.weight".into(), &mut self.deconv1.weight[..]),
            ("decoder.deconv1.bias".into(), &mut self.deconv1.bias[..]),
            ("decoder.deconv2.weight".into(), &mut self.deconv2.weight[..]),
            ("decoder.deconv2.bias".into(), &mut self.deconv2.bias[..]),
            ("decoder.deconv3.weight".into(), &mut self.deconv3.weight[..]),
            ("decoder.deconv3.bias".into(), &mut self.deconv3.bias[..]),
        ]
    }
}
