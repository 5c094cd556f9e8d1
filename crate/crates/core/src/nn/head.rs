use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu_backward_in_place, relu_in_place, Dense};
use super::scalar::Scalar;
use super::Params;

pub const HIDDEN_UNITS: usize = 1024;

/// Dense(1024, ReLU) followed by a softmax output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead<T> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

pub struct HeadCache<T> {
    batch: usize,
    hidden: Vec<T>,
}

impl<T: Scalar> HeadCache<T> {
    pub fn activation_pattern(&self) -> Vec<u32> {
        self.hidden.iter().map(|&x| u32::from(x > T::zero())).collect()
    }
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self::with_hidden(embedding_dim, HIDDEN_UNITS, num_classes, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(embedding_dim: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        Self { hidden: Dense::new(embedding_dim, hidden, rng), output: Dense::new(hidden, num_classes, rng) }
    }

    pub fn num_classes(&self) -> usize {
        self.output.outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), output: self.output.zeros_like() }
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierHead<U> {
        ClassifierHead { hidden: self.hidden.cast(), output: self.output.cast() }
    }

    /// Returns unnormalized logits `[batch, classes]`.
    pub fn logits(&self, emb: &[T], batch: usize) -> (Vec<T>, HeadCache<T>) {
        let mut hidden = self.hidden.forward(emb, batch);
        relu_in_place(&mut hidden);
        let logits = self.output.forward(&hidden, batch);
        (logits, HeadCache { batch, hidden })
    }

    /// Class probabilities `[batch, classes]`.
    pub fn forward(&self, emb: &[T], batch: usize) -> Vec<T> {
        let (mut logits, _) = self.logits(emb, batch);
        softmax_rows(&mut logits, self.num_classes());
        logits
    }

    /// Backpropagates a logit gradient; returns the embedding gradient when
    /// requested.
    pub fn backward(
        &self,
        emb: &[T],
        cache: &HeadCache<T>,
        d_logits: &[T],
        grads: &mut ClassifierHead<T>,
        want_emb_grad: bool,
    ) -> Option<Vec<T>> {
        let mut d_hidden = self
            .output
            .backward(&cache.hidden, cache.batch, d_logits, &mut grads.output, true)
            .expect("requested");
        relu_backward_in_place(&mut d_hidden, &cache.hidden);
        self.hidden.backward(emb, cache.batch, &d_hidden, &mut grads.hidden, want_emb_grad)
    }
}

/// Numerically stable in-place softmax over each row of length `k`.
pub fn softmax_rows<T: Scalar>(v: &mut [T], k: usize) {
    for row in v.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

impl<T: Scalar> Params<T> for ClassifierHead<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        vec![
            ("head.hidden.weight".into(), &self.hidden.weight[..]),
            ("head.hidden.bias".into(), &self.hidden.bias[..]),
            ("head.output.weight".into(), &self.output.weight[..]),
            ("head.output.bias".into(), &self.output.bias[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("head.hidden.weight".into(), &mut self.hidden.weight[..]),
            ("head.hidden.bias".into(), &mut self.hidden.bias[..]),
            ("head.output.weight".into(), &mut self.output.weight[..]),
            ("head.output.bias".into(), &mut self.output.bias[..]),
        ]
    }
}
