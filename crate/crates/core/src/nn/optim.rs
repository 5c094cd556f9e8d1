use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::{Params, TrainableMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adaptive-moment (β1 = 0.9, β2 = 0.999, ε = 1e-7) or plain SGD update.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-7, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Applies one update to every tensor the mask leaves trainable.
    /// Frozen tensors are left bit-identical.
    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P, mask: &TrainableMask) {
        self.steps += 1;
        let grads = grads.tensors();
        let mut tensors = params.tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "parameter/gradient structure mismatch");
        if self.m.is_empty() {
            self.m = tensors.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        let lr = T::of(self.lr);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.steps as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.steps as i32));
        let eps = T::of(self.eps);
        let one = T::one();
        for (i, ((name, p), (gname, g))) in tensors.iter_mut().zip(grads.iter()).enumerate() {
            debug_assert_eq!(name, gname);
            if !mask.allows(name) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        let g = g[j];
                        m[j] = b1 * m[j] + (one - b1) * g;
                        v[j] = b2 * v[j] + (one - b2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        drop(tensors);
        params.bump_version();
    }
}
