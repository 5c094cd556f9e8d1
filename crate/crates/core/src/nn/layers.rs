//! Convolution, transposed convolution and dense layers with explicit
//! forward/backward passes.
//!
//! Every activation tensor is row-major with channels last: a batch of
//! windows is `[batch, time, channels]`. A valid (unpadded) convolution over
//! such a tensor reads each output step's receptive field as one contiguous
//! run of `kernel * in_ch` values, so the im2col matrix is just a strided view
//! of the input and needs no copy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, MatRef, Scalar};

fn glorot<T: Scalar, R: Rng + ?Sized>(len: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| T::of(rng.random_range(-limit..limit))).collect()
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::of(x.as_f64())).collect()
}

/// 1D valid convolution, stride 1. Weight layout `[kernel * in_ch, out_ch]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d<T> {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng + ?Sized>(kernel: usize, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            kernel,
            in_ch,
            out_ch,
            weight: glorot(kernel * in_ch * out_ch, kernel * in_ch, kernel * out_ch, rng),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: self.kernel,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv1d<U> {
        Conv1d {
            kernel: self.kernel,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }

    /// Output length for an input of `width` steps, or `None` if too short.
    pub fn out_len(&self, width: usize) -> Option<usize> {
        (width >= self.kernel).then(|| width - self.kernel + 1)
    }

    fn patches<'a>(&self, x: &'a [T], width: usize, b: usize, out_len: usize) -> MatRef<'a, T> {
        let start = b * width * self.in_ch;
        MatRef::strided(&x[start..start + width * self.in_ch], out_len, self.kernel * self.in_ch, self.in_ch, 1)
    }

    fn weight_mat(&self) -> MatRef<'_, T> {
        MatRef::row_major(&self.weight, self.kernel * self.in_ch, self.out_ch)
    }

    /// `x: [batch, width, in_ch]` → `[batch, width - kernel + 1, out_ch]`.
    pub fn forward(&self, x: &[T], batch: usize, width: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * width * self.in_ch, "conv input shape");
        let out_len = self.out_len(width).expect("input shorter than kernel");
        let step = out_len * self.out_ch;
        let mut out = Vec::with_capacity(batch * step);
        for _ in 0..batch * out_len {
            out.extend_from_slice(&self.bias);
        }
        for b in 0..batch {
            let a = self.patches(x, width, b, out_len);
            gemm(T::one(), a, self.weight_mat(), T::one(), &mut out[b * step..(b + 1) * step]);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// returns the gradient with respect to `x`.
    pub fn backward(
        &self,
        x: &[T],
        batch: usize,
        width: usize,
        d_out: &[T],
        grad: &mut Conv1d<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let out_len = self.out_len(width).expect("input shorter than kernel");
        let step = out_len * self.out_ch;
        assert_eq!(d_out.len(), batch * step, "conv grad shape");
        let kc = self.kernel * self.in_ch;
        for b in 0..batch {
            let a = self.patches(x, width, b, out_len);
            let g = MatRef::row_major(&d_out[b * step..(b + 1) * step], out_len, self.out_ch);
            gemm(T::one(), a.t(), g, T::one(), &mut grad.weight);
        }
        for row in d_out.chunks_exact(self.out_ch) {
            for (gb, &v) in grad.bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut d_x = vec![T::zero(); x.len()];
        let mut d_patch = vec![T::zero(); out_len * kc];
        for b in 0..batch {
            let g = MatRef::row_major(&d_out[b * step..(b + 1) * step], out_len, self.out_ch);
            gemm(T::one(), g, self.weight_mat().t(), T::zero(), &mut d_patch);
            let base = b * width * self.in_ch;
            for t in 0..out_len {
                let dst = &mut d_x[base + t * self.in_ch..base + t * self.in_ch + kc];
                for (d, &s) in dst.iter_mut().zip(&d_patch[t * kc..(t + 1) * kc]) {
                    *d += s;
                }
            }
        }
        Some(d_x)
    }
}

/// Transposed 1D convolution, stride 1: `[batch, len, in_ch]` →
/// `[batch, len + kernel - 1, out_ch]`. Exactly inverts the shape change of
/// [`Conv1d`] with the same kernel. Weight layout `[kernel * out_ch, in_ch]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose1d<T> {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvTranspose1d<T> {
    pub fn new<R: Rng + ?Sized>(kernel: usize, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            kernel,
            in_ch,
            out_ch,
            weight: glorot(kernel * in_ch * out_ch, kernel * in_ch, kernel * out_ch, rng),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: self.kernel,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvTranspose1d<U> {
        ConvTranspose1d {
            kernel: self.kernel,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        len + self.kernel - 1
    }

    fn weight_mat(&self) -> MatRef<'_, T> {
        MatRef::row_major(&self.weight, self.kernel * self.out_ch, self.in_ch)
    }

    pub fn forward(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * len * self.in_ch, "deconv input shape");
        let out_len = self.out_len(len);
        let kc = self.kernel * self.out_ch;
        let mut out = Vec::with_capacity(batch * out_len * self.out_ch);
        for _ in 0..batch * out_len {
            out.extend_from_slice(&self.bias);
        }
        let mut cols = vec![T::zero(); len * kc];
        for b in 0..batch {
            let xin = MatRef::row_major(&x[b * len * self.in_ch..(b + 1) * len * self.in_ch], len, self.in_ch);
            gemm(T::one(), xin, self.weight_mat().t(), T::zero(), &mut cols);
            let base = b * out_len * self.out_ch;
            for t in 0..len {
                let dst = &mut out[base + t * self.out_ch..base + t * self.out_ch + kc];
                for (d, &s) in dst.iter_mut().zip(&cols[t * kc..(t + 1) * kc]) {
                    *d += s;
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[T],
        batch: usize,
        len: usize,
        d_out: &[T],
        grad: &mut ConvTranspose1d<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let out_len = self.out_len(len);
        let kc = self.kernel * self.out_ch;
        let out_step = out_len * self.out_ch;
        assert_eq!(d_out.len(), batch * out_step, "deconv grad shape");
        for row in d_out.chunks_exact(self.out_ch) {
            for (gb, &v) in grad.bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
        let mut d_x = want_input_grad.then(|| vec![T::zero(); x.len()]);
        for b in 0..batch {
            let g = MatRef::strided(&d_out[b * out_step..(b + 1) * out_step], len, kc, self.out_ch, 1);
            let xin = MatRef::row_major(&x[b * len * self.in_ch..(b + 1) * len * self.in_ch], len, self.in_ch);
            gemm(T::one(), g.t(), xin, T::one(), &mut grad.weight);
            if let Some(d_x) = d_x.as_mut() {
                let dst = &mut d_x[b * len * self.in_ch..(b + 1) * len * self.in_ch];
                gemm(T::one(), g, self.weight_mat(), T::zero(), dst);
            }
        }
        d_x
    }
}

/// Fully connected layer. Weight layout `[inputs, outputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: glorot(inputs * outputs, inputs, outputs, rng),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }

    pub fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.inputs, "dense input shape");
        let mut out = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            T::one(),
            MatRef::row_major(x, batch, self.inputs),
            MatRef::row_major(&self.weight, self.inputs, self.outputs),
            T::one(),
            &mut out,
        );
        out
    }

    pub fn backward(&self, x: &[T], batch: usize, d_out: &[T], grad: &mut Dense<T>, want_input_grad: bool) -> Option<Vec<T>> {
        assert_eq!(d_out.len(), batch * self.outputs, "dense grad shape");
        let g = MatRef::row_major(d_out, batch, self.outputs);
        gemm(T::one(), MatRef::row_major(x, batch, self.inputs).t(), g, T::one(), &mut grad.weight);
        for row in d_out.chunks_exact(self.outputs) {
            for (gb, &v) in grad.bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
        want_input_grad.then(|| {
            let mut d_x = vec![T::zero(); batch * self.inputs];
            gemm(T::one(), g, MatRef::row_major(&self.weight, self.inputs, self.outputs).t(), T::zero(), &mut d_x);
            d_x
        })
    }
}

pub fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Gradient through ReLU given the activation's output.
pub fn relu_backward_in_place<T: Scalar>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Draws an inverted-dropout mask (`0` or `1 / (1 - rate)`) and applies it.
pub fn dropout_in_place<T: Scalar, R: Rng + ?Sized>(v: &mut [T], rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..v.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    for (x, &m) in v.iter_mut().zip(&mask) {
        *x *= m;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(c: &Conv1d<f64>, x: &[f64], batch: usize, width: usize) -> Vec<f64> {
        let l = width - c.kernel + 1;
        let mut out = vec![0.0; batch * l * c.out_ch];
        for b in 0..batch {
            for t in 0..l {
                for f in 0..c.out_ch {
                    let mut s = c.bias[f];
                    for k in 0..c.kernel {
                        for ch in 0..c.in_ch {
                            s += x[(b * width + t + k) * c.in_ch + ch] * c.weight[(k * c.in_ch + ch) * c.out_ch + f];
                        }
                    }
                    out[(b * l + t) * c.out_ch + f] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv1d::<f64>::new(4, 3, 5, &mut rng);
        conv.bias.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
        let x: Vec<f64> = (0..2 * 9 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = conv.forward(&x, 2, 9);
        let want = naive_conv(&conv, &x, 2, 9);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when both share weights and have no bias.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv1d::<f64> { bias: vec![0.0; 4], ..Conv1d::new(3, 2, 4, &mut rng) };
        // ConvTranspose with in_ch = conv.out_ch, out_ch = conv.in_ch; its
        // weight [kernel*out_ch, in_ch] equals conv's [kernel*in_ch, out_ch].
        let deconv = ConvTranspose1d { kernel: 3, in_ch: 4, out_ch: 2, weight: conv.weight.clone(), bias: vec![0.0; 2] };
        let x: Vec<f64> = (0..7 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cx = conv.forward(&x, 1, 7);
        let ty = deconv.forward(&y, 1, 5);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = vec![1.0f64; 10_000];
        let mask = dropout_in_place(&mut v, 0.1, &mut rng);
        let dropped = mask.iter().filter(|&&m| m == 0.0).count();
        assert!((800..1200).contains(&dropped));
        assert!(v.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.9).abs() < 1e-12));
    }
}
