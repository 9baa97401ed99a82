//! Pointwise (1x1) layers shared by the update rule and the conditioning blocks.
//!
//! Activations are laid out `[features, cells]`, so every layer is one matrix product.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::{accumulate_row_sums, add_row_bias, gemm, Mat};
use crate::real::{silu, silu_grad, Real};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Dense layer applied independently at every cell. `weight` is `[out, in]` (the perceive
/// convolution stores `[out, in, 3, 3]`, which is the same memory as `[out, in * 9]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(weight_shape: &[usize]) -> Self {
        Linear {
            weight: Tensor::zeros(weight_shape),
            bias: Tensor::zeros(&weight_shape[..1]),
        }
    }

    /// PyTorch's default: weights and bias uniform in `+-1/sqrt(fan_in)`.
    pub fn uniform(weight_shape: &[usize], rng: &mut StreamRng) -> Self {
        let mut layer = Self::zeros(weight_shape);
        let bound = 1.0 / libm::sqrt(layer.in_features() as f64);
        for x in layer
            .weight
            .data_mut()
            .iter_mut()
            .chain(layer.bias.data_mut().iter_mut())
        {
            *x = T::from_f64(rng.gen_range(-bound..bound));
        }
        layer
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.len() / self.out_features()
    }

    pub fn weight_mat(&self) -> Mat<'_, T> {
        Mat::new(self.weight.data(), self.out_features(), self.in_features())
    }

    /// `out[out, n] = W x + b` for `x[in, n]`.
    pub fn forward(&self, x: &[T], n: usize, out: &mut [T]) {
        gemm(self.weight_mat(), Mat::new(x, self.in_features(), n), T::zero(), out);
        add_row_bias(out, self.bias.data(), n);
    }

    /// Accumulates weight/bias gradients into `grad` and, when requested, writes (not adds)
    /// the input gradient to `dx`.
    pub fn backward(&self, x: &[T], dy: &[T], n: usize, grad: &mut Linear<T>, dx: Option<&mut [T]>) {
        let (o, i) = (self.out_features(), self.in_features());
        gemm(
            Mat::new(dy, o, n),
            Mat::new(x, i, n).t(),
            T::one(),
            grad.weight.data_mut(),
        );
        accumulate_row_sums(grad.bias.data_mut(), dy, n);
        if let Some(dx) = dx {
            gemm(self.weight_mat().t(), Mat::new(dy, o, n), T::zero(), dx);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `second(silu(first(x)))`: the embedding MLP and both multiplicative conditioning blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

/// Activations kept for the backward pass of a [`TwoLayer`].
#[derive(Debug, Clone, Default)]
pub struct TwoLayerCache<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

impl<T: Real> TwoLayer<T> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        TwoLayer {
            first: Linear::zeros(&[hidden, input]),
            second: Linear::zeros(&[output, hidden]),
        }
    }

    pub fn uniform(input: usize, hidden: usize, output: usize, rng: &mut StreamRng) -> Self {
        TwoLayer {
            first: Linear::uniform(&[hidden, input], rng),
            second: Linear::uniform(&[output, hidden], rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.first.out_features()
    }

    pub fn output(&self) -> usize {
        self.second.out_features()
    }

    pub fn forward(&self, x: &[T], n: usize, out: &mut [T]) -> TwoLayerCache<T> {
        let mut pre = vec![T::zero(); self.hidden() * n];
        self.first.forward(x, n, &mut pre);
        let act: Vec<T> = pre.iter().map(|&v| silu(v)).collect();
        self.second.forward(&act, n, out);
        TwoLayerCache { pre, act }
    }

    pub fn backward(
        &self,
        x: &[T],
        cache: &TwoLayerCache<T>,
        dy: &[T],
        n: usize,
        grad: &mut TwoLayer<T>,
        dx: Option<&mut [T]>,
    ) {
        let mut dact = vec![T::zero(); self.hidden() * n];
        self.second
            .backward(&cache.act, dy, n, &mut grad.second, Some(&mut dact));
        for (d, &p) in dact.iter_mut().zip(&cache.pre) {
            *d *= silu_grad(p);
        }
        self.first.backward(x, &dact, n, &mut grad.first, dx);
    }

    pub fn parameter_count(&self) -> usize {
        self.first.parameter_count() + self.second.parameter_count()
    }
}
