//! Parameterized convolution layers and weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::kernels::PaddingSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Instance-norm epsilon used throughout the generators.
pub const NORM_EPS: f64 = 1e-5;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: PaddingSpec,
}

impl Conv2dLayer {
    /// Registers `{prefix}.weight` `[cout, cin, k, k]` and `{prefix}.bias`, zero-filled.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: PaddingSpec,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel]))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in self.param_ids() {
            let z = Tensor::zeros(store.value(id).shape());
            store.get_mut(id).value = z;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTransposeLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTransposeLayer {
    /// Registers `{prefix}.weight` `[cin, cout, k, k]` and `{prefix}.bias`, zero-filled.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), Tensor::zeros(&[cin, cout, kernel, kernel]))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Draws every `*.weight` among `ids` from `N(0, std^2)` and zeroes every
/// `*.bias`. Weights are drawn in the order of `ids` from one ChaCha stream,
/// so the result is a pure function of `(ids, seed, std)`.
pub fn init_gaussian<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    for &id in ids {
        let p = store.get_mut(id);
        if p.name.ends_with(".weight") {
            p.value = Tensor::from_fn(p.value.shape(), |_| T::lit(normal.sample(&mut rng)));
        } else {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}
