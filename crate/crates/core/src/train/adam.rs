//! Bias-corrected Adam over a fixed list of parameters.

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let zeros = |&id: &ParamId| Tensor::zeros(store.value(id).shape());
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    /// Applies one update with learning rate `lr` and zeroes the gradients.
    ///
    /// A non-finite gradient aborts before any parameter moves and names the
    /// offending parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for &id in &self.ids {
            if !store.grad(id).all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} contains NaN or inf",
                    store.get(id).name
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let g = p.grad.data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grads(&self.ids);
        Ok(())
    }
}
