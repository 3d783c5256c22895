//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor;

/// Standard Adam state: per-parameter first/second moment estimates and a
/// shared step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every trainable parameter.
    /// `grads` must contain an entry per trainable tensor (zeros are valid
    /// gradients); a missing entry is a contract violation.
    pub fn step(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.step += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let correction1 = 1.0 - (self.beta1).powi(self.step as i32);
        let correction2 = 1.0 - (self.beta2).powi(self.step as i32);
        let lr = (self.lr / correction1) as f32;
        let denom_scale = (1.0 / correction2.sqrt()) as f32;
        let eps = self.epsilon as f32;

        let names: Vec<String> = params.trainable_names();
        for name in names {
            let grad = grads.get(&name).ok_or_else(|| {
                Error::Contract(format!("missing gradient for parameter `{name}`"))
            })?;
            let tensor = params
                .get_mut(&name)
                .expect("trainable name exists in params");
            if grad.shape() != tensor.shape() {
                return Err(Error::dim(
                    "all",
                    format!(
                        "gradient for `{name}` has shape {}, parameter is {}",
                        grad.shape(),
                        tensor.shape()
                    ),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            for i in 0..tensor.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                tensor.data_mut()[i] -= lr * mi / (vi.sqrt() * denom_scale + eps);
            }
        }
        Ok(())
    }
}
