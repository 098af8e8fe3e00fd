//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::checkpoint::ParamStore;
use crate::error::{CgdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `names`; each must have a gradient.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        names: impl IntoIterator<Item = &'a str>,
        lr: f64,
    ) -> Result<()> {
        let names: Vec<&str> = names.into_iter().collect();
        for name in &names {
            let g = grads
                .get(*name)
                .ok_or_else(|| CgdError::Graph(format!("no gradient for parameter `{name}`")))?;
            let p = params.require(name)?;
            if g.shape() != p.shape() {
                return Err(CgdError::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for name in names {
            let g = &grads[name];
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
