//! Adam with inspectable state so checkpoints can resume bit-exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moment per parameter name.
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients can carry a graph back to the forward pass
            let g = &g.detach();
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?.detach();
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            if self.lr != 0.0 {
                let m_hat = (&m / bc1)?;
                let v_hat = (&v / bc2)?;
                let delta = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                let next = (var.as_tensor() - (delta * self.lr)?)?;
                var.set(&next)?;
            }
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moments as named tensors, `<prefix>m/<param>` and `<prefix>v/<param>`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}m/{name}"), m.clone()));
            out.push((format!("{prefix}v/{name}"), v.clone()));
        }
        out
    }

    pub fn restore(
        &mut self,
        step: u64,
        tensors: &BTreeMap<String, Tensor>,
        prefix: &str,
        store: &ParamStore,
    ) -> Result<()> {
        self.step = step;
        self.moments.clear();
        for (name, var) in store.vars() {
            let m = tensors.get(&format!("{prefix}m/{name}"));
            let v = tensors.get(&format!("{prefix}v/{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.dims() != var.dims() || v.dims() != var.dims() {
                        return Err(Error::validation(format!(
                            "optimizer state for {name} has the wrong shape"
                        )));
                    }
                    self.moments.insert(name.clone(), (m.clone(), v.clone()));
                }
                (None, None) if step == 0 => {}
                _ => {
                    return Err(Error::validation(format!(
                        "optimizer state for {name} is missing"
                    )))
                }
            }
        }
        Ok(())
    }
}
