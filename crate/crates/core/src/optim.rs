//! Adam-style adaptive gradient steps over a `ParamStore`.

use crate::error::{DegiaError, Result};
use crate::params::ParamStore;
use std::collections::BTreeMap;

/// Adam with bias correction. The step refuses non-finite gradients with a
/// diagnostic naming the offending parameter; nothing is partially applied.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every gradient entry. Gradients are validated for
    /// finiteness before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(DegiaError::NonFinite {
                    context: format!("gradient of {name:?}"),
                    detail: format!("index {i} = {}", g[i]),
                });
            }
            let expected = params.get(name)?.len();
            if g.len() != expected {
                return Err(DegiaError::shape(
                    "Adam::step",
                    format!("gradient for {name:?} has {} values, parameter has {expected}", g.len()),
                ));
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(name)?;
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
