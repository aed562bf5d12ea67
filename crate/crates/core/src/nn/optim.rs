use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenoiserModel, GradientTape, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per store entry.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable entry. Gradients
    /// are checked for finiteness before anything is modified.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, tape: &GradientTape<T>, lr: f64) -> Result<()> {
        if !tape.matches(store) {
            return Err(Error::invalid("gradient tape does not mirror the parameter table"));
        }
        for id in store.ids() {
            if !tape.get(id).is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for {}", store.name(id))));
            }
        }
        if self.first.is_empty() {
            self.first = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let k = id.0;
            let grad = tape.get(id).data();
            let value = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in value
                .iter_mut()
                .zip(grad)
                .zip(&mut self.first[k])
                .zip(&mut self.second[k])
            {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = T::of_f64(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(AdamConfig::default())
    }
}

pub fn apply_update<T: Scalar>(
    model: &mut DenoiserModel<T>,
    tape: &GradientTape<T>,
    optimizer: &mut Adam,
    lr: f64,
) -> Result<()> {
    optimizer.step(model.params_mut(), tape, lr)
}
