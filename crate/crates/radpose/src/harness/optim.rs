//! Adam with bias correction and a global gradient-norm ceiling. Frozen
//! parameters are excluded from both the norm and the update.

use super::config::OptimizerConfig;
use crate::nn::params::ParameterStore;
use crate::nn::NnError;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Stateful Adam: first/second moment estimates per parameter plus the
/// update counter driving bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimizerConfig,
    first: BTreeMap<String, Array2<f64>>,
    second: BTreeMap<String, Array2<f64>>,
    updates: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, first: BTreeMap::new(), second: BTreeMap::new(), updates: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update from `grads`, ignoring entries for frozen
    /// parameters. When the global L2 norm of the trainable gradients
    /// exceeds the configured ceiling, every gradient is rescaled so the
    /// norm equals the ceiling. Returns the pre-clip norm.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Array2<f64>>,
    ) -> Result<f64, NnError> {
        let mut norm_sq = 0.0;
        for (name, grad) in grads {
            if !store.is_frozen(name) {
                norm_sq += grad.iter().map(|g| g * g).sum::<f64>();
            }
        }
        let norm = norm_sq.sqrt();
        let rescale =
            if norm > self.config.gradient_clip { self.config.gradient_clip / norm } else { 1.0 };

        self.updates += 1;
        let b1 = self.config.momentum;
        let b2 = self.config.second_moment;
        let correction1 = 1.0 - b1.powi(self.updates as i32);
        let correction2 = 1.0 - b2.powi(self.updates as i32);
        let rate = self.config.learning_rate;
        let eps = self.config.epsilon;

        for (name, grad) in grads {
            if store.is_frozen(name) {
                continue;
            }
            let first = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            let second = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            first.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g * rescale);
            second.zip_mut_with(grad, |v, &g| {
                let g = g * rescale;
                *v = b2 * *v + (1.0 - b2) * g * g
            });

            let mut value = store.get(name)?.clone();
            ndarray::Zip::from(&mut value).and(&*first).and(&*second).for_each(|p, &m, &v| {
                *p -= rate * (m / correction1) / ((v / correction2).sqrt() + eps);
            });
            store.set(name, value)?;
        }
        store.bump_step();
        Ok(norm)
    }
}
