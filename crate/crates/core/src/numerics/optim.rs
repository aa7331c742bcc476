use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// What happens to the learning rate once warmup is over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Decays linearly from the peak rate to zero at `total_steps`.
    LinearDecay { total_steps: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
        }
    }
}

impl AdamWConfig {
    /// Learning rate applied on update number `step` (1-based).
    pub fn rate_at(&self, step: u64) -> f32 {
        let lr = self.learning_rate;
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return lr * step as f32 / self.warmup_steps as f32;
        }
        match self.schedule {
            Schedule::Constant => lr,
            Schedule::LinearDecay { total_steps } => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1);
                let done = step.saturating_sub(self.warmup_steps).min(span);
                lr * (span - done) as f32 / span as f32
            }
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay over a fixed
/// group of parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    params: Vec<ParamId>,
    step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|&id| vec![0.0; store.get(id).len()])
                .collect()
        };
        AdamW {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            params,
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_rate(&self) -> f32 {
        self.config.rate_at(self.step_count + 1)
    }

    /// Applies one update to every parameter in the group, then clears
    /// their gradients. Every parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&missing) = self
            .params
            .iter()
            .find(|&&id| store.get(id).grad().is_none())
        {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient",
                store.name(missing)
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let lr = c.rate_at(self.step_count);
        let bias1 = 1.0 - f64::from(c.beta1).powi(t);
        let bias2 = 1.0 - f64::from(c.beta2).powi(t);

        for (slot, &id) in self.params.iter().enumerate() {
            let tensor = store.get_mut(id);
            let grad = tensor.take_grad().expect("checked above");
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            for (i, theta) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = f64::from(m[i]) / bias1;
                let v_hat = f64::from(v[i]) / bias2;
                let update = m_hat / (v_hat.sqrt() + f64::from(c.eps))
                    + f64::from(c.weight_decay) * f64::from(*theta);
                *theta = (f64::from(*theta) - f64::from(lr) * update) as f32;
            }
        }
        Ok(())
    }
}
