use crate::tensor::Tensor;

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; one instance per [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the L2 norm of the change per parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Vec<f64> {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        let mut norms = Vec::with_capacity(ids.len());
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let w = store.value_mut(id).data_mut();
            let mut delta_sq = 0.0f64;
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let d = learning_rate * mh / (vh.sqrt() + eps);
                w[i] -= d;
                delta_sq += (d as f64) * (d as f64);
            }
            norms.push(delta_sq.sqrt());
        }
        norms
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) {
        assert_eq!(first.len(), self.first.len());
        assert_eq!(second.len(), self.second.len());
        self.step = step;
        self.first = first;
        self.second = second;
    }
}
