use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` leaves it untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient count does not match store");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let p = store.get_mut(id);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter");
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Some(Tensor::scalar(2.0))]);
        let delta = store.get(id).item() - 1.0;
        let expected = -1e-3 * (2.0 / (2.0 + 1e-8));
        assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store, &[Some(Tensor::zeros(&[3]))]);
        }
        assert_eq!(store.get(id).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn equal_gradients_update_identically() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(0.25));
        let b = store.insert("b", Tensor::scalar(0.25));
        let mut adam = Adam::new(&store, AdamConfig::default());
        for k in 0..10 {
            let g = Tensor::scalar(0.3 * f64::from(k) - 1.0);
            adam.step(&mut store, &[Some(g.clone()), Some(g)]);
        }
        assert_eq!(store.get(a).item().to_bits(), store.get(b).item().to_bits());
    }
}
