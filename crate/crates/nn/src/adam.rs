//! Adam optimizer and the reduce-on-plateau learning-rate schedule.

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1.0e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are kept in the same element
/// type as the parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Adam {
            config,
            m: store.zero_grads(),
            v: store.zero_grads(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update. `grads` must be parallel to the store entries.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.step_count += 1;
        let t = self.step_count;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.config.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.config.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.config.beta1.powi(t as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.config.beta2.powi(t as i32)));
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);

        for i in 0..store.len() {
            let entry = store.entry_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i];
            debug_assert_eq!(g.len(), entry.data.len());
            for k in 0..entry.data.len() {
                m[k] = b1 * m[k] + one_m_b1 * g[k];
                v[k] = b2 * v[k] + one_m_b2 * g[k] * g[k];
                let m_hat = m[k] * corr1;
                let v_hat = v[k] * corr2;
                entry.data[k] = entry.data[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Halves the learning rate after `patience` consecutive epochs without
/// an improvement in the validation score (lower is better).
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    /// Feed one epoch's validation loss; returns the multiplier to apply
    /// to the learning rate (1.0 or `factor`).
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best,
        };
        if improved {
            self.best = Some(val_loss);
            self.stale = 0;
            return 1.0;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return self.factor;
        }
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", 1, 3, vec![1.0, -2.0, 3.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = vec![vec![0.0; 3]];
        adam.step(&mut store, &grads);
        assert_eq!(store.entry(0).data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step: m_hat = g, v_hat = g^2, so
        // delta = -lr * g / (|g| + eps).
        let cfg = AdamConfig {
            learning_rate: 1.0e-2,
            ..AdamConfig::default()
        };
        let g = 0.37;
        let mut store = ParamStore::<f64>::new();
        store.add("w", 1, 1, vec![1.0]);
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store, &[vec![g]]);
        let expected = 1.0 - cfg.learning_rate * g / (g.abs() + cfg.epsilon);
        assert!((store.entry(0).data[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = x^2, grad = 2x. A few hundred steps should get close to 0.
        let cfg = AdamConfig {
            learning_rate: 1.0e-2,
            ..AdamConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        store.add("x", 1, 1, vec![1.0]);
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..500 {
            let x = store.entry(0).data[0];
            adam.step(&mut store, &[vec![2.0 * x]]);
        }
        assert!(store.entry(0).data[0].abs() < 1e-2);
    }

    #[test]
    fn plateau_halves_after_five_flat_epochs() {
        let mut sched = PlateauScheduler::new(5, 0.5);
        let mut lr = 1.0e-4;
        lr *= sched.observe(10.0); // first observation sets the best
        for _ in 0..4 {
            lr *= sched.observe(10.0);
        }
        assert_eq!(lr, 1.0e-4);
        lr *= sched.observe(10.0); // fifth flat epoch
        assert_eq!(lr, 5.0e-5);
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut sched = PlateauScheduler::new(5, 0.5);
        sched.observe(10.0);
        for _ in 0..4 {
            assert_eq!(sched.observe(10.0), 1.0);
        }
        assert_eq!(sched.observe(9.0), 1.0); // improves on epoch 5
        for _ in 0..4 {
            assert_eq!(sched.observe(9.0), 1.0);
        }
        assert_eq!(sched.observe(9.0), 0.5);
    }

    #[test]
    fn ten_flat_epochs_quarter_the_rate() {
        let mut sched = PlateauScheduler::new(5, 0.5);
        let mut lr = 8.0;
        sched.observe(1.0);
        for _ in 0..10 {
            lr *= sched.observe(1.0);
        }
        assert_eq!(lr, 2.0);
    }
}
