use super::{ParamStore, Scalar};

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, scaled by `grad_scale`
    /// (e.g. `1 / batch`), then clear them.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grad_scale: f64, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = (p.value.data_mut(), p.grad.data_mut());
            for i in 0..value.len() {
                let g = grad[i].f64() * grad_scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = value[i].f64();
                let updated = w - lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w);
                value[i] = T::of(updated);
                grad[i] = T::zero();
            }
        }
    }
}
