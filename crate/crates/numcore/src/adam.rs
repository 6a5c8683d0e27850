use crate::{NumError, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay. Moments are allocated lazily to match
/// the parameter store on the first step.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`, then clears
    /// them. A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NumError> {
        for (_, p) in params.iter() {
            if !p.grad.all_finite() {
                return Err(NumError::NonFinite(format!("gradient of parameter {}", p.name)));
            }
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for k in 0..w.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * w[k]);
            }
        }
        params.zero_grad();
        Ok(())
    }
}
