use serde::{Deserialize, Serialize};

use crate::numeric::float::cast;
use crate::numeric::{Float, ParamStore};

/// Adam hyperparameters; defaults follow the usual framework defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradients of one step so their joint L2 norm is at most this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Update count per parameter, for bias correction.
    t: Vec<u64>,
    steps: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |i: usize| vec![T::zero(); store.get(i).numel()];
        Self {
            config,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
            t: vec![0; store.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update. Frozen parameters and parameters
    /// without a gradient are skipped and keep their moments and step count.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.steps += 1;
        let c = self.config;
        let b1: T = cast(c.beta1);
        let b2: T = cast(c.beta2);
        let one = T::one();
        let lr: T = cast(c.lr);
        let eps: T = cast(c.eps);
        let scale: T = match c.max_grad_norm {
            Some(max) => {
                let norm = self.grad_norm(store);
                cast(if norm > max { max / norm } else { 1.0 })
            }
            None => one,
        };
        for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1: T = cast(1.0 - c.beta1.powi(t));
            let bc2: T = cast(1.0 - c.beta2.powi(t));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j] * scale;
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            tensor.grad = Some(grad);
        }
    }

    /// Joint L2 norm of the gradients the next step would apply.
    pub fn grad_norm(&self, store: &ParamStore<T>) -> f64 {
        let mut total = 0.0;
        for i in 0..store.len() {
            let tensor = store.get(i);
            if let (true, Some(g)) = (tensor.requires_grad, &tensor.grad) {
                total += g.iter().map(|v| v.to_f64_lossless().powi(2)).sum::<f64>();
            }
        }
        total.sqrt()
    }
}
