//! Adam updates and the exponential moving average of parameters.

use serde::{Deserialize, Serialize};

use super::model::ClassifierParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: ClassifierParams,
    v: ClassifierParams,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, like: &ClassifierParams) -> Self {
        let mut zero = like.clone();
        for t in zero.tensors_mut() {
            t.fill(0.0);
        }
        Self {
            cfg,
            m: zero.clone(),
            v: zero,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ClassifierParams, grad: &ClassifierParams) {
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Shadow copy updated as `shadow = decay * shadow + (1 - decay) * current`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaModel {
    pub shadow: ClassifierParams,
    pub decay: f64,
}

impl EmaModel {
    pub fn new(initial: &ClassifierParams, decay: f64) -> Self {
        Self {
            shadow: initial.clone(),
            decay,
        }
    }

    pub fn update(&mut self, current: &ClassifierParams) {
        let d = self.decay;
        for (s, c) in self.shadow.tensors_mut().into_iter().zip(current.tensors()) {
            for (s, &c) in s.iter_mut().zip(c) {
                *s = d * *s + (1.0 - d) * c;
            }
        }
    }
}
