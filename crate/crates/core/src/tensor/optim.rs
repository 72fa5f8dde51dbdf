use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, Parameter};

pub trait Optimizer {
    /// Applies one update from the accumulated gradients. Frozen parameters
    /// are skipped and keep their optimizer state untouched.
    fn step(&mut self, params: &mut [&mut Parameter]);
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Parameter]) {
        for p in params.iter_mut().filter(|p| !p.is_frozen()) {
            let lr = self.lr;
            let (grad, value) = p.grad_and_value_mut();
            value.iter_mut().zip(grad).for_each(|(v, g)| *v -= lr * g);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with per-parameter step counts, so a parameter that sits out some
/// steps gets the right bias correction when it resumes.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Parameter]) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for p in params.iter_mut().filter(|p| !p.is_frozen()) {
            let n = p.value().len();
            let st = self.state.entry(p.id()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            let (grad, value) = p.grad_and_value_mut();
            for i in 0..n {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let mh = st.m[i] / c1;
                let vh = st.v[i] / c2;
                value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
