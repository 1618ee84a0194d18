use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, ParamStore, Result, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("adam: grad {:?} for param {name} {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters: `shadow ← d·shadow + (1−d)·param`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub decay: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64) -> Self {
        Self { decay, shadow: params.clone() }
    }

    pub fn from_parts(shadow: ParamStore, decay: f64) -> Self {
        Self { decay, shadow }
    }

    pub fn update(&mut self, params: &ParamStore) {
        let d = self.decay;
        for (name, s) in self.shadow.iter_mut() {
            if let Some(p) = params.get(name) {
                for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.shadow
    }
}
