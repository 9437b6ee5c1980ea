use serde::{Deserialize, Serialize};

use super::tensor::DenseTensor;
use crate::error::{shape_err, Result};

/// Bias-corrected Adam with constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<DenseTensor>,
    v: Vec<DenseTensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut DenseTensor], grads: &[&DenseTensor]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(format!("{} params vs {} grads", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return shape_err(format!("param {:?} vs grad {:?}", p.shape(), g.shape()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| DenseTensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return shape_err("optimizer state does not mirror parameter shapes");
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pv = p.values_mut();
            let (mv, vv) = (m.values_mut(), v.values_mut());
            for (i, &gi) in g.values().iter().enumerate() {
                mv[i] = self.beta1 * mv[i] + (1.0 - self.beta1) * gi;
                vv[i] = self.beta2 * vv[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = mv[i] / bc1;
                let vhat = vv[i] / bc2;
                pv[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
