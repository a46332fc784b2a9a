//! Adam with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

/// Optimizer state: first/second moment estimates aligned with the parameter
/// list given to [`AdamState::step`]. `step` increments by exactly one per
/// update call.
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`. Every parameter must carry a populated
    /// gradient; gradients are cleared afterwards.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let n = p.inner.borrow();
            match &n.grad {
                None => {
                    return Err(Error::Usage(format!(
                        "adam step: parameter {i} has no gradient"
                    )))
                }
                Some(g) => {
                    if g.len() != self.m[i].len() {
                        return Err(Error::Usage(format!(
                            "adam step: parameter {i} changed size"
                        )));
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in params.iter().enumerate() {
            let mut node = p.inner.borrow_mut();
            let grad = node.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let w = node.data[j];
                node.data[j] = w - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w);
            }
        }
        Ok(())
    }
}

/// Reset gradients of all parameters to zero (allocating if absent).
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}
