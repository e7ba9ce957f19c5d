use std::collections::HashMap;

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

fn check(store: &ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    for &id in ids {
        if store.get(id).grad.is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
    }
    Ok(())
}

/// Plain gradient descent. Gradients are cleared after each step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        check(store, ids, self.lr)?;
        for &id in ids {
            let t = store.get_mut(id);
            let g = t.grad.take().expect("checked");
            for (p, g) in t.data_mut().iter_mut().zip(&g) {
                *p -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        check(store, ids, self.lr)?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in ids {
            let t = store.get_mut(id);
            let g = t.grad.take().expect("checked");
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
