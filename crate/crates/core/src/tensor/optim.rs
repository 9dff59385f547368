//! Stochastic gradient descent and Adam.
//!
//! Both optimizers own the parameter list, validate that every parameter has
//! a finite gradient before touching any data, and clear all gradients after
//! a successful step. State slots (momentum, Adam moments) are allocated on
//! first use.

use super::{Tensor, TensorError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum Method {
    Sgd { momentum: f32, velocity: Vec<Option<Vec<f32>>> },
    Adam { m: Vec<Option<Vec<f32>>>, v: Vec<Option<Vec<f32>>> },
}

/// Updates a named parameter list in place from tape gradients.
pub struct Optimizer {
    params: Vec<(String, Tensor)>,
    lr: f32,
    method: Method,
    steps: u64,
}

impl Optimizer {
    /// Plain SGD (momentum 0).
    pub fn sgd(params: Vec<(String, Tensor)>, lr: f32) -> Self {
        Self::sgd_with_momentum(params, lr, 0.0)
    }

    pub fn sgd_with_momentum(params: Vec<(String, Tensor)>, lr: f32, momentum: f32) -> Self {
        let n = params.len();
        Optimizer {
            params,
            lr,
            method: Method::Sgd { momentum, velocity: vec![None; n] },
            steps: 0,
        }
    }

    /// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8) and
    /// bias-corrected moments. Only the learning rate is configurable.
    pub fn adam(params: Vec<(String, Tensor)>, lr: f32) -> Self {
        let n = params.len();
        Optimizer {
            params,
            lr,
            method: Method::Adam { m: vec![None; n], v: vec![None; n] },
            steps: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clears gradients on all parameters.
    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update. Fails without modifying anything if any parameter
    /// is missing a gradient or holds a non-finite one.
    pub fn step(&mut self) -> Result<(), TensorError> {
        let mut grads = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let g = p
                .grad()
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
            grads.push(g);
        }
        self.steps += 1;
        match &mut self.method {
            Method::Sgd { momentum, velocity } => {
                let (mu, lr) = (*momentum, self.lr);
                for (((_, p), g), vel) in self.params.iter().zip(&grads).zip(velocity.iter_mut()) {
                    if mu == 0.0 {
                        p.update_data(|d| {
                            for (x, gi) in d.iter_mut().zip(g) {
                                *x -= lr * gi;
                            }
                        });
                    } else {
                        let v = vel.get_or_insert_with(|| vec![0.0; g.len()]);
                        for (vi, gi) in v.iter_mut().zip(g) {
                            *vi = mu * *vi + gi;
                        }
                        p.update_data(|d| {
                            for (x, vi) in d.iter_mut().zip(v.iter()) {
                                *x -= lr * vi;
                            }
                        });
                    }
                }
            }
            Method::Adam { m, v } => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let lr = self.lr as f64;
                for (((_, p), g), (mi, vi)) in self
                    .params
                    .iter()
                    .zip(&grads)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    let ms = mi.get_or_insert_with(|| vec![0.0; g.len()]);
                    let vs = vi.get_or_insert_with(|| vec![0.0; g.len()]);
                    p.update_data(|d| {
                        for (((x, gi), me), ve) in
                            d.iter_mut().zip(g).zip(ms.iter_mut()).zip(vs.iter_mut())
                        {
                            let gf = *gi as f64;
                            let mn = ADAM_BETA1 * *me as f64 + (1.0 - ADAM_BETA1) * gf;
                            let vn = ADAM_BETA2 * *ve as f64 + (1.0 - ADAM_BETA2) * gf * gf;
                            *me = mn as f32;
                            *ve = vn as f32;
                            let m_hat = mn / c1;
                            let v_hat = vn / c2;
                            *x -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
                        }
                    });
                }
            }
        }
        self.zero_grad();
        Ok(())
    }
}
