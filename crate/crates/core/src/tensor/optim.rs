use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Each step first shrinks the parameter by `lr * weight_decay`, then
/// applies the bias-corrected moment update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        AdamW {
            config,
            m: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "adamw: {} gradients for {} parameters (state holds {})",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() || self.m[id.index()].shape() != g.shape() {
                    return Err(Error::shape("adamw", params.get(id).shape(), g.shape()));
                }
            }
        }
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in params.ids().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                p[j] -= lr * weight_decay * p[j];
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
