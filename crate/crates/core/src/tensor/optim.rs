use indexmap::IndexMap;

use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// lr 1e-4 and no weight decay, the class-conditional training setting.
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers per parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T> Default for AdamWState<T> {
    fn default() -> Self {
        AdamWState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: AdamWState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            state: AdamWState::default(),
        })
    }

    pub fn with_state(config: AdamWConfig, state: AdamWState<T>) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config, state })
    }

    /// One update of every parameter that carries a gradient.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.config.validate()?;
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (nb1, nb2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let decay = T::one() - T::lit(c.lr * c.weight_decay);
        for (path, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let n = p.len();
            let m = self.state.m.entry(path.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.state.v.entry(path.clone()).or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n || v.len() != n {
                return Err(Error::shape("adamw", format!("optimizer state size mismatch for {path}")));
            }
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + nb1 * g;
                *vi = b2 * *vi + nb2 * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
