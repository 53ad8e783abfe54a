//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::networks::params::ParamStore;
use crate::tensor::Tensor;

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
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Resume from stored moments; shapes must match `params`.
    pub fn from_state(cfg: AdamWConfig, params: &ParamStore, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) -> Result<Self> {
        let fits = |xs: &[Tensor]| {
            xs.len() == params.len() && xs.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::InvalidArgument("optimizer moments do not match parameters".into()));
        }
        Ok(Self { cfg, m, v, step })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Every trainable tensor needs a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                None => return Err(Error::MissingGradient(params.iter().nth(i).unwrap().0.to_string())),
                Some(g) if g.shape() != params.tensors()[i].shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "adamw",
                        lhs: params.tensors()[i].shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = g.as_ref().expect("checked above");
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = *p * decay - lr * update;
            }
        }
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "adamw" });
        }
        Ok(())
    }
}
