use serde::{Deserialize, Serialize};

use super::{NdTensor, Params, Scalar};
use crate::{Error, Result};

/// AdamW hyperparameters. Decoupled weight decay acts on parameters only,
/// never on the moment estimates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps < 0.0
            || self.weight_decay < 0.0
        {
            return Err(Error::config(format!("invalid AdamW hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamWState<T: Scalar> {
    pub cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &Params<T>, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Ok(AdamWState { cfg, m, v, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is aligned with the store's entry order; `None`
    /// entries (parameters unused by this graph) are skipped entirely.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::config(format!(
                "AdamW: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let lr = T::of_f64(self.cfg.lr);
        let eps = T::of_f64(self.cfg.eps);
        let wd = T::of_f64(self.cfg.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let Some(grad) = grads[i].as_ref() else { continue };
            let p = params.get_mut(name);
            if grad.len() != p.numel() {
                return Err(Error::Optimizer {
                    name: name.clone(),
                    detail: format!("gradient length {} vs parameter {}", grad.len(), p.numel()),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Optimizer {
                    name: name.clone(),
                    detail: "non-finite gradient".into(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pj = *pj - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pj);
            }
        }
        Ok(())
    }

    /// Moments as named tensors for exact-resume checkpoints.
    pub fn export_moments(&self, params: &Params<T>) -> Vec<(String, NdTensor<T>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.push((
                format!("opt.m.{name}"),
                NdTensor::new(shape.clone(), self.m[i].clone()).expect("moment shape"),
            ));
            out.push((
                format!("opt.v.{name}"),
                NdTensor::new(shape, self.v[i].clone()).expect("moment shape"),
            ));
        }
        out
    }

    pub fn restore_moments(
        &mut self,
        params: &Params<T>,
        lookup: &dyn Fn(&str) -> Option<NdTensor<T>>,
        step: u64,
    ) -> Result<()> {
        for (i, (name, t)) in params.iter().enumerate() {
            let m = lookup(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Prerequisite(format!("optimizer moment m for `{name}`")))?;
            let v = lookup(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Prerequisite(format!("optimizer moment v for `{name}`")))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Optimizer {
                    name: name.to_string(),
                    detail: "moment shape mismatch on restore".into(),
                });
            }
            self.m[i] = m.into_data();
            self.v[i] = v.into_data();
        }
        self.step = step;
        Ok(())
    }
}
