//! AdamW and momentum SGD, both with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{round_to_precision, Tensor};

fn adamw_lr() -> f64 {
    2e-4
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn sgd_lr() -> f64 {
    0.01
}
fn momentum() -> f64 {
    0.9
}
fn weight_decay() -> f64 {
    1e-4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adamw {
        #[serde(default = "adamw_lr")]
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "weight_decay")]
        weight_decay: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "sgd_lr")]
        lr: f64,
        #[serde(default = "momentum")]
        momentum: f64,
        #[serde(default = "weight_decay")]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adamw()
    }
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        OptimizerConfig::Adamw {
            lr: adamw_lr(),
            beta1: beta1(),
            beta2: beta2(),
            weight_decay: weight_decay(),
            eps: adam_eps(),
        }
    }

    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { lr: sgd_lr(), momentum: momentum(), weight_decay: weight_decay() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adamw { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
        }
        match *self {
            OptimizerConfig::Adamw { beta1, beta2, weight_decay, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::Config(format!("betas ({beta1}, {beta2}) must lie in [0, 1)")));
                }
                if !(eps > 0.0) || !(weight_decay >= 0.0) {
                    return Err(Error::Config("adamw eps must be positive and weight_decay non-negative".into()));
                }
            }
            OptimizerConfig::Sgd { momentum, weight_decay, .. } => {
                if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
                    return Err(Error::Config(format!(
                        "sgd momentum {momentum} must lie in [0, 1) and weight_decay be non-negative"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter state, aligned with the parameter list passed to `step`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Optimizer> {
        cfg.validate()?;
        Ok(Optimizer { cfg, steps: 0, first: Vec::new(), second: Vec::new() })
    }

    /// One update with the configured learning rate times `lr_scale`.
    /// Parameters without a gradient are left untouched. Any non-finite
    /// gradient rejects the whole step before anything changes.
    pub fn step(&mut self, params: &[(String, Tensor)], lr_scale: f64) -> Result<()> {
        for (name, p) in params {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGrad { param: name.clone() });
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        let t = (self.steps + 1) as i32;
        let mut staged = Vec::with_capacity(params.len());
        for (i, (name, p)) in params.iter().enumerate() {
            let Some(g) = p.grad_vec() else { continue };
            let mut w = p.to_vec();
            let (mut m, mut v) = (self.first[i].clone(), self.second[i].clone());
            match self.cfg {
                OptimizerConfig::Adamw { lr, beta1, beta2, weight_decay, eps } => {
                    let lr = lr * lr_scale;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for j in 0..w.len() {
                        w[j] -= lr * weight_decay * w[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { lr, momentum, weight_decay } => {
                    let lr = lr * lr_scale;
                    for j in 0..w.len() {
                        m[j] = momentum * m[j] + g[j];
                        w[j] -= lr * weight_decay * w[j] + lr * m[j];
                    }
                }
            }
            round_to_precision(&mut w);
            if w.iter().chain(&m).chain(&v).any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad { param: format!("{name} (update overflowed)") });
            }
            staged.push((i, w, m, v));
        }
        self.steps += 1;
        for (i, w, m, v) in staged {
            params[i].1.update(|dst| dst.copy_from_slice(&w));
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }
}
