use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled for adamw, added to the gradient for sgd and adam.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 50,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Fresh-head probe on frozen features: few parameters, so a larger step.
    pub fn linear_eval() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `prefix` names the config block in error messages, e.g. `optim.umft`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        // zero is accepted: it makes a run an exact no-op
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(field("learning_rate"), "must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config(field("epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(field("betas"), "each beta must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(field("eps"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(field("weight_decay"), "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Stateful update rule keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    moments: BTreeMap<String, Moments>,
    steps: BTreeMap<String, i32>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, value: &mut Matrix, grad: &Matrix) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: value.shape(),
                right: grad.shape(),
            });
        }
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        let w = value.data_mut();
        let g = grad.data();
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * (gi + wd * *wi);
                }
            }
            OptimizerKind::Adam | OptimizerKind::Adamw => {
                let decoupled = self.cfg.kind == OptimizerKind::Adamw;
                let (b1, b2) = self.cfg.betas;
                let t = self.steps.entry(name.to_string()).or_insert(0);
                *t += 1;
                let (c1, c2) = (1.0 - b1.powi(*t), 1.0 - b2.powi(*t));
                let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                    first: vec![0.0; g.len()],
                    second: vec![0.0; g.len()],
                });
                for i in 0..w.len() {
                    let gi = if decoupled { g[i] } else { g[i] + wd * w[i] };
                    m.first[i] = b1 * m.first[i] + (1.0 - b1) * gi;
                    m.second[i] = b2 * m.second[i] + (1.0 - b2) * gi * gi;
                    let update = (m.first[i] / c1) / ((m.second[i] / c2).sqrt() + self.cfg.eps);
                    if decoupled {
                        w[i] -= lr * wd * w[i];
                    }
                    w[i] -= lr * update;
                }
            }
        }
        Ok(())
    }
}
