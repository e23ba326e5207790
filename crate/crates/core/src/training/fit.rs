use std::collections::BTreeSet;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{BindMode, Bindings, ModalityModel, Param, ParamHost};
use crate::seed::derive_seed;
use crate::synthdata::{batch_iter, Batch, MultiModalDataset};
use crate::training::optimizer::{Optimizer, OptimizerConfig};

/// Everything a training loop may touch: per-modality models plus loose
/// params such as a fusion or probe head.
#[derive(Debug, Clone)]
pub(crate) struct FitState {
    pub models: Vec<ModalityModel>,
    pub extra: Vec<Param>,
}

impl FitState {
    fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        if let Some(p) = self.extra.iter_mut().find(|p| p.name == name) {
            return Some(p);
        }
        self.models.iter_mut().find_map(|m| m.param_mut(name))
    }

    fn param(&self, name: &str) -> Option<&Param> {
        if let Some(p) = self.extra.iter().find(|p| p.name == name) {
            return Some(p);
        }
        self.models.iter().find_map(|m| m.param(name))
    }

    /// Binds the `trainable` names as gradient leaves and everything else as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[String]) -> Result<Bindings> {
        let mut b = Bindings::new();
        for name in trainable {
            let p = self.param(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            b.insert(name.clone(), tape.variable(p.value.clone()));
        }
        for m in &self.models {
            m.bind(tape, BindMode::Inference, &mut b);
        }
        for p in &self.extra {
            if !b.contains(&p.name) {
                b.insert(p.name.clone(), tape.constant(p.value.clone()));
            }
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSummary {
    /// 0 means no epoch beat the starting point on validation.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub steps: usize,
}

pub(crate) fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, &format!("epoch/{epoch}"))
}

/// Mini-batch training of the `trainable` params with per-epoch validation.
/// Keeps the best-validation state (starting state included, earlier epoch
/// wins ties) and leaves it in `state`.
pub(crate) fn fit<L, V>(
    stage: &str,
    state: &mut FitState,
    trainable: &[String],
    train: &MultiModalDataset,
    opt: &OptimizerConfig,
    loss: L,
    val_accuracy: V,
) -> Result<FitSummary>
where
    L: Fn(&mut Tape, &Bindings, &FitState, &Batch) -> Result<NodeId>,
    V: Fn(&FitState) -> Result<f64>,
{
    opt.validate(&format!("optim.{stage}"))?;
    let unique: BTreeSet<&String> = trainable.iter().collect();
    if unique.is_empty() || unique.len() != trainable.len() {
        return Err(Error::config(stage, "trainable set must be nonempty and duplicate-free"));
    }
    let mut optimizer = Optimizer::new(opt.clone());
    let mut best = state.clone();
    let mut summary = FitSummary {
        best_epoch: 0,
        best_val_accuracy: val_accuracy(state)?,
        steps: 0,
    };
    for epoch in 1..=opt.epochs {
        for batch in batch_iter(train, opt.batch_size, epoch_seed(opt.seed, epoch))? {
            let mut tape = Tape::new();
            let b = state.bind(&mut tape, trainable)?;
            let l = loss(&mut tape, &b, state, &batch)?;
            if !tape.value(l).get(0, 0).is_finite() {
                return Err(Error::Divergence {
                    stage: stage.to_string(),
                    step: summary.steps,
                });
            }
            tape.backward(l)?;
            for name in trainable {
                let grad = tape.grad(b.get(name)?);
                let p = state.param_mut(name).expect("bound above");
                optimizer.step(name, &mut p.value, &grad)?;
            }
            summary.steps += 1;
        }
        let acc = val_accuracy(state)?;
        log::debug!("{stage}: epoch {epoch} val accuracy {acc:.4}");
        if acc > summary.best_val_accuracy {
            summary.best_val_accuracy = acc;
            summary.best_epoch = epoch;
            best = state.clone();
        }
    }
    *state = best;
    Ok(summary)
}
