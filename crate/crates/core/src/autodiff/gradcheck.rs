use crate::autodiff::matrix::Matrix;
use crate::autodiff::tape::{NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` receives a fresh tape plus one leaf per entry of `params` (in order)
/// and returns a scalar loss node.
pub fn grad_check<F>(params: &[Matrix], eps: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be > 0"));
    }
    let mut eval = |values: &[Matrix], want_grad: bool| -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        let value = tape.value(loss).get(0, 0);
        let grads = if want_grad {
            tape.backward(loss)?;
            ids.iter().map(|&id| tape.grad(id)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (base, analytic) = eval(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite { param: 0, index: 0 });
    }
    let mut values = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let original = values[p].data()[i];
            values[p].data_mut()[i] = original + eps;
            let (plus, _) = eval(&values, false)?;
            values[p].data_mut()[i] = original - eps;
            let (minus, _) = eval(&values, false)?;
            values[p].data_mut()[i] = original;
            let a = analytic[p].data()[i];
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                return Err(Error::NonFinite { param: p, index: i });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
