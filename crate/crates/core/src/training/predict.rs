use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::nn::{BindMode, Bindings, ModalityModel};
use crate::synthdata::{MultiModalDataset, Split};
use crate::training::bundle::FusionHead;

/// Arithmetic mean of the models' class distributions, one row per sample.
/// `inputs[i]` feeds the model with modality id `i + 1`.
pub fn ume_predict(models: &[ModalityModel], inputs: &[Matrix]) -> Result<Matrix> {
    let Some(first) = models.first() else {
        return Err(Error::config("models", "ensemble needs at least one model"));
    };
    let classes = first.architecture().classes;
    if let Some(bad) = models.iter().find(|m| m.architecture().classes != classes) {
        return Err(Error::config(
            "model.classes",
            format!(
                "modality {} predicts {} classes, modality {} predicts {classes}",
                bad.modality(),
                bad.architecture().classes,
                first.modality()
            ),
        ));
    }
    let mut total: Option<Matrix> = None;
    for m in models {
        let p = m.predict_proba(modality_input(inputs, m.modality())?)?;
        total = Some(match total {
            None => p,
            Some(t) => t.add(&p)?,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / models.len() as f64))
}

fn modality_input(inputs: &[Matrix], id: usize) -> Result<&Matrix> {
    inputs
        .get(id - 1)
        .ok_or_else(|| Error::config("inputs", format!("no input for modality {id}")))
}

/// Anything that maps aligned per-modality inputs to class distributions.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Single(&'a ModalityModel),
    Ensemble(&'a [ModalityModel]),
    LateFusion {
        models: &'a [ModalityModel],
        head: &'a FusionHead,
    },
}

impl Predictor<'_> {
    pub fn predict(&self, inputs: &[Matrix]) -> Result<Matrix> {
        match *self {
            Predictor::Single(m) => m.predict_proba(modality_input(inputs, m.modality())?),
            Predictor::Ensemble(models) => ume_predict(models, inputs),
            Predictor::LateFusion { models, head } => {
                let mut tape = Tape::new();
                let mut b = Bindings::new();
                let mut xs = Vec::with_capacity(models.len());
                for m in models {
                    m.bind(&mut tape, BindMode::Inference, &mut b);
                    xs.push(tape.constant(modality_input(inputs, m.modality())?.clone()));
                }
                head.bind(&mut tape, BindMode::Inference, &mut b);
                let z = head.logits(&mut tape, &b, models, &xs)?;
                let p = tape.softmax(z)?;
                Ok(tape.value(p).clone())
            }
        }
    }
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    let hits = (0..probs.rows())
        .filter(|&r| probs.argmax_row(r) == labels[r])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(predictor: Predictor<'_>, ds: &MultiModalDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset(format!("{} split", ds.split())));
    }
    accuracy(&predictor.predict(ds.inputs())?, ds.labels())
}

/// Accuracies of several predictors on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    /// Predictor name → top-1 accuracy.
    pub accuracy: BTreeMap<String, f64>,
    /// Modality id → linear-probe accuracy of its encoder.
    pub linear_eval: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn new(ds: &MultiModalDataset) -> Self {
        Self {
            split: ds.split(),
            samples: ds.len(),
            accuracy: BTreeMap::new(),
            linear_eval: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: impl Into<String>, predictor: Predictor<'_>, ds: &MultiModalDataset) -> Result<f64> {
        let acc = evaluate(predictor, ds)?;
        self.accuracy.insert(name.into(), acc);
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn ume_of_opposite_certainties_is_uniform() {
        // two heads pushed hard to opposite classes
        let arch = Architecture::mlp(2, 2, 2, 2);
        let mut a = ModalityModel::new(1, arch, 0).unwrap();
        let mut b = ModalityModel::new(2, arch, 0).unwrap();
        for m in [&mut a, &mut b] {
            for name in ["encoder/fc1", "encoder/fc2", "head"] {
                let p = m.prefix();
                m.set_param(&format!("{p}/{name}.weight"), Matrix::zeros(2, 2)).unwrap();
            }
        }
        a.set_param("m1/head.bias", Matrix::row_vector(&[800.0, -800.0])).unwrap();
        b.set_param("m2/head.bias", Matrix::row_vector(&[-800.0, 800.0])).unwrap();
        let x = Matrix::zeros(1, 2);
        let p = ume_predict(&[a, b], &[x.clone(), x]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn ume_of_identical_models_is_the_model() {
        let arch = Architecture::mlp(3, 5, 4, 3);
        let m1 = ModalityModel::new(1, arch, 7).unwrap();
        let mut m2 = ModalityModel::from_parts(
            2,
            arch,
            m1.base_params()
                .map(|p| crate::nn::Param::new(p.name.replacen("m1/", "m2/", 1), p.value.clone()))
                .collect(),
            vec![],
        )
        .unwrap();
        m2.set_frozen(false);
        let x = Matrix::from_fn(6, 3, |r, c| (r as f64 - c as f64) * 0.4);
        let single = m1.predict_proba(&x).unwrap();
        let ens = ume_predict(&[m1, m2], &[x.clone(), x]).unwrap();
        for (a, b) in single.data().iter().zip(ens.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ume_rejects_class_mismatch() {
        let a = ModalityModel::new(1, Architecture::mlp(2, 2, 2, 2), 0).unwrap();
        let b = ModalityModel::new(2, Architecture::mlp(2, 2, 2, 3), 0).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(ume_predict(&[a, b], &[x.clone(), x]).unwrap_err().is_config());
    }

    #[test]
    fn accuracy_ties_go_to_class_zero() {
        let uniform = Matrix::filled(4, 3, 1.0 / 3.0);
        assert_eq!(accuracy(&uniform, &[0, 1, 0, 2]).unwrap(), 0.5);
        let perfect = Matrix::from_rows(&[&[0.1, 0.9], &[0.8, 0.2]]);
        assert_eq!(accuracy(&perfect, &[1, 0]).unwrap(), 1.0);
        assert!(matches!(accuracy(&Matrix::zeros(0, 2), &[]), Err(Error::EmptyDataset(_))));
    }
}
