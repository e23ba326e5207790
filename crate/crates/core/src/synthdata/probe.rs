//! Linear softmax-regression probe on raw inputs, written against plain
//! slices so it shares no code with the autodiff engine it is used to check.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthdata::{generate, MultiModalDataset, SynthConfig};

const STEPS: usize = 1000;
const L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

struct Design {
    rows: usize,
    /// Feature count including the trailing constant column.
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Concatenates the chosen modalities, standardizes with train statistics
/// and appends a bias column.
fn design(ds: &MultiModalDataset, subset: &[usize], mean: &[f64], sd: &[f64]) -> Design {
    let width = mean.len();
    let mut data = Vec::with_capacity(ds.len() * (width + 1));
    for r in 0..ds.len() {
        let mut j = 0;
        for &m in subset {
            for &v in ds.input(m).row(r) {
                data.push((v - mean[j]) / sd[j]);
                j += 1;
            }
        }
        data.push(1.0);
    }
    Design {
        rows: ds.len(),
        cols: width + 1,
        data,
    }
}

fn column_stats(ds: &MultiModalDataset, subset: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let width: usize = subset.iter().map(|&m| ds.input(m).cols()).sum();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; width];
    let mut sq = vec![0.0; width];
    for r in 0..ds.len() {
        let mut j = 0;
        for &m in subset {
            for &v in ds.input(m).row(r) {
                mean[j] += v;
                sq[j] += v * v;
                j += 1;
            }
        }
    }
    let sd = mean
        .iter_mut()
        .zip(&sq)
        .map(|(mu, s)| {
            *mu /= n;
            let var = s / n - *mu * *mu;
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

/// Largest eigenvalue of `XᵀX / n` by power iteration, for a safe step size.
fn top_eigenvalue(x: &Design) -> f64 {
    let mut v = vec![1.0 / (x.cols as f64).sqrt(); x.cols];
    let mut lambda = 1.0;
    for _ in 0..100 {
        let mut w = vec![0.0; x.cols];
        for r in 0..x.rows {
            let row = x.row(r);
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wj, a) in w.iter_mut().zip(row) {
                *wj += dot * a;
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        lambda = norm / x.rows as f64;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

fn scores(x: &Design, weights: &[f64], classes: usize, r: usize) -> Vec<f64> {
    let row = x.row(r);
    (0..classes)
        .map(|c| {
            weights[c * x.cols..(c + 1) * x.cols]
                .iter()
                .zip(row)
                .map(|(w, a)| w * a)
                .sum()
        })
        .collect()
}

fn accuracy(x: &Design, labels: &[usize], weights: &[f64], classes: usize) -> f64 {
    let hits = (0..x.rows)
        .filter(|&r| {
            let s = scores(x, weights, classes, r);
            let mut best = 0;
            for c in 1..classes {
                if s[c] > s[best] {
                    best = c;
                }
            }
            best == labels[r]
        })
        .count();
    hits as f64 / x.rows as f64
}

/// Fits multinomial logistic regression on the train split of `cfg` using
/// only the modalities in `subset` (1-based), and scores train and test.
pub fn bayes_probe(cfg: &SynthConfig, subset: &[usize]) -> Result<ProbeReport> {
    let splits = generate(cfg)?;
    probe_datasets(&splits.train, &splits.test, subset)
}

pub fn probe_datasets(train: &MultiModalDataset, test: &MultiModalDataset, subset: &[usize]) -> Result<ProbeReport> {
    if subset.is_empty() || subset.iter().any(|&m| m == 0 || m > train.modality_count()) {
        return Err(Error::config("probe.subset", format!("invalid modality subset {subset:?}")));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset("probe".into()));
    }
    let classes = train.classes();
    let (mean, sd) = column_stats(train, subset);
    let xtr = design(train, subset, &mean, &sd);
    let xte = design(test, subset, &mean, &sd);
    // softmax-regression curvature is at most half the input second moment
    let lr = 1.0 / (0.5 * top_eigenvalue(&xtr) + L2);
    let n = xtr.rows as f64;
    let mut weights = vec![0.0; classes * xtr.cols];
    for _ in 0..STEPS {
        let mut grad: Vec<f64> = weights.iter().map(|w| L2 * w).collect();
        for r in 0..xtr.rows {
            let s = scores(&xtr, &weights, classes, r);
            let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = s.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            let row = xtr.row(r);
            for c in 0..classes {
                let resid = exp[c] / z - if c == train.labels()[r] { 1.0 } else { 0.0 };
                for (g, a) in grad[c * xtr.cols..(c + 1) * xtr.cols].iter_mut().zip(row) {
                    *g += resid * a / n;
                }
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= lr * g;
        }
    }
    Ok(ProbeReport {
        train_accuracy: accuracy(&xtr, train.labels(), &weights, classes),
        test_accuracy: accuracy(&xte, test.labels(), &weights, classes),
    })
}
