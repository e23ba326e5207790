use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-aligned per-modality inputs with one shared label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalDataset {
    split: Split,
    inputs: Vec<Matrix>,
    labels: Vec<usize>,
    classes: usize,
}

impl MultiModalDataset {
    pub fn new(split: Split, inputs: Vec<Matrix>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::config("dataset", "needs at least one modality"));
        }
        for x in &inputs {
            if x.rows() != labels.len() {
                return Err(Error::Shape {
                    op: "dataset",
                    left: (labels.len(), 1),
                    right: x.shape(),
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::config("dataset.labels", format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            split,
            inputs,
            labels,
            classes,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn modality_count(&self) -> usize {
        self.inputs.len()
    }

    /// Inputs of modality `id` (1-based).
    pub fn input(&self, id: usize) -> &Matrix {
        &self.inputs[id - 1]
    }

    pub fn inputs(&self) -> &[Matrix] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            split: self.split,
            inputs: self.inputs.iter().map(|x| x.gather_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Copy with modality `id` (1-based) replaced by zeros.
    pub fn with_zeroed(&self, id: usize) -> Self {
        let mut out = self.clone();
        let x = &mut out.inputs[id - 1];
        *x = Matrix::zeros(x.rows(), x.cols());
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `{stem}_m{id}.csv` per modality and `{stem}_labels.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (i, x) in self.inputs.iter().enumerate() {
            let path = dir.join(format!("{stem}_m{}.csv", i + 1));
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            let header: Vec<String> = (0..x.cols()).map(|c| format!("x{c}")).collect();
            w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
            for r in 0..x.rows() {
                w.write_record(x.row(r).iter().map(|v| format!("{v:.16e}")))
                    .map_err(|e| Error::csv(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = dir.join(format!("{stem}_labels.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["label"]).map_err(|e| Error::csv(&path, e))?;
        for y in &self.labels {
            w.write_record([y.to_string()]).map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

/// The three splits produced by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: MultiModalDataset,
    pub val: MultiModalDataset,
    pub test: MultiModalDataset,
}

fn unit_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Templates {
    /// `[modality][class]`, unique-block width.
    unique: Vec<Vec<Vec<f64>>>,
    /// `[class]`, paired-block width.
    paired: Vec<Vec<f64>>,
}

impl Templates {
    fn draw(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth/templates"));
        let unique = (0..cfg.modalities)
            .map(|_| (0..cfg.classes).map(|_| unit_vector(&mut rng, cfg.unique_width())).collect())
            .collect();
        let paired = (0..cfg.classes)
            .map(|_| unit_vector(&mut rng, cfg.paired_width()))
            .collect();
        Self { unique, paired }
    }
}

fn sample_split(cfg: &SynthConfig, t: &Templates, split: Split, n: usize) -> Result<MultiModalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("synth/{split}")));
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::config("data.noise", e.to_string()))?;
    let nuisance = Normal::new(0.0, cfg.nuisance).map_err(|e| Error::config("data.nuisance", e.to_string()))?;
    let (uw, pw) = (cfg.unique_width(), cfg.paired_width());
    let share = cfg.paired / cfg.modalities as f64;
    let mut inputs = vec![Matrix::zeros(n, cfg.dim); cfg.modalities];
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let c = rng.random_range(0..cfg.classes);
        labels.push(c);
        let eta: Vec<f64> = (0..pw).map(|_| nuisance.sample(&mut rng)).collect();
        for (m, x) in inputs.iter_mut().enumerate() {
            let sign = match m {
                0 => 1.0,
                1 => -1.0,
                _ => 0.0,
            };
            let strength = cfg.strengths[m];
            let out = x.row_mut(row);
            for j in 0..uw {
                out[j] = strength * t.unique[m][c][j] + noise.sample(&mut rng);
            }
            for j in 0..pw {
                out[uw + j] = share * t.paired[c][j] + sign * eta[j] + noise.sample(&mut rng);
            }
        }
    }
    MultiModalDataset::new(split, inputs, labels, cfg.classes)
}

/// Train/val/test splits, a pure function of `cfg` (seed included).
pub fn generate(cfg: &SynthConfig) -> Result<Splits> {
    cfg.validate()?;
    let templates = Templates::draw(cfg);
    Ok(Splits {
        train: sample_split(cfg, &templates, Split::Train, cfg.n_train)?,
        val: sample_split(cfg, &templates, Split::Val, cfg.n_val)?,
        test: sample_split(cfg, &templates, Split::Test, cfg.n_test)?,
    })
}

/// One aligned mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
}

pub struct BatchIter<'a> {
    ds: &'a MultiModalDataset,
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            inputs: self.ds.inputs.iter().map(|x| x.gather_rows(&indices)).collect(),
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}

/// Seeded shuffle into batches of `batch_size`; the last batch may be short.
pub fn batch_iter(ds: &MultiModalDataset, batch_size: usize, epoch_seed: u64) -> Result<BatchIter<'_>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset(format!("{} split", ds.split)));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(BatchIter {
        ds,
        order,
        size: batch_size,
        pos: 0,
    })
}
