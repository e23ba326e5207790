use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values are kept at the emitted precision so aggregates can be
/// recomputed from the CSV to the last digit.
pub fn round4(v: f64) -> f64 {
    format!("{v:.4}").parse().expect("formatted float parses")
}

/// One `(pipeline, seed, metric, value)` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub pipeline: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub pipeline: String,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub pipeline: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 with a single seed.
    pub sd: f64,
    pub n: usize,
}

/// A markdown table restricted to some pipelines, in the listed order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Section {
    pub title: String,
    pub pipelines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunReport {
    pub title: String,
    pub rows: Vec<Row>,
    pub timings: Vec<Timing>,
    /// Free-text remarks, e.g. sweep cells that could not run.
    pub notes: Vec<String>,
    pub config: serde_json::Value,
    /// Empty means one table over everything.
    #[serde(skip)]
    pub sections: Vec<Section>,
    #[serde(skip)]
    pub run_dir: PathBuf,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl RunReport {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, pipeline: &str, seed: u64, metric: &str, value: f64) {
        self.rows.push(Row {
            pipeline: pipeline.to_string(),
            seed,
            metric: metric.to_string(),
            value: round4(value),
        });
    }

    pub fn values(&self, pipeline: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.pipeline == pipeline && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn mean(&self, pipeline: &str, metric: &str) -> Option<f64> {
        let v = self.values(pipeline, metric);
        (!v.is_empty()).then(|| mean_sd(&v).0)
    }

    /// One aggregate per (pipeline, metric), in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.pipeline.clone(), r.metric.clone());
            groups
                .entry(key.clone())
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(r.value);
        }
        order
            .into_iter()
            .map(|key| {
                let values = &groups[&key];
                let (mean, sd) = mean_sd(values);
                Aggregate {
                    pipeline: key.0,
                    metric: key.1,
                    mean,
                    sd,
                    n: values.len(),
                }
            })
            .collect()
    }

    pub fn merge(&mut self, other: RunReport) {
        self.rows.extend(other.rows);
        self.timings.extend(other.timings);
        self.notes.extend(other.notes);
    }

    /// Stable regroup so each pipeline's rows are contiguous, pipelines in
    /// order of first appearance, seeds ascending.
    pub fn group_by_pipeline(&mut self) {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.pipeline) {
                order.push(r.pipeline.clone());
            }
        }
        let pos = |name: &str| order.iter().position(|p| p == name).unwrap_or(usize::MAX);
        self.rows.sort_by_key(|r| (pos(&r.pipeline), r.seed));
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ctx = "report csv";
        w.write_record(["pipeline", "seed", "metric", "value"])
            .map_err(|e| Error::csv(ctx, e))?;
        for r in &self.rows {
            w.write_record([&r.pipeline, &r.seed.to_string(), &r.metric, &format!("{:.4}", r.value)])
                .map_err(|e| Error::csv(ctx, e))?;
        }
        w.into_inner().map_err(|e| Error::io(ctx, e.into_error()))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# {}", self.title).ok();
        let aggregates = self.aggregates();
        let table = |out: &mut String, rows: &mut dyn Iterator<Item = &Aggregate>| {
            writeln!(out, "\n| pipeline | metric | mean | sd | n |").ok();
            writeln!(out, "|---|---|---:|---:|---:|").ok();
            for a in rows {
                writeln!(out, "| {} | {} | {:.4} | {:.4} | {} |", a.pipeline, a.metric, a.mean, a.sd, a.n).ok();
            }
        };
        if self.sections.is_empty() {
            table(&mut out, &mut aggregates.iter());
        }
        for s in &self.sections {
            writeln!(out, "\n## {}", s.title).ok();
            let mut rows = s.pipelines.iter().flat_map(|p| aggregates.iter().filter(move |a| &a.pipeline == p));
            table(&mut out, &mut rows);
        }
        if !self.notes.is_empty() {
            writeln!(out).ok();
            for n in &self.notes {
                writeln!(out, "- {n}").ok();
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let line = |kind: &str, v: serde_json::Value| {
            let mut obj = serde_json::Map::new();
            obj.insert("kind".into(), kind.into());
            if let serde_json::Value::Object(m) = v {
                obj.extend(m);
            }
            serde_json::Value::Object(obj).to_string()
        };
        let json = |v: &dyn erased::Ser| v.to_json();
        writeln!(out, "{}", line("config", self.config.clone())).ok();
        for r in &self.rows {
            writeln!(out, "{}", line("row", json(r))).ok();
        }
        for a in self.aggregates() {
            writeln!(out, "{}", line("aggregate", json(&a))).ok();
        }
        for t in &self.timings {
            writeln!(out, "{}", line("timing", json(t))).ok();
        }
        for n in &self.notes {
            writeln!(out, "{}", line("note", serde_json::json!({ "text": n }))).ok();
        }
        Ok(out)
    }
}

mod erased {
    pub trait Ser {
        fn to_json(&self) -> serde_json::Value;
    }

    impl<T: serde::Serialize> Ser for T {
        fn to_json(&self) -> serde_json::Value {
            serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    JsonLines,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Csv, Format::Markdown, Format::JsonLines];

    fn file_name(self, stem: &str) -> String {
        match self {
            Format::Csv => format!("{stem}.csv"),
            Format::Markdown => format!("{stem}.md"),
            Format::JsonLines => format!("{stem}.jsonl"),
        }
    }
}

/// Writes `{stem}.csv`, `{stem}.md` and/or `{stem}.jsonl` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path, stem: &str, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &f in formats {
        let path = dir.join(f.file_name(stem));
        let bytes = match f {
            Format::Csv => report.to_csv()?,
            Format::Markdown => report.to_markdown().into_bytes(),
            Format::JsonLines => report.to_jsonl()?.into_bytes(),
        };
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads back a CSV written by [`emit_report`].
pub fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<Row>, _>>()
        .map_err(|e| Error::csv(path, e))
}
