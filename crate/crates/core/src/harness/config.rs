use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Architecture, EncoderSpec};
use crate::synthdata::SynthConfig;
use crate::training::{MmloraOptions, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Umft,
    LateFusion,
    Ume,
    Mmlora,
    JointFullFt,
    LinearEvalSuite,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Umft => "umft",
            Pipeline::LateFusion => "late_fusion",
            Pipeline::Ume => "ume",
            Pipeline::Mmlora => "mmlora",
            Pipeline::JointFullFt => "joint_full_ft",
            Pipeline::LinearEvalSuite => "linear_eval_suite",
        }
    }

    pub fn needs_umft(self) -> bool {
        matches!(self, Pipeline::Ume | Pipeline::Mmlora | Pipeline::JointFullFt)
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named preset or a full generator spec. Either way each run seed
/// replaces the generator seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataConfig {
    Preset { preset: String },
    Custom(SynthConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Preset {
            preset: "laziness".into(),
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, seed: u64) -> Result<SynthConfig> {
        match self {
            DataConfig::Preset { preset } => SynthConfig::preset(preset, seed),
            DataConfig::Custom(c) => Ok(SynthConfig { seed, ..c.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// One encoder per modality, modality 1 first.
    pub encoders: Vec<EncoderSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mlp = EncoderSpec::Mlp {
            hidden: 128,
            features: 16,
        };
        Self {
            encoders: vec![mlp, mlp],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimBlocks {
    pub umft: OptimizerConfig,
    pub late_fusion: OptimizerConfig,
    pub linear_eval: OptimizerConfig,
    pub mmlora: OptimizerConfig,
    pub joint_full_ft: OptimizerConfig,
}

impl Default for OptimBlocks {
    fn default() -> Self {
        Self {
            umft: OptimizerConfig::default(),
            late_fusion: OptimizerConfig::default(),
            linear_eval: OptimizerConfig::linear_eval(),
            mmlora: OptimizerConfig::default(),
            joint_full_ft: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pipelines: Vec<Pipeline>,
    pub mmlora: MmloraOptions,
    pub optim: OptimBlocks,
    pub seeds: Vec<u64>,
    /// Output root; the `MMLORA_OUTPUT_ROOT` environment variable wins over it.
    pub output_dir: Option<PathBuf>,
    /// Prior run directory whose `checkpoints/seed<N>/umft.mmlf` files
    /// replace unimodal fine-tuning in this run.
    pub umft_from: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pipelines: vec![Pipeline::Umft, Pipeline::Ume, Pipeline::Mmlora],
            mmlora: MmloraOptions::default(),
            optim: OptimBlocks::default(),
            seeds: vec![0, 1, 2],
            output_dir: None,
            umft_from: None,
        }
    }
}

pub const OUTPUT_ROOT_ENV: &str = "MMLORA_OUTPUT_ROOT";

impl ExperimentConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: context.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies `path=value` overrides such as `mmlora.rank=4`. Values parse
    /// as JSON when they can, otherwise as strings.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut doc = serde_json::to_value(self).map_err(|source| Error::Json {
            context: "config".into(),
            source,
        })?;
        for (path, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, path, value)?;
        }
        serde_json::from_value(doc).map_err(|source| Error::Json {
            context: "config overrides".into(),
            source,
        })
    }

    pub fn architectures(&self, data: &SynthConfig) -> Vec<Architecture> {
        self.model
            .encoders
            .iter()
            .map(|&encoder| Architecture {
                input: data.dim,
                classes: data.classes,
                encoder,
            })
            .collect()
    }

    /// Pipelines in execution order, with unimodal fine-tuning added when a
    /// later stage needs it and no prior run supplies it.
    pub fn schedule(&self) -> Vec<Pipeline> {
        let mut set: BTreeSet<Pipeline> = self.pipelines.iter().copied().collect();
        if self.umft_from.is_none() && set.iter().any(|p| p.needs_umft()) {
            set.insert(Pipeline::Umft);
        }
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a nonempty plain directory name"));
        }
        if self.pipelines.is_empty() {
            return Err(Error::config("pipelines", "must list at least one pipeline"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        let data = self.data.resolve(0)?;
        data.validate()?;
        if self.model.encoders.len() != data.modalities {
            return Err(Error::config(
                "model.encoders",
                format!("{} encoders for {} modalities", self.model.encoders.len(), data.modalities),
            ));
        }
        for (i, arch) in self.architectures(&data).iter().enumerate() {
            arch.validate().map_err(|e| match e {
                Error::Config { field, reason } => Error::config(format!("model.encoders[{i}] ({field})"), reason),
                other => other,
            })?;
        }
        if self.mmlora.rank == 0 {
            return Err(Error::config("mmlora.rank", "must be at least 1"));
        }
        if !(self.mmlora.init_std.is_finite() && self.mmlora.init_std >= 0.0) {
            return Err(Error::config("mmlora.init_std", "must be finite and >= 0"));
        }
        self.mmlora.selection.validate(data.modalities)?;
        let o = &self.optim;
        o.umft.validate("optim.umft")?;
        o.late_fusion.validate("optim.late_fusion")?;
        o.linear_eval.validate("optim.linear_eval")?;
        o.mmlora.validate("optim.mmlora")?;
        o.joint_full_ft.validate("optim.joint_full_ft")?;
        Ok(())
    }

    /// Stable 64-bit digest of everything that affects results.
    pub fn hash(&self) -> u64 {
        let mut echo = self.clone();
        echo.output_dir = None;
        let bytes = serde_json::to_vec(&echo).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Environment variable, then `output_dir`, then `./runs`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed override path"));
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::config(path, format!("`{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Placement;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text, "t").unwrap(), c);
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"pipelines": ["umft"], "seeds": [7]}"#, "t").unwrap();
        assert_eq!(c.mmlora.rank, 1);
        assert_eq!(c.data, DataConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::default()
            .with_overrides([
                ("mmlora.rank", "4"),
                ("mmlora.selection.placement", "head_only"),
                ("data.preset", "balanced"),
                ("optim.umft.learning_rate", "0.01"),
                ("seeds", "[3, 4]"),
            ])
            .unwrap();
        assert_eq!(c.mmlora.rank, 4);
        assert_eq!(c.mmlora.selection.placement, Placement::HeadOnly);
        assert_eq!(c.data.resolve(3).unwrap(), SynthConfig::balanced(3));
        assert_eq!(c.optim.umft.learning_rate, 0.01);
        assert_eq!(c.seeds, [3, 4]);
        assert!(ExperimentConfig::default().with_overrides([("mmlora.bogus", "1")]).is_err());
        assert!(ExperimentConfig::default().with_overrides([("mmlora..rank", "1")]).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let cases = [
            (r#"{"pipelines": []}"#, "pipelines"),
            (r#"{"seeds": []}"#, "seeds"),
            (r#"{"mmlora": {"rank": 0}}"#, "mmlora.rank"),
            (r#"{"mmlora": {"selection": {"modalities": [3]}}}"#, "mmlora.selection.modalities"),
            (r#"{"data": {"preset": "nope"}}"#, "data.preset"),
            (r#"{"optim": {"mmlora": {"epochs": 0}}}"#, "optim.mmlora.epochs"),
        ];
        for (doc, field) in cases {
            let err = ExperimentConfig::from_json(doc, "t").unwrap().validate().unwrap_err();
            assert!(err.is_config());
            assert!(err.to_string().contains(field), "{err} lacks {field}");
        }
    }

    #[test]
    fn schedule_adds_umft_dependency() {
        let mut c = ExperimentConfig {
            pipelines: vec![Pipeline::Mmlora, Pipeline::LinearEvalSuite, Pipeline::LateFusion],
            ..Default::default()
        };
        assert_eq!(
            c.schedule(),
            [Pipeline::Umft, Pipeline::LateFusion, Pipeline::Mmlora, Pipeline::LinearEvalSuite]
        );
        c.umft_from = Some("prior".into());
        assert_eq!(c.schedule()[0], Pipeline::LateFusion);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("/elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = a.with_overrides([("mmlora.rank", "2")]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
