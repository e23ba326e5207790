use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{hash_params, linear_forward, BindMode, Bindings, ModalityModel, Param};

/// Where a bundle sits in the training pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainedAnalog,
    Umft,
    Mmlora,
    JointBaseline,
    JointFullFt,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::PretrainedAnalog => 0,
            Stage::Umft => 1,
            Stage::Mmlora => 2,
            Stage::JointBaseline => 3,
            Stage::JointFullFt => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Stage::PretrainedAnalog,
            1 => Stage::Umft,
            2 => Stage::Mmlora,
            3 => Stage::JointBaseline,
            4 => Stage::JointFullFt,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainedAnalog => "pretrained_analog",
            Stage::Umft => "umft",
            Stage::Mmlora => "mmlora",
            Stage::JointBaseline => "joint_baseline",
            Stage::JointFullFt => "joint_full_ft",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What produced a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: u64,
    pub seeds: Vec<u64>,
    pub note: String,
}

pub const FUSION_WEIGHT: &str = "fusion/head.weight";
pub const FUSION_BIAS: &str = "fusion/head.bias";

/// Linear classifier over concatenated encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub weight: Param,
    pub bias: Param,
}

impl FusionHead {
    /// He-normal weights over the concatenated width, zero bias.
    pub fn new(feature_widths: &[usize], classes: usize, seed: u64) -> Self {
        let width: usize = feature_widths.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / width.max(1) as f64).sqrt()).expect("finite std");
        let w = Matrix::from_fn(classes, width, |_, _| normal.sample(&mut rng));
        Self {
            weight: Param::new(FUSION_WEIGHT, w),
            bias: Param::new(FUSION_BIAS, Matrix::zeros(1, classes)),
        }
    }

    pub fn from_params(weight: Param, bias: Param) -> Result<Self> {
        if weight.name != FUSION_WEIGHT || bias.name != FUSION_BIAS {
            return Err(Error::UnknownParam(format!("{} / {}", weight.name, bias.name)));
        }
        if bias.value.shape() != (1, weight.value.rows()) {
            return Err(Error::Shape {
                op: "fusion_head",
                left: weight.value.shape(),
                right: bias.value.shape(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape, mode: BindMode, b: &mut Bindings) {
        for p in self.params() {
            if !b.contains(&p.name) {
                let id = tape.leaf(p.value.clone(), mode == BindMode::Train && !p.frozen);
                b.insert(p.name.clone(), id);
            }
        }
    }

    /// Logits from the models' encoders, concatenated in modality order.
    pub fn logits(&self, tape: &mut Tape, b: &Bindings, models: &[ModalityModel], inputs: &[NodeId]) -> Result<NodeId> {
        let mut feats = Vec::with_capacity(models.len());
        for (m, &x) in models.iter().zip(inputs) {
            feats.push(m.features(tape, b, x)?);
        }
        let mut joint = feats[0];
        for &f in &feats[1..] {
            joint = tape.concat_cols(joint, f)?;
        }
        linear_forward(tape, b.get(FUSION_WEIGHT)?, Some(b.get(FUSION_BIAS)?), joint)
    }
}

/// Per-modality models plus everything needed to resume or audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBundle {
    pub stage: Stage,
    pub models: Vec<ModalityModel>,
    pub fusion_head: Option<FusionHead>,
    pub provenance: Provenance,
    /// Hash of every base param at the end of unimodal fine-tuning.
    pub umft_hash: Option<String>,
}

impl TrainedBundle {
    pub fn new(stage: Stage, models: Vec<ModalityModel>, provenance: Provenance) -> Self {
        Self {
            stage,
            models,
            fusion_head: None,
            provenance,
            umft_hash: None,
        }
    }

    /// Seeded untrained models, one per architecture, modality ids from 1.
    pub fn pretrained_analog(
        archs: &[crate::nn::Architecture],
        seeds: &[u64],
        provenance: Provenance,
    ) -> Result<Self> {
        if archs.len() != seeds.len() {
            return Err(Error::config("model", "one seed per modality required"));
        }
        let models = archs
            .iter()
            .zip(seeds)
            .enumerate()
            .map(|(i, (a, &s))| ModalityModel::new(i + 1, *a, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(Stage::PretrainedAnalog, models, provenance))
    }

    pub fn classes(&self) -> usize {
        self.models[0].architecture().classes
    }

    /// Hash of the base (non-adapter) params of every model.
    pub fn base_hash(&self) -> String {
        hash_params(self.models.iter().flat_map(|m| m.base_params()))
    }

    /// Hash of every frozen param across models.
    pub fn frozen_hash(&self) -> String {
        hash_params(
            self.models
                .iter()
                .flat_map(|m| m.all_params())
                .filter(|p| p.frozen),
        )
    }

    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.param_count()).sum::<usize>()
            + self.fusion_head.as_ref().map_or(0, |h| h.param_count())
    }

    pub fn trainable_count(&self) -> usize {
        self.models.iter().map(|m| m.trainable_count()).sum::<usize>()
            + self.fusion_head.as_ref().map_or(0, |h| h.param_count())
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                expected: expected.to_string(),
                found: self.stage.to_string(),
            });
        }
        Ok(())
    }
}
