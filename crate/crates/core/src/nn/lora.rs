use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::nn::param::Param;

/// Low-rank update `ΔW = scale · B·A` attached to a base weight `W₀ ∈ ℝ^{d×k}`.
///
/// `A ∈ ℝ^{r×k}` starts Gaussian, `B ∈ ℝ^{d×r}` starts at exactly zero, so the
/// adapted layer reproduces the base layer bit for bit until `B` moves.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub base_name: String,
    pub a: Param,
    pub b: Param,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn a_name(base: &str) -> String {
        format!("{base}.lora_a")
    }

    pub fn b_name(base: &str) -> String {
        format!("{base}.lora_b")
    }

    /// Fresh adapter for a `d×k` base with `A` supplied by the caller.
    pub fn new(base_name: &str, d: usize, k: usize, a: Matrix, scale: f64) -> Result<Self> {
        let rank = a.rows();
        if rank == 0 || rank > d.min(k) {
            return Err(Error::RankTooLarge {
                name: base_name.to_string(),
                rank,
                bound: d.min(k),
            });
        }
        if a.cols() != k {
            return Err(Error::Shape {
                op: "lora_adapter",
                left: (d, k),
                right: a.shape(),
            });
        }
        Ok(Self {
            base_name: base_name.to_string(),
            a: Param::new(Self::a_name(base_name), a),
            b: Param::new(Self::b_name(base_name), Matrix::zeros(d, rank)),
            rank,
            scale,
        })
    }

    /// `(d, k)` of the adapted base matrix.
    pub fn base_shape(&self) -> (usize, usize) {
        (self.b.value.rows(), self.a.value.cols())
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale · B·A`.
    pub fn delta(&self) -> Result<Matrix> {
        let ba = self.b.value.matmul(&self.a.value)?;
        Ok(if self.scale == 1.0 { ba } else { ba.scale(self.scale) })
    }
}

/// `W₀ + scale · B·A`. The base matrix is left untouched.
pub fn merge_lora(base: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if base.shape() != adapter.base_shape() {
        return Err(Error::Shape {
            op: "merge_lora",
            left: base.shape(),
            right: adapter.base_shape(),
        });
    }
    base.add(&adapter.delta()?)
}

/// Which matrices of a selected model receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// MLP: every encoder weight matrix. Transformer: attention Q, K, V.
    #[default]
    EncoderOnly,
    HeadOnly,
    EncoderAndHead,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::EncoderOnly => "encoder_only",
            Placement::HeadOnly => "head_only",
            Placement::EncoderAndHead => "encoder_and_head",
        }
    }

    pub fn includes_encoder(self) -> bool {
        matches!(self, Placement::EncoderOnly | Placement::EncoderAndHead)
    }

    pub fn includes_head(self) -> bool {
        matches!(self, Placement::HeadOnly | Placement::EncoderAndHead)
    }
}

/// The set of modalities (1-based) that get adapters, and where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraSelection {
    pub modalities: BTreeSet<usize>,
    #[serde(default)]
    pub placement: Placement,
}

impl LoraSelection {
    pub fn new(modalities: impl IntoIterator<Item = usize>, placement: Placement) -> Self {
        Self {
            modalities: modalities.into_iter().collect(),
            placement,
        }
    }

    pub fn all(count: usize, placement: Placement) -> Self {
        Self::new(1..=count, placement)
    }

    pub fn validate(&self, modality_count: usize) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::config("mmlora.selection.modalities", "must not be empty"));
        }
        if let Some(&bad) = self.modalities.iter().find(|&&m| m == 0 || m > modality_count) {
            return Err(Error::config(
                "mmlora.selection.modalities",
                format!("modality {bad} outside 1..={modality_count}"),
            ));
        }
        Ok(())
    }
}
