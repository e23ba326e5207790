use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator parameters for the synthetic multimodal task.
///
/// Every modality has `dim` features. The first `dim / 2` carry a class
/// template of that modality alone, scaled by its entry in `strengths`. The
/// rest carry a share of a class template common to all modalities, plus a
/// nuisance vector that enters modality 1 with `+` and modality 2 with `-`,
/// so it only cancels when the two views are combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub modalities: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Unique-block strength per modality.
    pub strengths: Vec<f64>,
    /// Total strength of the shared block, split evenly across modalities.
    pub paired: f64,
    /// Standard deviation of the sign-split nuisance.
    pub nuisance: f64,
    /// Standard deviation of independent noise on every feature.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub const PRESETS: [&'static str; 2] = ["laziness", "balanced"];

    /// One modality much stronger than the other, so joint training leans on it.
    pub fn laziness(seed: u64) -> Self {
        Self {
            classes: 8,
            dim: 32,
            modalities: 2,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            strengths: vec![2.0, 0.7],
            paired: 1.0,
            nuisance: 1.0,
            noise: 0.5,
            seed,
        }
    }

    /// Control: both modalities equally informative.
    pub fn balanced(seed: u64) -> Self {
        Self {
            strengths: vec![1.0, 1.0],
            ..Self::laziness(seed)
        }
    }

    /// Balanced and noise-free: every split is linearly separable per modality.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            paired: 0.0,
            nuisance: 0.0,
            noise: 0.0,
            ..Self::balanced(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "laziness" => Ok(Self::laziness(seed)),
            "balanced" => Ok(Self::balanced(seed)),
            "noiseless" => Ok(Self::noiseless(seed)),
            other => Err(Error::config(
                "data.preset",
                format!("unknown preset `{other}` (expected laziness, balanced or noiseless)"),
            )),
        }
    }

    pub fn unique_width(&self) -> usize {
        self.dim / 2
    }

    pub fn paired_width(&self) -> usize {
        self.dim - self.dim / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        if self.dim < 2 * self.classes {
            return Err(Error::config(
                "data.dim",
                format!("dim {} is below 2 x classes = {}", self.dim, 2 * self.classes),
            ));
        }
        if self.modalities < 2 {
            return Err(Error::config("data.modalities", "need at least 2 modalities"));
        }
        for (field, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n == 0 {
                return Err(Error::config(format!("data.{field}"), "split size must be positive"));
            }
        }
        if self.strengths.len() != self.modalities {
            return Err(Error::config(
                "data.strengths",
                format!("expected {} entries, got {}", self.modalities, self.strengths.len()),
            ));
        }
        let scalars = [("paired", self.paired), ("nuisance", self.nuisance), ("noise", self.noise)];
        let all = self
            .strengths
            .iter()
            .map(|&s| ("strengths", s))
            .chain(scalars);
        for (field, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("data.{field}"), format!("{v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in SynthConfig::PRESETS {
            SynthConfig::preset(name, 0).unwrap().validate().unwrap();
        }
        SynthConfig::noiseless(0).validate().unwrap();
        assert!(SynthConfig::preset("nope", 0).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = SynthConfig::laziness(1);
        let cases = [
            SynthConfig { classes: 1, ..base.clone() },
            SynthConfig { dim: 15, ..base.clone() },
            SynthConfig { n_val: 0, ..base.clone() },
            SynthConfig { strengths: vec![1.0], ..base.clone() },
            SynthConfig { strengths: vec![1.0, -0.1], ..base.clone() },
            SynthConfig { noise: f64::NAN, ..base.clone() },
            SynthConfig { modalities: 1, strengths: vec![1.0], ..base.clone() },
        ];
        for bad in cases {
            assert!(bad.validate().unwrap_err().is_config(), "{bad:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let c = SynthConfig::balanced(99);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SynthConfig>(&s).unwrap(), c);
    }
}
