use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;

/// A named weight. Names are hierarchical (`m1/encoder/fc1.weight`) and
/// unique within a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns params addressable by name.
pub trait ParamHost {
    fn param(&self, name: &str) -> Option<&Param>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Param>;
}

/// SHA-256 over (name, shape, little-endian payload) of each param, in the
/// order given. Bit-level: `-0.0` and `0.0` hash differently.
pub fn hash_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        h.update((p.value.rows() as u64).to_le_bytes());
        h.update((p.value.cols() as u64).to_le_bytes());
        h.update(p.value.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// How an encoder/head graph treats parameter leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindMode {
    /// Non-frozen params require gradients.
    Train,
    /// Every param is a constant.
    Inference,
}
