use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::layers::{lora_forward, scaled_dot_attention};
use crate::nn::lora::{LoraAdapter, LoraSelection, Placement};
use crate::nn::param::{hash_params, BindMode, Param, ParamHost};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// Linear → relu → Linear.
    Mlp { hidden: usize, features: usize },
    /// Token embedding, one single-head attention block with residual, a
    /// relu feed-forward with residual, then mean-pool over tokens.
    TinyTransformer {
        tokens: usize,
        width: usize,
        ff_hidden: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub classes: usize,
    pub encoder: EncoderSpec,
}

impl Architecture {
    pub fn mlp(input: usize, hidden: usize, features: usize, classes: usize) -> Self {
        Self {
            input,
            classes,
            encoder: EncoderSpec::Mlp { hidden, features },
        }
    }

    pub fn tiny_transformer(input: usize, tokens: usize, width: usize, ff_hidden: usize, classes: usize) -> Self {
        Self {
            input,
            classes,
            encoder: EncoderSpec::TinyTransformer {
                tokens,
                width,
                ff_hidden,
            },
        }
    }

    pub fn feature_width(&self) -> usize {
        match self.encoder {
            EncoderSpec::Mlp { features, .. } => features,
            EncoderSpec::TinyTransformer { width, .. } => width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("input", self.input)?;
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least 2 classes"));
        }
        match self.encoder {
            EncoderSpec::Mlp { hidden, features } => {
                positive("hidden", hidden)?;
                positive("features", features)?;
            }
            EncoderSpec::TinyTransformer {
                tokens,
                width,
                ff_hidden,
            } => {
                positive("tokens", tokens)?;
                positive("width", width)?;
                positive("ff_hidden", ff_hidden)?;
                if self.input % tokens != 0 {
                    return Err(Error::config(
                        "model.tokens",
                        format!("input width {} not divisible into {tokens} tokens", self.input),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(local name, rows, cols, fan_in for init, has_bias)` for every weight, head last.
    fn layout(&self) -> Vec<(&'static str, usize, usize, bool)> {
        let c = self.classes;
        match self.encoder {
            EncoderSpec::Mlp { hidden, features } => vec![
                ("encoder/fc1", hidden, self.input, true),
                ("encoder/fc2", features, hidden, true),
                ("head", c, features, true),
            ],
            EncoderSpec::TinyTransformer {
                tokens,
                width,
                ff_hidden,
            } => vec![
                ("encoder/embed", width, self.input / tokens, true),
                ("encoder/attn.q", width, width, false),
                ("encoder/attn.k", width, width, false),
                ("encoder/attn.v", width, width, false),
                ("encoder/attn.o", width, width, false),
                ("encoder/ff1", ff_hidden, width, true),
                ("encoder/ff2", width, ff_hidden, true),
                ("head", c, width, true),
            ],
        }
    }
}

/// Param-name → tape-node map for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Bindings(HashMap<String, NodeId>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, id: NodeId) {
        self.0.insert(name.into(), id);
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

/// Encoder + classification head for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityModel {
    modality: usize,
    arch: Architecture,
    params: BTreeMap<String, Param>,
    adapters: BTreeMap<String, LoraAdapter>,
}

fn weight(prefix: &str, local: &str) -> String {
    format!("{prefix}/{local}.weight")
}

fn bias(prefix: &str, local: &str) -> String {
    format!("{prefix}/{local}.bias")
}

impl ModalityModel {
    /// Seeded He-normal weights and zero biases: the untrained starting point.
    pub fn new(modality: usize, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        if modality == 0 {
            return Err(Error::config("modality", "ids are 1-based"));
        }
        let prefix = format!("m{modality}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (local, rows, cols, has_bias) in arch.layout() {
            let std = (2.0 / cols as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
            let name = weight(&prefix, local);
            params.insert(name.clone(), Param::new(name, w));
            if has_bias {
                let name = bias(&prefix, local);
                params.insert(name.clone(), Param::new(name, Matrix::zeros(1, rows)));
            }
        }
        Ok(Self {
            modality,
            arch,
            params,
            adapters: BTreeMap::new(),
        })
    }

    /// Reassembles a model from stored parts, checking names and shapes.
    pub fn from_parts(
        modality: usize,
        arch: Architecture,
        params: Vec<Param>,
        adapters: Vec<LoraAdapter>,
    ) -> Result<Self> {
        let template = Self::new(modality, arch, 0)?;
        let mut map = BTreeMap::new();
        for p in params {
            let expected = template
                .params
                .get(&p.name)
                .ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            if expected.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "from_parts",
                    left: expected.value.shape(),
                    right: p.value.shape(),
                });
            }
            map.insert(p.name.clone(), p);
        }
        if let Some(missing) = template.params.keys().find(|k| !map.contains_key(*k)) {
            return Err(Error::UnknownParam(missing.clone()));
        }
        let mut model = Self {
            modality,
            arch,
            params: map,
            adapters: BTreeMap::new(),
        };
        for ad in adapters {
            model.insert_adapter(ad)?;
        }
        Ok(model)
    }

    fn insert_adapter(&mut self, ad: LoraAdapter) -> Result<()> {
        let base = self
            .params
            .get(&ad.base_name)
            .ok_or_else(|| Error::UnknownParam(ad.base_name.clone()))?;
        if base.value.shape() != ad.base_shape() {
            return Err(Error::Shape {
                op: "attach_adapter",
                left: base.value.shape(),
                right: ad.base_shape(),
            });
        }
        if self.adapters.contains_key(&ad.base_name) {
            return Err(Error::DuplicateAdapter(ad.base_name));
        }
        self.adapters.insert(ad.base_name.clone(), ad);
        Ok(())
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn prefix(&self) -> String {
        format!("m{}", self.modality)
    }

    pub fn feature_width(&self) -> usize {
        self.arch.feature_width()
    }

    pub fn head_weight_name(&self) -> String {
        weight(&self.prefix(), "head")
    }

    pub fn head_bias_name(&self) -> String {
        bias(&self.prefix(), "head")
    }

    /// Base params in name order.
    pub fn base_params(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn adapter(&self, base_name: &str) -> Option<&LoraAdapter> {
        self.adapters.get(base_name)
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Base params and adapter factors, sorted by name.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut all: Vec<&Param> = self.params.values().collect();
        for ad in self.adapters.values() {
            all.push(&ad.a);
            all.push(&ad.b);
        }
        all.sort_by(|a, b| a.name.cmp(&b.name));
        all
    }

    pub fn param_count(&self) -> usize {
        self.all_params().iter().map(|p| p.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.all_params().iter().filter(|p| !p.frozen).map(|p| p.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params.values_mut() {
            p.frozen = frozen;
        }
        for ad in self.adapters.values_mut() {
            ad.a.frozen = frozen;
            ad.b.frozen = frozen;
        }
    }

    /// SHA-256 of every frozen param of this model.
    pub fn frozen_hash(&self) -> String {
        hash_params(self.all_params().into_iter().filter(|p| p.frozen))
    }

    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self
            .param_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Base weight names that receive adapters under `placement`.
    pub fn lora_targets(&self, placement: Placement) -> Vec<String> {
        let prefix = self.prefix();
        let mut names = Vec::new();
        if placement.includes_encoder() {
            let locals: &[&str] = match self.arch.encoder {
                EncoderSpec::Mlp { .. } => &["encoder/fc1", "encoder/fc2"],
                EncoderSpec::TinyTransformer { .. } => &["encoder/attn.q", "encoder/attn.k", "encoder/attn.v"],
            };
            names.extend(locals.iter().map(|l| weight(&prefix, l)));
        }
        if placement.includes_head() {
            names.push(weight(&prefix, "head"));
        }
        names
    }

    /// Returns a copy with rank-`rank` adapters on the targeted matrices
    /// (`A ~ N(0, init_std²)`, `B = 0`) and every base param frozen.
    pub fn lora_attach(&self, placement: Placement, rank: usize, init_std: f64, scale: f64, seed: u64) -> Result<Self> {
        if !(init_std >= 0.0 && init_std.is_finite()) {
            return Err(Error::config("mmlora.init_std", "must be finite and >= 0"));
        }
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).expect("validated std");
        for name in self.lora_targets(placement) {
            if out.adapters.contains_key(&name) {
                return Err(Error::DuplicateAdapter(name));
            }
            let (d, k) = out.params[&name].value.shape();
            if rank == 0 || rank > d.min(k) {
                return Err(Error::RankTooLarge {
                    name,
                    rank,
                    bound: d.min(k),
                });
            }
            if 2 * rank > d.min(k) {
                log::warn!("rank {rank} is above min(d, k)/2 for {name} ({d}x{k})");
            }
            let a = Matrix::from_fn(rank, k, |_, _| normal.sample(&mut rng));
            out.insert_adapter(LoraAdapter::new(&name, d, k, a, scale)?)?;
        }
        for p in out.params.values_mut() {
            p.frozen = true;
        }
        Ok(out)
    }

    /// Folds every adapter into its base weight; the result has no adapters.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        for (name, ad) in std::mem::take(&mut out.adapters) {
            let p = out.params.get_mut(&name).expect("adapter base exists");
            p.value = crate::nn::lora::merge_lora(&p.value, &ad)?;
        }
        Ok(out)
    }

    /// Places every param (and adapter factor) on the tape. Names already in
    /// `bindings` are left alone, so callers can substitute their own leaves.
    pub fn bind(&self, tape: &mut Tape, mode: BindMode, bindings: &mut Bindings) {
        for p in self.all_params() {
            if bindings.contains(&p.name) {
                continue;
            }
            let grad = mode == BindMode::Train && !p.frozen;
            let id = tape.leaf(p.value.clone(), grad);
            bindings.insert(p.name.clone(), id);
        }
    }

    /// `x·Wᵀ` through the adapter when one is attached.
    fn project(&self, tape: &mut Tape, b: &Bindings, x: NodeId, weight_name: &str) -> Result<NodeId> {
        let w = b.get(weight_name)?;
        match self.adapters.get(weight_name) {
            Some(ad) => lora_forward(tape, w, b.get(&ad.a.name)?, b.get(&ad.b.name)?, ad.scale, x),
            None => tape.matmul_nt(x, w),
        }
    }

    fn dense(&self, tape: &mut Tape, b: &Bindings, x: NodeId, local: &str) -> Result<NodeId> {
        let prefix = self.prefix();
        let y = self.project(tape, b, x, &weight(&prefix, local))?;
        let bias_name = bias(&prefix, local);
        if self.params.contains_key(&bias_name) {
            tape.add_row(y, b.get(&bias_name)?)
        } else {
            Ok(y)
        }
    }

    /// Self-attention block with residual over `h[(B·T)×width]`, `tokens` rows per sample.
    pub fn attention_block(&self, tape: &mut Tape, b: &Bindings, h: NodeId, tokens: usize) -> Result<NodeId> {
        let prefix = self.prefix();
        let rows = tape.value(h).rows();
        if tokens == 0 || rows % tokens != 0 {
            return Err(Error::Shape {
                op: "attention",
                left: tape.value(h).shape(),
                right: (tokens, 0),
            });
        }
        let q = self.project(tape, b, h, &weight(&prefix, "encoder/attn.q"))?;
        let k = self.project(tape, b, h, &weight(&prefix, "encoder/attn.k"))?;
        let v = self.project(tape, b, h, &weight(&prefix, "encoder/attn.v"))?;
        let mut outs = Vec::with_capacity(rows / tokens);
        for start in (0..rows).step_by(tokens) {
            let qi = tape.slice_rows(q, start, tokens)?;
            let ki = tape.slice_rows(k, start, tokens)?;
            let vi = tape.slice_rows(v, start, tokens)?;
            outs.push(scaled_dot_attention(tape, qi, ki, vi)?);
        }
        let attended = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        let projected = self.project(tape, b, attended, &weight(&prefix, "encoder/attn.o"))?;
        tape.add(h, projected)
    }

    /// Encoder output `[B×feature_width]` for inputs `x[B×input]`.
    pub fn features(&self, tape: &mut Tape, b: &Bindings, x: NodeId) -> Result<NodeId> {
        let (batch, width) = tape.value(x).shape();
        if width != self.arch.input {
            return Err(Error::Shape {
                op: "encoder_forward",
                left: (batch, self.arch.input),
                right: (batch, width),
            });
        }
        match self.arch.encoder {
            EncoderSpec::Mlp { .. } => {
                let h = self.dense(tape, b, x, "encoder/fc1")?;
                let h = tape.relu(h);
                self.dense(tape, b, h, "encoder/fc2")
            }
            EncoderSpec::TinyTransformer { tokens, .. } => {
                let tok = tape.reshape(x, batch * tokens, width / tokens)?;
                let h = self.dense(tape, b, tok, "encoder/embed")?;
                let h = self.attention_block(tape, b, h, tokens)?;
                let f = self.dense(tape, b, h, "encoder/ff1")?;
                let f = tape.relu(f);
                let f = self.dense(tape, b, f, "encoder/ff2")?;
                let h = tape.add(h, f)?;
                let pool = Matrix::from_fn(batch, batch * tokens, |r, c| {
                    if c / tokens == r {
                        1.0 / tokens as f64
                    } else {
                        0.0
                    }
                });
                let pool = tape.constant(pool);
                tape.matmul(pool, h)
            }
        }
    }

    pub fn head(&self, tape: &mut Tape, b: &Bindings, features: NodeId) -> Result<NodeId> {
        self.dense(tape, b, features, "head")
    }

    pub fn logits(&self, tape: &mut Tape, b: &Bindings, x: NodeId) -> Result<NodeId> {
        let f = self.features(tape, b, x)?;
        self.head(tape, b, f)
    }

    /// Inference-only encoder output.
    pub fn extract_features(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        self.bind(&mut tape, BindMode::Inference, &mut b);
        let xn = tape.constant(x.clone());
        let f = self.features(&mut tape, &b, xn)?;
        Ok(tape.value(f).clone())
    }

    /// Inference-only class distribution `P(y|x)`, one row per sample.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        self.bind(&mut tape, BindMode::Inference, &mut b);
        let xn = tape.constant(x.clone());
        let z = self.logits(&mut tape, &b, xn)?;
        let p = tape.softmax(z)?;
        Ok(tape.value(p).clone())
    }
}

impl ParamHost for ModalityModel {
    fn param(&self, name: &str) -> Option<&Param> {
        if let Some(p) = self.params.get(name) {
            return Some(p);
        }
        self.adapters.values().find_map(|ad| {
            if ad.a.name == name {
                Some(&ad.a)
            } else if ad.b.name == name {
                Some(&ad.b)
            } else {
                None
            }
        })
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        if let Some(p) = self.params.get_mut(name) {
            return Some(p);
        }
        self.adapters.values_mut().find_map(|ad| {
            if ad.a.name == name {
                Some(&mut ad.a)
            } else if ad.b.name == name {
                Some(&mut ad.b)
            } else {
                None
            }
        })
    }
}

/// What [`trainable_params`] selects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainSelection {
    /// Every param of every model, frozen or not.
    Full,
    /// Non-frozen params of the listed modalities.
    Lora(LoraSelection),
}

/// The exact trainable set, sorted by name.
pub fn trainable_params<'a>(models: &'a [ModalityModel], selection: &TrainSelection) -> Result<Vec<&'a Param>> {
    let mut out: Vec<&Param> = match selection {
        TrainSelection::Full => models.iter().flat_map(|m| m.all_params()).collect(),
        TrainSelection::Lora(sel) => {
            sel.validate(models.len())?;
            let wanted: BTreeSet<usize> = sel.modalities.clone();
            models
                .iter()
                .filter(|m| wanted.contains(&m.modality()))
                .flat_map(|m| m.all_params())
                .filter(|p| !p.frozen)
                .collect()
        }
    };
    out.sort_by(|a, b| a.name.cmp(&b.name));
    if out.is_empty() {
        return Err(Error::config("selection", "no trainable parameters selected"));
    }
    Ok(out)
}
