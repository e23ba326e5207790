use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{linear_forward, trainable_params, Bindings, LoraSelection, ModalityModel, Param, TrainSelection};
use crate::seed::derive_seed;
use crate::synthdata::{Batch, MultiModalDataset};
use crate::training::bundle::{FusionHead, Stage, TrainedBundle, FUSION_BIAS, FUSION_WEIGHT};
use crate::training::fit::{fit, FitState, FitSummary};
use crate::training::optimizer::OptimizerConfig;
use crate::training::predict::{accuracy, evaluate, ume_predict, Predictor};

fn constant_inputs(tape: &mut Tape, batch: &Batch) -> Vec<NodeId> {
    batch.inputs.iter().map(|x| tape.constant(x.clone())).collect()
}

/// `−log((1/M)·Σₘ Pᵐ(y|x))` over the batch, every model in the state contributing.
fn mixture_loss(tape: &mut Tape, b: &Bindings, state: &FitState, batch: &Batch) -> Result<NodeId> {
    let xs = constant_inputs(tape, batch);
    let mut logits = Vec::with_capacity(state.models.len());
    for m in &state.models {
        logits.push(m.logits(tape, b, xs[m.modality() - 1])?);
    }
    tape.mixture_nll(&logits, &batch.labels)
}

fn ensemble_val(val: &MultiModalDataset) -> impl Fn(&FitState) -> Result<f64> + '_ {
    move |s: &FitState| evaluate(Predictor::Ensemble(&s.models), val)
}

fn names<'a>(params: impl IntoIterator<Item = &'a Param>) -> Vec<String> {
    params.into_iter().map(|p| p.name.clone()).collect()
}

/// Full training of one modality's model on that modality's inputs alone.
pub fn train_umft(
    model: &ModalityModel,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    opt: &OptimizerConfig,
) -> Result<(ModalityModel, FitSummary)> {
    if model.has_adapters() {
        return Err(Error::config("umft", "model already carries adapters"));
    }
    let mut m = model.clone();
    m.set_frozen(false);
    let trainable = names(m.all_params());
    let id = m.modality();
    let mut state = FitState {
        models: vec![m],
        extra: vec![],
    };
    let summary = fit(
        &format!("umft/m{id}"),
        &mut state,
        &trainable,
        train,
        opt,
        |tape, b, s, batch| {
            let x = tape.constant(batch.inputs[id - 1].clone());
            let z = s.models[0].logits(tape, b, x)?;
            tape.cross_entropy(z, &batch.labels)
        },
        |s| evaluate(Predictor::Single(&s.models[0]), val),
    )?;
    Ok((state.models.remove(0), summary))
}

/// Unimodal fine-tuning of every model in a pretrained-analog bundle. Each
/// modality trains with its own seed derived from `opt.seed`.
pub fn umft_bundle(
    bundle: &TrainedBundle,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    opt: &OptimizerConfig,
) -> Result<TrainedBundle> {
    bundle.expect_stage(Stage::PretrainedAnalog)?;
    let mut models = Vec::with_capacity(bundle.models.len());
    for m in &bundle.models {
        let seeded = opt.clone().with_seed(derive_seed(opt.seed, &format!("umft/m{}", m.modality())));
        models.push(train_umft(m, train, val, &seeded)?.0);
    }
    let mut out = TrainedBundle::new(Stage::Umft, models, bundle.provenance.clone());
    out.umft_hash = Some(out.base_hash());
    Ok(out)
}

/// End-to-end training of every encoder plus a linear head over their
/// concatenated features. The models' own heads are unused and untouched.
pub fn train_late_fusion(
    models: &[ModalityModel],
    head: FusionHead,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    opt: &OptimizerConfig,
) -> Result<(TrainedBundle, FitSummary)> {
    let widths: usize = models.iter().map(|m| m.feature_width()).sum();
    if head.weight.value.cols() != widths {
        return Err(Error::Shape {
            op: "late_fusion",
            left: head.weight.value.shape(),
            right: (head.weight.value.rows(), widths),
        });
    }
    let mut models = models.to_vec();
    for m in &mut models {
        if m.has_adapters() {
            return Err(Error::config("late_fusion", "models must not carry adapters"));
        }
        m.set_frozen(false);
    }
    let mut trainable: Vec<String> = models
        .iter()
        .flat_map(|m| m.base_params())
        .filter(|p| p.name.contains("/encoder/"))
        .map(|p| p.name.clone())
        .collect();
    trainable.extend([FUSION_WEIGHT.to_string(), FUSION_BIAS.to_string()]);
    let mut state = FitState {
        models,
        extra: vec![head.weight, head.bias],
    };
    let head_of = |s: &FitState| FusionHead::from_params(s.extra[0].clone(), s.extra[1].clone());
    let summary = fit(
        "late_fusion",
        &mut state,
        &trainable,
        train,
        opt,
        |tape, b, s, batch| {
            let xs = constant_inputs(tape, batch);
            let z = head_of(s)?.logits(tape, b, &s.models, &xs)?;
            tape.cross_entropy(z, &batch.labels)
        },
        |s| {
            let head = head_of(s)?;
            evaluate(
                Predictor::LateFusion {
                    models: &s.models,
                    head: &head,
                },
                val,
            )
        },
    )?;
    let head = head_of(&state)?;
    let mut bundle = TrainedBundle::new(Stage::JointBaseline, state.models, Default::default());
    bundle.fusion_head = Some(head);
    Ok((bundle, summary))
}

const PROBE_WEIGHT: &str = "probe/head.weight";
const PROBE_BIAS: &str = "probe/head.bias";

fn probe_logits(features: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut z = features.matmul_nt(w)?;
    for r in 0..z.rows() {
        for (v, bias) in z.row_mut(r).iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(z)
}

/// Test accuracy of a fresh linear head trained on the frozen encoder's features.
pub fn linear_eval(
    encoder: &ModalityModel,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    test: &MultiModalDataset,
    opt: &OptimizerConfig,
) -> Result<f64> {
    let id = encoder.modality();
    let featurize = |ds: &MultiModalDataset| -> Result<MultiModalDataset> {
        let f = encoder.extract_features(ds.input(id))?;
        MultiModalDataset::new(ds.split(), vec![f], ds.labels().to_vec(), ds.classes())
    };
    let (ftrain, fval, ftest) = (featurize(train)?, featurize(val)?, featurize(test)?);
    let width = encoder.feature_width();
    let classes = encoder.architecture().classes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opt.seed, "probe/init"));
    let normal = Normal::new(0.0, (1.0 / width as f64).sqrt()).expect("finite std");
    let mut state = FitState {
        models: vec![],
        extra: vec![
            Param::new(PROBE_WEIGHT, Matrix::from_fn(classes, width, |_, _| normal.sample(&mut rng))),
            Param::new(PROBE_BIAS, Matrix::zeros(1, classes)),
        ],
    };
    let trainable = vec![PROBE_WEIGHT.to_string(), PROBE_BIAS.to_string()];
    let score = |s: &FitState, ds: &MultiModalDataset| {
        let z = probe_logits(ds.input(1), &s.extra[0].value, &s.extra[1].value)?;
        accuracy(&z, ds.labels())
    };
    fit(
        &format!("linear_eval/m{id}"),
        &mut state,
        &trainable,
        &ftrain,
        opt,
        |tape, b, _, batch| {
            let x = tape.constant(batch.inputs[0].clone());
            let z = linear_forward(tape, b.get(PROBE_WEIGHT)?, Some(b.get(PROBE_BIAS)?), x)?;
            tape.cross_entropy(z, &batch.labels)
        },
        |s| score(s, &fval),
    )?;
    score(&state, &ftest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmloraOptions {
    pub rank: usize,
    pub selection: LoraSelection,
    pub init_std: f64,
    pub scale: f64,
    /// Permit adapting untrained (pretrained-analog) models, for ablations.
    pub allow_pretrained: bool,
}

impl Default for MmloraOptions {
    fn default() -> Self {
        Self {
            rank: 1,
            selection: LoraSelection::all(2, Default::default()),
            init_std: 0.02,
            scale: 1.0,
            allow_pretrained: false,
        }
    }
}

/// Models with adapters attached per `opts`, every base param frozen.
/// Adapter seeds derive from `seed`.
pub fn attach_adapters(models: &[ModalityModel], opts: &MmloraOptions, seed: u64) -> Result<Vec<ModalityModel>> {
    opts.selection.validate(models.len())?;
    let mut out = Vec::with_capacity(models.len());
    for m in models {
        let mut frozen = m.clone();
        frozen.set_frozen(true);
        if opts.selection.modalities.contains(&m.modality()) {
            let s = derive_seed(seed, &format!("lora/m{}", m.modality()));
            frozen = frozen.lora_attach(opts.selection.placement, opts.rank, opts.init_std, opts.scale, s)?;
        }
        out.push(frozen);
    }
    Ok(out)
}

fn frozen_snapshot(models: &[ModalityModel]) -> Vec<Param> {
    models
        .iter()
        .flat_map(|m| m.all_params())
        .filter(|p| p.frozen)
        .cloned()
        .collect()
}

fn verify_frozen(stage: &str, before: &[Param], models: &[ModalityModel]) -> Result<()> {
    let after = frozen_snapshot(models);
    for (a, b) in before.iter().zip(&after) {
        if a.name != b.name || !a.value.bit_eq(&b.value) {
            return Err(Error::Integrity {
                stage: stage.into(),
                name: a.name.clone(),
            });
        }
    }
    if before.len() != after.len() {
        return Err(Error::Integrity {
            stage: stage.into(),
            name: "<frozen set changed>".into(),
        });
    }
    Ok(())
}

/// Attaches adapters to a unimodally fine-tuned bundle and trains only them
/// against the averaged-probability objective.
pub fn mmlora_train(
    bundle: &TrainedBundle,
    opts: &MmloraOptions,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    opt: &OptimizerConfig,
) -> Result<(TrainedBundle, FitSummary)> {
    let pretrained_ok = opts.allow_pretrained && bundle.stage == Stage::PretrainedAnalog;
    if !pretrained_ok {
        bundle.expect_stage(Stage::Umft)?;
    }
    if bundle.models.iter().any(|m| m.has_adapters()) {
        return Err(Error::config("mmlora", "bundle already carries adapters"));
    }
    if let Some(expected) = &bundle.umft_hash {
        if *expected != bundle.base_hash() {
            return Err(Error::Integrity {
                stage: "mmlora (input bundle)".into(),
                name: "base parameters differ from their fine-tuned snapshot".into(),
            });
        }
    }
    let models = attach_adapters(&bundle.models, opts, derive_seed(opt.seed, "mmlora/adapters"))?;
    let trainable = names(trainable_params(&models, &TrainSelection::Lora(opts.selection.clone()))?);
    let before = frozen_snapshot(&models);
    let mut state = FitState { models, extra: vec![] };
    let summary = fit("mmlora", &mut state, &trainable, train, opt, mixture_loss, ensemble_val(val))?;
    verify_frozen("mmlora", &before, &state.models)?;
    let mut out = TrainedBundle::new(Stage::Mmlora, state.models, bundle.provenance.clone());
    out.umft_hash = bundle.umft_hash.clone();
    Ok((out, summary))
}

/// Same objective as [`mmlora_train`] with every parameter trainable and no adapters.
pub fn joint_full_finetune(
    bundle: &TrainedBundle,
    train: &MultiModalDataset,
    val: &MultiModalDataset,
    opt: &OptimizerConfig,
) -> Result<(TrainedBundle, FitSummary)> {
    bundle.expect_stage(Stage::Umft)?;
    let mut models = bundle.models.clone();
    for m in &mut models {
        m.set_frozen(false);
    }
    let trainable = names(trainable_params(&models, &TrainSelection::Full)?);
    let mut state = FitState { models, extra: vec![] };
    let summary = fit("joint_full_ft", &mut state, &trainable, train, opt, mixture_loss, ensemble_val(val))?;
    let mut out = TrainedBundle::new(Stage::JointFullFt, state.models, bundle.provenance.clone());
    out.umft_hash = bundle.umft_hash.clone();
    Ok((out, summary))
}

/// Per-sample MMLoRA objective on a full split, for inspecting the starting point.
pub fn mixture_objective(models: &[ModalityModel], ds: &MultiModalDataset) -> Result<f64> {
    let batch = Batch {
        indices: (0..ds.len()).collect(),
        inputs: ds.inputs().to_vec(),
        labels: ds.labels().to_vec(),
    };
    let state = FitState {
        models: models.to_vec(),
        extra: vec![],
    };
    let mut tape = Tape::new();
    let b = state.bind(&mut tape, &[])?;
    let l = mixture_loss(&mut tape, &b, &state, &batch)?;
    Ok(tape.value(l).get(0, 0))
}

/// Mean of `−log(UME probability of the true class)`.
pub fn ume_nll(models: &[ModalityModel], ds: &MultiModalDataset) -> Result<f64> {
    let p = ume_predict(models, ds.inputs())?;
    let total: f64 = ds.labels().iter().enumerate().map(|(r, &y)| -p.get(r, y).ln()).sum();
    Ok(total / ds.len() as f64)
}
