//! Unimodal fine-tuning, the joint baselines, linear probing and MMLoRA.

mod bundle;
mod fit;
mod optimizer;
mod pipelines;
mod predict;

pub use bundle::{FusionHead, Provenance, Stage, TrainedBundle, FUSION_BIAS, FUSION_WEIGHT};
pub use fit::FitSummary;
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use pipelines::{
    attach_adapters, joint_full_finetune, linear_eval, mixture_objective, mmlora_train, train_late_fusion,
    train_umft, ume_nll, umft_bundle, MmloraOptions,
};
pub use predict::{accuracy, evaluate, ume_predict, EvalReport, Predictor};
