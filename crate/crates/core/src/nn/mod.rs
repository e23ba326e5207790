//! Per-modality models, LoRA adapters and parameter bookkeeping.

mod layers;
mod lora;
mod model;
mod param;

pub use layers::{linear_forward, lora_forward, scaled_dot_attention};
pub use lora::{merge_lora, LoraAdapter, LoraSelection, Placement};
pub use model::{trainable_params, Architecture, Bindings, EncoderSpec, ModalityModel, TrainSelection};
pub use param::{hash_params, BindMode, Param, ParamHost};
