//! LoRA weight deltas and ControlNet control branches.

mod controlnet;
mod lora;

pub use controlnet::{conditioning_scale, ControlNetAdapter, ControlNetConfig};
pub use lora::{apply_lora, fold_lora, unfold_lora, LoraAdapter, LoraConfig, LoraDelta, LoraPair, LORA_TARGET_SUFFIXES};
