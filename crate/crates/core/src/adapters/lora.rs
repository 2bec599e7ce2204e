use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{next_bundle_id, ModelBundle, ModelKind, Params, UNet, WeightDelta, WeightFile, INIT_STD};
use crate::tensor::{self, Rng, Tensor};

/// Projection layers a LoRA may target: attention q/k/v/out in the U-Net.
pub const LORA_TARGET_SUFFIXES: [&str; 8] = [
    "self_q", "self_k", "self_v", "self_out", "cross_q", "cross_k", "cross_v", "cross_out",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

/// Low-rank factors for one `d x k` weight: `a` is `r x k`, `b` is `d x r`.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub name: String,
    pub config: LoraConfig,
    /// Keyed by target layer name, e.g. `down.1.attn.cross_k`.
    pub targets: IndexMap<String, LoraPair>,
}

fn check_strength(strength: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("lora strength must be in [0, 1], got {strength}")));
    }
    Ok(())
}

fn linear_weight_shapes(unet: &UNet) -> HashMap<String, Vec<usize>> {
    let mut shapes = HashMap::new();
    unet.visit(&mut |name, t| {
        if let Some(layer) = name.strip_suffix(".weight") {
            if t.rank() == 2 {
                shapes.insert(layer.to_string(), t.shape().to_vec());
            }
        }
    });
    shapes
}

impl LoraAdapter {
    /// Names of every attention projection in `unet`, in parameter order.
    pub fn target_names(unet: &UNet) -> Vec<String> {
        let mut out = Vec::new();
        unet.visit(&mut |name, t| {
            if let Some(layer) = name.strip_suffix(".weight") {
                let last = layer.rsplit('.').next().unwrap_or_default();
                if t.rank() == 2 && LORA_TARGET_SUFFIXES.contains(&last) {
                    out.push(layer.to_string());
                }
            }
        });
        out
    }

    /// Random adapter over every attention projection. `a` is truncated normal;
    /// `b` is zero when `zero_b` (the usual fresh-adapter convention), else
    /// truncated normal too so the adapter actually changes outputs.
    pub fn init_seeded(name: &str, unet: &UNet, config: LoraConfig, seed: u64, zero_b: bool) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be >= 1".into()));
        }
        let shapes = linear_weight_shapes(unet);
        let root = Rng::new(seed).split_named(name);
        let mut targets = IndexMap::new();
        for target in Self::target_names(unet) {
            let (d, k) = (shapes[&target][0], shapes[&target][1]);
            let mut r = root.split_named(&target);
            let a = Tensor::from_fn(&[config.rank, k], |_| r.truncated_normal(INIT_STD));
            let b = if zero_b {
                Tensor::zeros(&[d, config.rank])
            } else {
                Tensor::from_fn(&[d, config.rank], |_| r.truncated_normal(INIT_STD))
            };
            targets.insert(target, LoraPair { a, b });
        }
        Ok(Self {
            name: name.to_string(),
            config,
            targets,
        })
    }

    pub fn param_count(&self) -> usize {
        self.targets.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Every target must exist in `unet` with a shape the factors compose to.
    pub fn validate(&self, unet: &UNet) -> Result<()> {
        let shapes = linear_weight_shapes(unet);
        for (target, pair) in &self.targets {
            let shape = shapes
                .get(target)
                .ok_or_else(|| Error::InvalidArgument(format!("lora target `{target}` not found in U-Net")))?;
            let (ra, k) = pair.a.dims2()?;
            let (d, rb) = pair.b.dims2()?;
            if ra != self.config.rank || rb != self.config.rank || shape[..] != [d, k] {
                return Err(Error::Shape(format!(
                    "lora target `{target}`: A {:?} and B {:?} do not compose to weight {shape:?} at rank {}",
                    pair.a.shape(),
                    pair.b.shape(),
                    self.config.rank
                )));
            }
        }
        Ok(())
    }

    /// `(alpha / r) B A` for one target.
    pub fn unit_delta(&self, target: &str) -> Option<Tensor> {
        let pair = self.targets.get(target)?;
        let scale = self.config.alpha / self.config.rank as f32;
        let mut d = tensor::matmul(&pair.b, &pair.a).ok()?;
        d.map_inplace(|v| v * scale);
        Some(d)
    }

    /// `strength (alpha / r) B A`; exactly `strength` times the unit delta.
    pub fn delta(&self, target: &str, strength: f32) -> Option<Tensor> {
        self.unit_delta(target).map(|d| d.map(|v| strength * v))
    }

    /// `W + delta`, the one merge used by both the dynamic and folded paths.
    pub fn merged_weight(&self, target: &str, base: &Tensor, strength: f32) -> Option<Tensor> {
        let d = self.delta(target, strength)?;
        Some(Tensor::from_fn(base.shape(), |i| base.data()[i] + d.data()[i]))
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let mut tensors = IndexMap::new();
        for (target, pair) in &self.targets {
            tensors.insert(format!("{target}.lora_a"), pair.a.clone());
            tensors.insert(format!("{target}.lora_b"), pair.b.clone());
        }
        WeightFile {
            kind: ModelKind::Lora,
            config: serde_json::to_value(&self.config)?,
            tensors,
        }
        .save(manifest_path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let wf = WeightFile::load(manifest_path)?;
        wf.expect_kind(ModelKind::Lora)?;
        let config: LoraConfig = serde_json::from_value(wf.config)?;
        let mut a_parts = IndexMap::new();
        let mut b_parts = HashMap::new();
        for (name, t) in wf.tensors {
            if let Some(target) = name.strip_suffix(".lora_a") {
                a_parts.insert(target.to_string(), t);
            } else if let Some(target) = name.strip_suffix(".lora_b") {
                b_parts.insert(target.to_string(), t);
            } else {
                return Err(Error::Weights(format!("unexpected tensor `{name}` in lora file")));
            }
        }
        let mut targets = IndexMap::new();
        for (target, a) in a_parts {
            let b = b_parts
                .remove(&target)
                .ok_or_else(|| Error::Weights(format!("missing tensor `{target}.lora_b`")))?;
            targets.insert(target, LoraPair { a, b });
        }
        if let Some(target) = b_parts.keys().next() {
            return Err(Error::Weights(format!("missing tensor `{target}.lora_a`")));
        }
        let name = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("lora")
            .to_string();
        Ok(Self { name, config, targets })
    }
}

/// Per-generation view of an adapter at a fixed strength; the base bundle is
/// never written.
pub struct LoraDelta<'a> {
    adapter: &'a LoraAdapter,
    strength: f32,
}

impl WeightDelta for LoraDelta<'_> {
    fn effective_weight(&self, layer: &str, base: &Tensor) -> Option<Tensor> {
        if self.strength == 0.0 {
            return None;
        }
        self.adapter.merged_weight(layer, base, self.strength)
    }
}

pub fn apply_lora<'a>(bundle: &ModelBundle, adapter: &'a LoraAdapter, strength: f32) -> Result<LoraDelta<'a>> {
    check_strength(strength)?;
    adapter.validate(&bundle.unet)?;
    Ok(LoraDelta { adapter, strength })
}

fn rewrite(bundle: &ModelBundle, adapter: &LoraAdapter, strength: f32, sign: f32) -> Result<ModelBundle> {
    check_strength(strength)?;
    adapter.validate(&bundle.unet)?;
    let mut out = bundle.clone();
    if strength == 0.0 {
        return Ok(out);
    }
    out.unet.visit_mut(&mut |name, w| {
        let Some(layer) = name.strip_suffix(".weight") else {
            return;
        };
        if let Some(d) = adapter.delta(layer, strength) {
            for (x, dx) in w.data_mut().iter_mut().zip(d.data()) {
                *x += sign * dx;
            }
        }
    });
    out.id = next_bundle_id();
    Ok(out)
}

/// New bundle whose U-Net weights are `W + strength (alpha / r) B A`.
pub fn fold_lora(bundle: &ModelBundle, adapter: &LoraAdapter, strength: f32) -> Result<ModelBundle> {
    rewrite(bundle, adapter, strength, 1.0)
}

/// Subtracts the same delta that `fold_lora` added.
pub fn unfold_lora(folded: &ModelBundle, adapter: &LoraAdapter, strength: f32) -> Result<ModelBundle> {
    rewrite(folded, adapter, strength, -1.0)
}
