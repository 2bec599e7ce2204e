//! Toy text encoder, U-Net and VAE plus their weight files and registry.

mod bundle;
pub mod layers;
mod registry;
mod text;
pub(crate) mod unet;
mod vae;
mod weights;

use std::collections::HashMap;

use indexmap::IndexMap;

pub use bundle::{BundleConfig, ModelBundle, BUNDLE_FILES};
pub(crate) use bundle::next_bundle_id;
pub use layers::{Conv2d, GroupNorm, LayerNorm, Linear};
pub use registry::{Registry, RegistryEntry, REGISTRY_FORMAT_VERSION};
pub use text::{tokenize, TextEncoder, TextEncoderConfig, BOS, EOS, PAD};
pub use unet::{timestep_embedding, UNet, UNetConfig};
pub use vae::{Vae, VaeConfig};
pub use weights::{checksum as weights_checksum, ModelKind, TensorEntry, WeightFile, WeightManifest, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scratch, Tensor};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Where parameters come from while a model is being built.
pub trait ParamSource {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Truncated-normal init; each parameter draws from its own name-keyed stream,
/// so the result does not depend on construction order.
pub struct SeededInit {
    rng: Rng,
}

impl SeededInit {
    pub fn new(seed: u64) -> Self {
        Self { rng: Rng::new(seed) }
    }

    /// Stream for one component of a bundle, so components initialize independently.
    pub fn component(seed: u64, component: &str) -> Self {
        Self {
            rng: Rng::new(seed).split_named(component),
        }
    }
}

impl ParamSource for SeededInit {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal => {
                let mut r = self.rng.split_named(name);
                Tensor::from_fn(shape, |_| r.truncated_normal(INIT_STD))
            }
        })
    }
}

/// Tensors read from a weight file, checked against the shapes the config implies.
pub struct LoadedParams {
    tensors: IndexMap<String, Tensor>,
}

impl LoadedParams {
    pub fn new(tensors: IndexMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Fails if the file carried tensors the architecture never asked for.
    pub fn finish(self) -> Result<()> {
        if let Some(name) = self.tensors.keys().next() {
            return Err(Error::Weights(format!(
                "tensor `{name}` is not part of the configured architecture"
            )));
        }
        Ok(())
    }
}

impl ParamSource for LoadedParams {
    fn take(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .tensors
            .shift_remove(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Weights(format!(
                "tensor `{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

/// Named parameter traversal, used for serialization, counting and folding.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        self.visit(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }
}

/// Per-call replacement of a linear layer's weight (dynamic LoRA).
pub trait WeightDelta: Sync {
    /// Effective weight for the layer called `layer`, or `None` to use `base`.
    fn effective_weight(&self, layer: &str, base: &Tensor) -> Option<Tensor>;
}

/// Cross-attention keys/values keyed by (context branch, layer name).
#[derive(Default)]
pub struct KvCache {
    entries: HashMap<(u8, String), (Tensor, Tensor)>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Execution options threaded through every forward pass.
#[derive(Default)]
pub struct Exec<'a> {
    pub delta: Option<&'a dyn WeightDelta>,
    /// In-place activations and one im2col workspace shared by all convolutions.
    pub reuse_buffers: bool,
    pub scratch: Scratch,
    /// When set, text-side keys and values are computed once per branch.
    pub kv_cache: Option<KvCache>,
    /// Which text context is active (0 = unconditional, 1 = conditional).
    pub branch: u8,
}

impl<'a> Exec<'a> {
    pub fn with_delta(delta: Option<&'a dyn WeightDelta>) -> Self {
        Self {
            delta,
            ..Self::default()
        }
    }
}
