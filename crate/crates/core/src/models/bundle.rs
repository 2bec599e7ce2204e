use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    LoadedParams, ModelKind, Params, SeededInit, TextEncoder, TextEncoderConfig, UNet, UNetConfig, Vae,
    VaeConfig, WeightFile,
};
use crate::error::{Error, Result};

/// Manifest file names inside a bundle directory.
pub const BUNDLE_FILES: [(&str, ModelKind); 3] = [
    ("text_encoder.json", ModelKind::TextEncoder),
    ("unet.json", ModelKind::Unet),
    ("vae.json", ModelKind::Vae),
];

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_bundle_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub text_encoder: TextEncoderConfig,
    pub unet: UNetConfig,
    pub vae: VaeConfig,
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        self.text_encoder.validate()?;
        self.unet.validate()?;
        self.vae.validate()?;
        if self.unet.in_channels != self.vae.latent_channels {
            return Err(Error::InvalidArgument(format!(
                "U-Net in_channels {} != VAE latent_channels {}",
                self.unet.in_channels, self.vae.latent_channels
            )));
        }
        if self.unet.cross_attn_dim != self.text_encoder.embed_dim {
            return Err(Error::InvalidArgument(format!(
                "U-Net cross_attn_dim {} != text embed_dim {}",
                self.unet.cross_attn_dim, self.text_encoder.embed_dim
            )));
        }
        Ok(())
    }
}

/// Immutable text encoder + U-Net + VAE. `id` identifies the exact weights
/// and changes whenever a new bundle is derived (e.g. by LoRA folding).
#[derive(Debug)]
pub struct ModelBundle {
    pub id: u64,
    pub name: String,
    pub text_encoder: TextEncoder,
    pub unet: UNet,
    pub vae: Vae,
}

impl Clone for ModelBundle {
    fn clone(&self) -> Self {
        Self {
            id: next_bundle_id(),
            name: self.name.clone(),
            text_encoder: self.text_encoder.clone(),
            unet: self.unet.clone(),
            vae: self.vae.clone(),
        }
    }
}

impl ModelBundle {
    pub fn init_seeded(name: &str, config: &BundleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            id: next_bundle_id(),
            name: name.to_string(),
            text_encoder: TextEncoder::build(
                config.text_encoder.clone(),
                &mut SeededInit::component(seed, "text_encoder"),
            )?,
            unet: UNet::build(config.unet.clone(), &mut SeededInit::component(seed, "unet"))?,
            vae: Vae::build(config.vae.clone(), &mut SeededInit::component(seed, "vae"))?,
        })
    }

    pub fn config(&self) -> BundleConfig {
        BundleConfig {
            text_encoder: self.text_encoder.config.clone(),
            unet: self.unet.config.clone(),
            vae: self.vae.config.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.text_encoder.param_count() + self.unet.param_count() + self.vae.param_count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let files = [
            (BUNDLE_FILES[0], serde_json::to_value(&self.text_encoder.config)?, self.text_encoder.named_tensors()),
            (BUNDLE_FILES[1], serde_json::to_value(&self.unet.config)?, self.unet.named_tensors()),
            (BUNDLE_FILES[2], serde_json::to_value(&self.vae.config)?, self.vae.named_tensors()),
        ];
        for ((file, kind), config, tensors) in files {
            WeightFile { kind, config, tensors }.save(&dir.join(file))?;
        }
        Ok(())
    }

    /// Loads the three component manifests from a bundle directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("bundle")
            .to_string();
        let mut parts = Vec::with_capacity(3);
        for (file, kind) in BUNDLE_FILES {
            let wf = WeightFile::load(&dir.join(file))?;
            wf.expect_kind(kind)?;
            parts.push(wf);
        }
        let vae_wf = parts.pop().expect("three parts");
        let unet_wf = parts.pop().expect("three parts");
        let text_wf = parts.pop().expect("three parts");

        let config = BundleConfig {
            text_encoder: serde_json::from_value(text_wf.config)?,
            unet: serde_json::from_value(unet_wf.config)?,
            vae: serde_json::from_value(vae_wf.config)?,
        };
        config.validate()?;

        let mut src = LoadedParams::new(text_wf.tensors);
        let text_encoder = TextEncoder::build(config.text_encoder, &mut src)?;
        src.finish()?;
        let mut src = LoadedParams::new(unet_wf.tensors);
        let unet = UNet::build(config.unet, &mut src)?;
        src.finish()?;
        let mut src = LoadedParams::new(vae_wf.tensors);
        let vae = Vae::build(config.vae, &mut src)?;
        src.finish()?;

        Ok(Self {
            id: next_bundle_id(),
            name,
            text_encoder,
            unet,
            vae,
        })
    }

    /// Exact equality of every parameter.
    pub fn weights_bit_eq(&self, other: &ModelBundle) -> bool {
        fn eq<P: Params>(a: &P, b: &P) -> bool {
            let (ta, tb) = (a.named_tensors(), b.named_tensors());
            ta.len() == tb.len() && ta.iter().all(|(k, v)| tb.get(k).is_some_and(|w| v.bit_eq(w)))
        }
        eq(&self.text_encoder, &other.text_encoder) && eq(&self.unet, &other.unet) && eq(&self.vae, &other.vae)
    }
}
