use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REGISTRY_FORMAT_VERSION: u32 = 1;

/// One model-zoo row: name, domain, default output size and compatible adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_name: String,
    pub domain_tag: String,
    pub default_width: usize,
    pub default_height: usize,
    pub param_count: usize,
    #[serde(default)]
    pub adapters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub format_version: u32,
    pub models: Vec<RegistryEntry>,
}

impl Registry {
    pub fn new(models: Vec<RegistryEntry>) -> Self {
        Self {
            format_version: REGISTRY_FORMAT_VERSION,
            models,
        }
    }

    /// Toy-scale zoo mirroring the released model families: "large" and
    /// "xlarge" share an architecture and differ only in default image size.
    pub fn toy_zoo(param_count: usize) -> Self {
        let entry = |name: &str, domain: &str, w: usize, h: usize, adapters: &[&str]| RegistryEntry {
            model_name: name.to_string(),
            domain_tag: domain.to_string(),
            default_width: w,
            default_height: h,
            param_count,
            adapters: adapters.iter().map(|s| s.to_string()).collect(),
        };
        Self::new(vec![
            entry(
                "toy-general-large",
                "General purpose",
                64,
                64,
                &["controlnet-canny", "controlnet-depth"],
            ),
            entry("toy-general-xlarge", "General purpose", 96, 96, &[]),
            entry(
                "toy-artist-large",
                "Artistic pictures",
                64,
                64,
                &["controlnet-canny", "controlnet-depth", "lora-poem", "lora-2.5d"],
            ),
            entry("toy-artist-xlarge", "Artistic pictures", 96, 96, &[]),
            entry("toy-food-large", "Chinese cuisines", 64, 64, &[]),
            entry("toy-anime-large", "Cartoon characters (anime)", 96, 64, &[]),
        ])
    }

    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        if self.format_version != REGISTRY_FORMAT_VERSION {
            return Err(Error::Weights(format!(
                "unknown registry format_version {}",
                self.format_version
            )));
        }
        for m in &self.models {
            if m.default_width % downsample_factor != 0 || m.default_height % downsample_factor != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{}: default size {}x{} not divisible by {downsample_factor}",
                    m.model_name, m.default_width, m.default_height
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&RegistryEntry> {
        self.models
            .iter()
            .find(|m| m.model_name == name)
            .ok_or_else(|| crate::error::unknown("model", name, self.models.iter().map(|m| &m.model_name)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
