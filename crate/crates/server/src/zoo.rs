//! Writes the toy model zoo: one bundle per registry entry, the adapters the
//! registry names, and `registry.json`.

use std::path::Path;

use diffserve_core::adapters::{ControlNetAdapter, LoraAdapter, LoraConfig};
use diffserve_core::models::{BundleConfig, ModelBundle, Registry};
use diffserve_core::Result;

use crate::backend::{ADAPTER_DIR, REGISTRY_FILE};

/// Zero-conv init scale for shipped ControlNets, so they visibly steer output.
pub const CONTROLNET_STD: f32 = 0.02;

pub fn init(models_dir: &Path, seed: u64) -> Result<Registry> {
    let config = BundleConfig::default();
    let adapters_dir = models_dir.join(ADAPTER_DIR);
    std::fs::create_dir_all(&adapters_dir)?;

    let names: Vec<String> = Registry::toy_zoo(0).models.into_iter().map(|m| m.model_name).collect();
    let mut param_count = 0;
    let mut first: Option<ModelBundle> = None;
    for (i, name) in names.iter().enumerate() {
        let bundle = ModelBundle::init_seeded(name, &config, seed.wrapping_add(i as u64))?;
        bundle.save(&models_dir.join(name))?;
        param_count = bundle.param_count();
        first.get_or_insert(bundle);
    }
    // Every zoo model shares one architecture, so adapters built against the
    // first bundle fit all of them; the registry decides which model lists which.
    let base = first.expect("zoo is not empty");
    for (i, name) in ["lora-poem", "lora-2.5d"].iter().enumerate() {
        let lora = LoraAdapter::init_seeded(name, &base.unet, LoraConfig::default(), seed ^ (100 + i as u64), false)?;
        lora.save(&adapters_dir.join(format!("{name}.json")))?;
    }
    for (i, name) in ["controlnet-canny", "controlnet-depth"].iter().enumerate() {
        let factor = config.vae.downsample_factor;
        let mut c = ControlNetAdapter::from_unet(name, &base.unet, 1, factor, seed ^ (200 + i as u64))?;
        c.randomize_zero_convs(seed ^ (300 + i as u64), CONTROLNET_STD);
        c.save(&adapters_dir.join(format!("{name}.json")))?;
    }
    let registry = Registry::toy_zoo(param_count);
    registry.validate(config.vae.downsample_factor)?;
    registry.save(&models_dir.join(REGISTRY_FILE))?;
    Ok(registry)
}

pub fn is_initialized(models_dir: &Path) -> bool {
    models_dir.join(REGISTRY_FILE).is_file()
}
