//! `diffserve bench run`: baseline vs optimized on one workload, written as a
//! text table and a JSON record.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use diffserve_core::adapters::{LoraAdapter, LoraConfig};
use diffserve_core::models::{BundleConfig, ModelBundle};
use diffserve_core::perfbench::{compare_report, reference_params, run_benchmark, Comparison};
use diffserve_core::pipelines::OptimizationConfig;
use diffserve_core::{Error, Result};

use crate::backend::ADAPTER_DIR;

/// Unset fields keep the reference workload (25 steps, 64x64, LoRA attached).
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub prompt: Option<String>,
    pub negative_prompt: Option<String>,
    pub steps: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub seed: Option<u64>,
    pub guidance_scale: Option<f32>,
    /// Drop the LoRA from the workload.
    #[serde(default)]
    pub no_lora: bool,
    pub lora_strength: Option<f32>,
    /// Load the model (and LoRA) from a models directory instead of seeding a toy one.
    pub models_dir: Option<PathBuf>,
    pub model_name: Option<String>,
    pub lora_name: Option<String>,
    pub bundle_seed: Option<u64>,
    pub baseline: Option<OptimizationConfig>,
    pub optimized: Option<OptimizationConfig>,
}

impl BenchConfig {
    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

pub fn run(config: &BenchConfig, repeats: usize) -> Result<Comparison> {
    let (bundle, lora) = match &config.models_dir {
        Some(dir) => {
            let model = config.model_name.as_deref().unwrap_or("toy-artist-large");
            let bundle = ModelBundle::load(&dir.join(model))?;
            let lora_name = config.lora_name.as_deref().unwrap_or("lora-poem");
            let lora = LoraAdapter::load(&dir.join(ADAPTER_DIR).join(format!("{lora_name}.json")))?;
            (bundle, lora)
        }
        None => {
            let bundle = ModelBundle::init_seeded("toy", &BundleConfig::default(), config.bundle_seed.unwrap_or(42))?;
            let lora = LoraAdapter::init_seeded("style", &bundle.unet, LoraConfig::default(), 3, false)?;
            (bundle, lora)
        }
    };
    let mut p = reference_params(Arc::new(lora));
    if let Some(v) = &config.prompt {
        p.prompt = v.clone();
    }
    if let Some(v) = &config.negative_prompt {
        p.negative_prompt = v.clone();
    }
    p.steps = config.steps.unwrap_or(p.steps);
    p.width = config.width.unwrap_or(p.width);
    p.height = config.height.unwrap_or(p.height);
    p.seed = config.seed.unwrap_or(p.seed);
    p.guidance_scale = config.guidance_scale.unwrap_or(p.guidance_scale);
    if config.no_lora {
        p.lora = None;
    } else if let (Some(s), Some(l)) = (config.lora_strength, p.lora.as_mut()) {
        l.strength = s;
    }
    p.validate(bundle.vae.config.downsample_factor)?;
    let base = config.baseline.unwrap_or_default();
    let opt = config.optimized.unwrap_or_else(OptimizationConfig::all_on);
    if base == opt {
        return Err(Error::InvalidArgument("baseline and optimized configs are identical".into()));
    }
    let b = run_benchmark(&bundle, &p, base, repeats)?;
    let o = run_benchmark(&bundle, &p, opt, repeats)?;
    compare_report(&b, &o)
}

/// Writes `<out>.txt` and `<out>.json`; returns both paths.
pub fn write_report(c: &Comparison, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let txt = out.with_extension("txt");
    let json = out.with_extension("json");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&txt, c.render_table())?;
    std::fs::write(&json, c.to_json()?)?;
    Ok((txt, json))
}
