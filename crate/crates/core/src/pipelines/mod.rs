//! The four generation functions with classifier-free guidance, plus the
//! engine that owns schedulers, optimization switches and their caches.

mod image;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use image::{
    from_byte, from_png_base64, from_png_bytes, gray_to_png_base64, to_byte, to_png_base64, to_png_bytes,
};

use crate::adapters::{apply_lora, conditioning_scale, fold_lora, ControlNetAdapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::models::{tokenize, Exec, KvCache, ModelBundle, WeightDelta};
use crate::preprocess::{run_preprocessor, Preprocessor, DEFAULT_HIGH_THRESHOLD, DEFAULT_LOW_THRESHOLD};
use crate::schedulers::{
    add_noise, select_timesteps, NoiseSchedule, SchedulerRegistry, SchedulerState, DEFAULT_BETA_END,
    DEFAULT_BETA_START, BetaMode,
};
use crate::tensor::{AllocTracker, Rng, Scratch, Tensor};

pub const DEFAULT_STEPS: usize = 25;
pub const DEFAULT_GUIDANCE: f32 = 7.5;
pub const DEFAULT_STRENGTH: f32 = 0.8;
pub const DEFAULT_SCHEDULER: &str = "ddim";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Func {
    T2i,
    I2i,
    Inpaint,
    Edit,
}

impl Func {
    pub const ALL: [Func; 4] = [Func::T2i, Func::I2i, Func::Inpaint, Func::Edit];

    pub fn as_str(self) -> &'static str {
        match self {
            Func::T2i => "t2i",
            Func::I2i => "i2i",
            Func::Inpaint => "inpaint",
            Func::Edit => "edit",
        }
    }
}

impl std::str::FromStr for Func {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Func::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| crate::error::unknown("func_name", s, Func::ALL.map(Func::as_str)))
    }
}

#[derive(Debug, Clone)]
pub struct LoraSpec {
    pub adapter: Arc<LoraAdapter>,
    pub strength: f32,
}

#[derive(Debug, Clone)]
pub struct ControlSpec {
    pub adapter: Arc<ControlNetAdapter>,
    pub scale: f32,
    /// RGB `[3, H, W]` in `[-1, 1]`. For `edit` the init image is used when absent.
    pub condition_image: Option<Tensor>,
    pub preprocessor: Preprocessor,
    pub low_threshold: f32,
    pub high_threshold: f32,
}

impl ControlSpec {
    pub fn new(adapter: Arc<ControlNetAdapter>, preprocessor: Preprocessor) -> Self {
        Self {
            adapter,
            scale: 1.0,
            condition_image: None,
            preprocessor,
            low_threshold: DEFAULT_LOW_THRESHOLD,
            high_threshold: DEFAULT_HIGH_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub func: Func,
    pub prompt: String,
    pub negative_prompt: String,
    pub steps: usize,
    pub guidance_scale: f32,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub strength: f32,
    pub eta: f32,
    pub scheduler: String,
    /// RGB `[3, H, W]` in `[-1, 1]`.
    pub init_image: Option<Tensor>,
    /// `[1, H, W]`; values >= 0.5 mark pixels to regenerate.
    pub mask_image: Option<Tensor>,
    pub lora: Option<LoraSpec>,
    pub controlnet: Option<ControlSpec>,
    /// Skip the unconditional branch entirely (one U-Net pass per step).
    pub conditional_only: bool,
}

impl PipelineParams {
    pub fn new(func: Func, prompt: &str, width: usize, height: usize, seed: u64) -> Self {
        Self {
            func,
            prompt: prompt.to_string(),
            negative_prompt: String::new(),
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            width,
            height,
            seed,
            strength: DEFAULT_STRENGTH,
            eta: 0.0,
            scheduler: DEFAULT_SCHEDULER.to_string(),
            init_image: None,
            mask_image: None,
            lora: None,
            controlnet: None,
            conditional_only: false,
        }
    }

    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        let f = downsample_factor;
        if self.width == 0 || self.height == 0 || self.width % f != 0 || self.height % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "width and height must be positive multiples of {f}, got {}x{}",
                self.width, self.height
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidArgument(format!("strength must be in [0, 1], got {}", self.strength)));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor, field: &str, channels: usize) -> Result<()> {
        if image.shape() != [channels, self.height, self.width] {
            return Err(Error::Shape(format!(
                "{field} is {:?}, expected [{channels}, {}, {}]",
                image.shape(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// `u + s (c - u)`. `s = 1` and `s = 0` return `c` and `u` exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::Shape(format!(
            "cfg_combine: {:?} vs {:?}",
            eps_uncond.shape(),
            eps_cond.shape()
        )));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let (u, c) = (eps_uncond.data(), eps_cond.data());
    Ok(Tensor::from_fn(eps_cond.shape(), |i| u[i] + s * (c[i] - u[i])))
}

/// Picks `a` where `mask` is 1 and `b` elsewhere. `mask` has one channel and
/// broadcasts over the channels of `a` and `b`.
pub fn select(mask: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, h, w) = mask.dims3()?;
    let (_, ah, aw) = a.dims3()?;
    if a.shape() != b.shape() || (ah, aw) != (h, w) {
        return Err(Error::Shape(format!(
            "select: mask {:?}, a {:?}, b {:?}",
            mask.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let (m, ad, bd) = (mask.data(), a.data(), b.data());
    Ok(Tensor::from_fn(a.shape(), |i| if m[i % plane] >= 0.5 { ad[i] } else { bd[i] }))
}

/// Binary `[1, H/f, W/f]` mask: a latent cell regenerates if any pixel of its
/// `f x f` block does.
pub fn latent_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, h, w) = mask.dims3()?;
    let (lh, lw) = (h / factor, w / factor);
    let m = mask.data();
    Ok(Tensor::from_fn(&[1, lh, lw], |i| {
        let (ly, lx) = (i / lw, i % lw);
        let hit = (0..factor).any(|dy| (0..factor).any(|dx| m[(ly * factor + dy) * w + lx * factor + dx] >= 0.5));
        if hit {
            1.0
        } else {
            0.0
        }
    }))
}

/// Semantics-preserving optimization switches; all off is the baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptimizationConfig {
    /// Merge LoRA deltas into a cached bundle instead of per call.
    #[serde(default)]
    pub fold_lora: bool,
    /// Memoize text embeddings per (bundle, text) and cross-attention K/V per generation.
    #[serde(default)]
    pub cache_text_embeddings: bool,
    /// Build schedule tables once per (T, steps).
    #[serde(default)]
    pub precompute_schedule: bool,
    /// In-place activations and one shared convolution workspace per generation.
    #[serde(default)]
    pub reuse_buffers: bool,
}

impl OptimizationConfig {
    pub fn all_on() -> Self {
        Self {
            fold_lora: true,
            cache_text_embeddings: true,
            precompute_schedule: true,
            reuse_buffers: true,
        }
    }

    /// Every one of the 16 flag combinations.
    pub fn combinations() -> Vec<Self> {
        (0..16u8)
            .map(|b| Self {
                fold_lora: b & 1 != 0,
                cache_text_embeddings: b & 2 != 0,
                precompute_schedule: b & 4 != 0,
                reuse_buffers: b & 8 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let names = [
            (self.fold_lora, "fold_lora"),
            (self.cache_text_embeddings, "cache_text_embeddings"),
            (self.precompute_schedule, "precompute_schedule"),
            (self.reuse_buffers, "reuse_buffers"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSample {
    pub stage: String,
    pub wall_ms: f64,
    /// Highest tracked live allocation during the stage (0 without a tracker).
    pub peak_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub image: Tensor,
    pub seed: u64,
    /// Denoising iterations run (each one CFG pair of U-Net evaluations).
    pub steps_executed: usize,
    pub unet_evaluations: usize,
    pub stages: Vec<StageSample>,
}

impl GenerationOutput {
    pub fn stage(&self, name: &str) -> Option<&StageSample> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

struct Stages {
    tracker: Option<Arc<AllocTracker>>,
    samples: Vec<StageSample>,
}

impl Stages {
    fn new() -> Self {
        Self {
            tracker: AllocTracker::current(),
            samples: Vec::new(),
        }
    }

    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        if let Some(t) = &self.tracker {
            t.begin_window();
        }
        let start = Instant::now();
        let out = f()?;
        self.samples.push(StageSample {
            stage: name.to_string(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            peak_bytes: self.tracker.as_ref().map_or(0, |t| t.window_peak()),
        });
        Ok(out)
    }
}

struct Plan {
    schedule: Arc<NoiseSchedule>,
    timesteps: Arc<Vec<usize>>,
}

type FoldKey = (u64, String, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Sequential,
    /// Rayon over seeds; sequential when the `parallel` feature is off.
    Parallel,
}

/// Shared, thread-safe generation front end.
pub struct Engine {
    pub schedulers: SchedulerRegistry,
    pub opts: OptimizationConfig,
    text_cache: Mutex<HashMap<(u64, String), Tensor>>,
    plan_cache: Mutex<HashMap<(usize, usize), Arc<Plan>>>,
    fold_cache: Mutex<HashMap<FoldKey, (Arc<LoraAdapter>, Arc<ModelBundle>)>>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(OptimizationConfig::default())
    }
}

impl Engine {
    pub fn new(opts: OptimizationConfig) -> Self {
        Self {
            schedulers: SchedulerRegistry::with_builtins(),
            opts,
            text_cache: Mutex::new(HashMap::new()),
            plan_cache: Mutex::new(HashMap::new()),
            fold_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn clear_caches(&self) {
        self.text_cache.lock().expect("cache poisoned").clear();
        self.plan_cache.lock().expect("cache poisoned").clear();
        self.fold_cache.lock().expect("cache poisoned").clear();
    }

    fn embed(&self, bundle: &ModelBundle, text: &str, tokens: &[u32]) -> Result<Tensor> {
        if !self.opts.cache_text_embeddings {
            return bundle.text_encoder.encode(tokens);
        }
        let key = (bundle.id, text.to_string());
        if let Some(hit) = self.text_cache.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let emb = bundle.text_encoder.encode(tokens)?;
        self.text_cache
            .lock()
            .expect("cache poisoned")
            .insert(key, emb.clone());
        Ok(emb)
    }

    fn plan(&self, train_steps: usize, steps: usize) -> Result<Arc<Plan>> {
        let build = || -> Result<Arc<Plan>> {
            Ok(Arc::new(Plan {
                schedule: Arc::new(NoiseSchedule::new(
                    BetaMode::Linear,
                    train_steps,
                    DEFAULT_BETA_START,
                    DEFAULT_BETA_END,
                )?),
                timesteps: Arc::new(select_timesteps(train_steps, steps)?),
            }))
        };
        if !self.opts.precompute_schedule {
            return build();
        }
        let mut cache = self.plan_cache.lock().expect("cache poisoned");
        if let Some(p) = cache.get(&(train_steps, steps)) {
            return Ok(p.clone());
        }
        let p = build()?;
        cache.insert((train_steps, steps), p.clone());
        Ok(p)
    }

    fn folded(&self, bundle: &ModelBundle, adapter: &Arc<LoraAdapter>, strength: f32) -> Result<Arc<ModelBundle>> {
        let key = (bundle.id, adapter.name.clone(), strength.to_bits());
        let mut cache = self.fold_cache.lock().expect("cache poisoned");
        if let Some((a, b)) = cache.get(&key) {
            if Arc::ptr_eq(a, adapter) {
                return Ok(b.clone());
            }
        }
        let b = Arc::new(fold_lora(bundle, adapter, strength)?);
        cache.insert(key, (adapter.clone(), b.clone()));
        Ok(b)
    }

    /// Runs one generation. Deterministic in (bundle weights, params) when `eta = 0`.
    pub fn generate(&self, bundle: &ModelBundle, params: &PipelineParams) -> Result<GenerationOutput> {
        let factor = bundle.vae.config.downsample_factor;
        params.validate(factor)?;
        let rule = self.schedulers.get(&params.scheduler)?;
        let init = match params.func {
            Func::T2i => None,
            Func::I2i | Func::Edit | Func::Inpaint => {
                let img = params.init_image.as_ref().ok_or(Error::MissingInput("init_image"))?;
                params.check_image(img, "init_image", 3)?;
                Some(img)
            }
        };
        let mask = match params.func {
            Func::Inpaint => {
                let m = params.mask_image.as_ref().ok_or(Error::MissingInput("mask_image"))?;
                params.check_image(m, "mask_image", 1)?;
                Some(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
            }
            _ => None,
        };

        let mut stages = Stages::new();

        let folded;
        let dynamic;
        let (model, delta): (&ModelBundle, Option<&dyn WeightDelta>) = match &params.lora {
            Some(spec) if self.opts.fold_lora => {
                folded = self.folded(bundle, &spec.adapter, spec.strength)?;
                (&folded, None)
            }
            Some(spec) => {
                dynamic = apply_lora(bundle, &spec.adapter, spec.strength)?;
                (bundle, Some(&dynamic))
            }
            None => (bundle, None),
        };

        let control = match &params.controlnet {
            Some(spec) if spec.scale != 0.0 => {
                spec.adapter.check_compatible(&model.unet)?;
                if spec.adapter.config.conditioning_channels != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "controlnet `{}` expects {} condition channels; only 1 is supported",
                        spec.adapter.name, spec.adapter.config.conditioning_channels
                    )));
                }
                let source = match (&spec.condition_image, params.func, init) {
                    (Some(img), _, _) => img,
                    (None, Func::Edit, Some(img)) => img,
                    _ => return Err(Error::MissingInput("condition_image")),
                };
                params.check_image(source, "condition_image", 3)?;
                let cond = stages.run("preprocess", || {
                    run_preprocessor(spec.preprocessor, source, spec.low_threshold, spec.high_threshold)
                })?;
                Some((spec.adapter.as_ref(), spec.scale, cond.to_tensor()))
            }
            _ => None,
        };

        let max_tokens = bundle.text_encoder.config.max_tokens;
        let (cond_tokens, uncond_tokens) = stages.run("tokenize", || {
            Ok((
                tokenize(&params.prompt, max_tokens),
                tokenize(&params.negative_prompt, max_tokens),
            ))
        })?;
        let (cond_emb, uncond_emb) = stages.run("text_encode", || {
            let c = self.embed(bundle, &params.prompt, &cond_tokens)?;
            let u = if params.conditional_only {
                None
            } else {
                Some(self.embed(bundle, &params.negative_prompt, &uncond_tokens)?)
            };
            Ok((c, u))
        })?;

        let plan = self.plan(model.unet.config.train_timesteps, params.steps)?;
        let lc = model.vae.config.latent_channels;
        let (lh, lw) = (params.height / factor, params.width / factor);
        let root = Rng::new(params.seed);
        let noise = root.split_named("latent").gaussian_tensor(&[lc, lh, lw]);
        let mut step_rng = root.split_named("scheduler");

        let init_latent = match init {
            Some(img) => Some(stages.run("vae_encode", || model.vae.encode_with(img, self.opts.reuse_buffers))?),
            None => None,
        };
        let mut state = SchedulerState::new(plan.schedule.clone(), plan.timesteps.clone(), params.eta as f64)?;
        let mut latent = match (params.func, &init_latent) {
            (Func::I2i | Func::Edit, Some(z0)) => {
                let run = (params.strength as f64 * params.steps as f64).round() as usize;
                let start = params.steps - run.min(params.steps);
                state.skip(start);
                match state.current() {
                    Some(t) => add_noise(z0, &noise, t, &plan.schedule)?,
                    None => z0.clone(),
                }
            }
            _ => noise.clone(),
        };
        let mask_latent = match &mask {
            Some(m) => Some(latent_mask(m, factor)?),
            None => None,
        };

        let mut steps_executed = 0;
        let mut unet_evaluations = 0;
        latent = stages.run("unet_loop", || {
            let mut exec = Exec {
                delta,
                reuse_buffers: self.opts.reuse_buffers,
                scratch: Scratch::new(),
                kv_cache: self.opts.cache_text_embeddings.then(KvCache::default),
                branch: 0,
            };
            let mut latent = latent;
            while let Some(t) = state.current() {
                let predict = |emb: &Tensor, branch: u8, exec: &mut Exec| -> Result<Tensor> {
                    exec.branch = branch;
                    let residuals = match &control {
                        Some((adapter, scale, cond)) => {
                            Some(conditioning_scale(adapter.forward(&latent, t, emb, cond, exec)?, *scale)?)
                        }
                        None => None,
                    };
                    model.unet.forward(&latent, t, emb, residuals.as_deref(), exec)
                };
                let eps_c = predict(&cond_emb, 1, &mut exec)?;
                unet_evaluations += 1;
                let eps = match &uncond_emb {
                    Some(u) => {
                        let eps_u = predict(u, 0, &mut exec)?;
                        unet_evaluations += 1;
                        cfg_combine(&eps_u, &eps_c, params.guidance_scale)?
                    }
                    None => eps_c,
                };
                let t_prev = state.next_timestep();
                latent = state.step(&*rule, &latent, &eps, &mut step_rng)?;
                steps_executed += 1;
                if let (Some(ml), Some(z0)) = (&mask_latent, &init_latent) {
                    let known = match t_prev {
                        Some(tp) => add_noise(z0, &noise, tp, &plan.schedule)?,
                        None => z0.clone(),
                    };
                    latent = select(ml, &latent, &known)?;
                }
            }
            Ok(latent)
        })?;

        let mut image = stages.run("vae_decode", || model.vae.decode_with(&latent, self.opts.reuse_buffers))?;
        if let (Some(m), Some(init)) = (&mask, init) {
            image = select(m, &image, init)?;
        }
        Ok(GenerationOutput {
            image,
            seed: params.seed,
            steps_executed,
            unet_evaluations,
            stages: stages.samples,
        })
    }

    /// `n` images from seeds `seed, seed + 1, ..., seed + n - 1`.
    pub fn generate_batch(
        &self,
        bundle: &ModelBundle,
        params: &PipelineParams,
        n: usize,
        mode: BatchMode,
    ) -> Result<Vec<GenerationOutput>> {
        let one = |i: usize| {
            let mut p = params.clone();
            p.seed = params.seed.wrapping_add(i as u64);
            self.generate(bundle, &p)
        };
        match mode {
            BatchMode::Sequential => (0..n).map(one).collect(),
            BatchMode::Parallel => parallel_map(n, one),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).map(f).collect()
}
