//! What executes a validated request: the local engine, a fixed-latency stub,
//! or (in router mode) a remote worker.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use diffserve_core::adapters::{ControlNetAdapter, LoraAdapter};
use diffserve_core::models::{ModelBundle, Registry, RegistryEntry};
use diffserve_core::pipelines::{
    from_png_base64, to_png_base64, to_png_bytes, BatchMode, ControlSpec, Engine, Func, LoraSpec,
    OptimizationConfig, PipelineParams,
};
use diffserve_core::preprocess::rgb_to_gray;
use diffserve_core::Tensor;

use crate::cluster::WorkerRecord;
use crate::error::ApiError;
use crate::schema::GenerationRequest;

/// Encoded images (base64 PNGs or file paths), one per requested image.
pub type JobFuture = Pin<Box<dyn Future<Output = Result<Vec<String>, ApiError>> + Send>>;

/// Where `use_base64: false` results are written: `{dir}/{stem}-{i}.png`.
#[derive(Debug, Clone)]
pub struct OutputTarget {
    pub dir: PathBuf,
    pub stem: String,
}

pub trait Backend: Send + Sync + 'static {
    fn registry(&self) -> Result<Registry, ApiError>;

    /// Cheap checks (names, images) done before admission, plus the work to
    /// run once admitted. `req.seed` is always set.
    fn prepare(&self, req: &GenerationRequest, out: OutputTarget) -> Result<JobFuture, ApiError>;

    /// Worker table, for backends that front a pool.
    fn workers(&self) -> Option<Vec<WorkerRecord>> {
        None
    }
}

/// A request checked against a registry, with its images decoded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub entry: RegistryEntry,
    pub width: usize,
    pub height: usize,
    pub init_image: Option<Tensor>,
    pub mask_image: Option<Tensor>,
    pub condition_image: Option<Tensor>,
}

/// 404 for unknown models and for adapters the model does not list; 400 for
/// images that do not decode or do not match the output size. Images the
/// function does not use are ignored.
pub fn resolve(req: &GenerationRequest, registry: &Registry) -> Result<Resolved, ApiError> {
    let entry = match &req.model_name {
        Some(name) => registry.get(name)?.clone(),
        None => registry
            .models
            .first()
            .cloned()
            .ok_or_else(|| ApiError::internal("model registry is empty"))?,
    };
    for name in [&req.lora_name, &req.controlnet_name].into_iter().flatten() {
        if !entry.adapters.iter().any(|a| a == name) {
            return Err(ApiError::not_found(format!(
                "adapter `{name}` is not available for model `{}` (available: {})",
                entry.model_name,
                entry.adapters.join(", ")
            )));
        }
    }
    let width = req.width.unwrap_or(entry.default_width);
    let height = req.height.unwrap_or(entry.default_height);
    let decode = |field: &str, b64: &Option<String>| -> Result<Option<Tensor>, ApiError> {
        let Some(b64) = b64 else { return Ok(None) };
        let img = from_png_base64(b64).map_err(|e| ApiError::bad_request(format!("{field}: {e}")))?;
        if img.shape()[1..] != [height, width] {
            return Err(ApiError::bad_request(format!(
                "{field}: image is {}x{}, request is {width}x{height}",
                img.shape()[2],
                img.shape()[1]
            )));
        }
        Ok(Some(img))
    };
    let init_image = if req.func_name == Func::T2i {
        None
    } else {
        decode("init_image", &req.init_image)?
    };
    let mask_image = if req.func_name == Func::Inpaint {
        decode("mask_image", &req.mask_image)?
            .map(|m| rgb_to_gray(&m).map(|g| g.to_tensor()))
            .transpose()?
    } else {
        None
    };
    let condition_image = if req.controlnet_name.is_some() {
        decode("condition_image", &req.condition_image)?
    } else {
        None
    };
    Ok(Resolved {
        entry,
        width,
        height,
        init_image,
        mask_image,
        condition_image,
    })
}

/// Generation on this machine, with bundles and adapters loaded on first use
/// from a models directory laid out by `diffserve init`.
pub struct LocalBackend {
    inner: Arc<Local>,
}

struct Local {
    models_dir: PathBuf,
    registry: Registry,
    engine: Engine,
    batch: BatchMode,
    bundles: Mutex<HashMap<String, Arc<ModelBundle>>>,
    loras: Mutex<HashMap<String, Arc<LoraAdapter>>>,
    controlnets: Mutex<HashMap<String, Arc<ControlNetAdapter>>>,
}

pub const REGISTRY_FILE: &str = "registry.json";
pub const ADAPTER_DIR: &str = "adapters";

impl LocalBackend {
    pub fn open(models_dir: &Path, opts: OptimizationConfig) -> diffserve_core::Result<Self> {
        let registry = Registry::load(&models_dir.join(REGISTRY_FILE))?;
        Ok(Self {
            inner: Arc::new(Local {
                models_dir: models_dir.to_path_buf(),
                registry,
                engine: Engine::new(opts),
                batch: BatchMode::Parallel,
                bundles: Mutex::default(),
                loras: Mutex::default(),
                controlnets: Mutex::default(),
            }),
        })
    }

    /// Loads a model now rather than on its first request.
    pub fn preload(&self, model: &str) -> diffserve_core::Result<()> {
        self.inner.bundle(model).map(|_| ())
    }
}

impl Local {
    fn bundle(&self, name: &str) -> diffserve_core::Result<Arc<ModelBundle>> {
        let mut cache = self.bundles.lock().unwrap();
        if let Some(b) = cache.get(name) {
            return Ok(Arc::clone(b));
        }
        self.registry.get(name)?;
        let b = Arc::new(ModelBundle::load(&self.models_dir.join(name))?);
        cache.insert(name.to_string(), Arc::clone(&b));
        Ok(b)
    }

    fn adapter_path(&self, name: &str) -> PathBuf {
        self.models_dir.join(ADAPTER_DIR).join(format!("{name}.json"))
    }

    fn lora(&self, name: &str) -> diffserve_core::Result<Arc<LoraAdapter>> {
        let mut cache = self.loras.lock().unwrap();
        if let Some(a) = cache.get(name) {
            return Ok(Arc::clone(a));
        }
        let a = Arc::new(LoraAdapter::load(&self.adapter_path(name))?);
        cache.insert(name.to_string(), Arc::clone(&a));
        Ok(a)
    }

    fn controlnet(&self, name: &str) -> diffserve_core::Result<Arc<ControlNetAdapter>> {
        let mut cache = self.controlnets.lock().unwrap();
        if let Some(a) = cache.get(name) {
            return Ok(Arc::clone(a));
        }
        let a = Arc::new(ControlNetAdapter::load(&self.adapter_path(name))?);
        cache.insert(name.to_string(), Arc::clone(&a));
        Ok(a)
    }

    fn run(&self, req: &GenerationRequest, r: Resolved, out: &OutputTarget) -> Result<Vec<String>, ApiError> {
        let bundle = self.bundle(&r.entry.model_name)?;
        let seed = req.seed.ok_or_else(|| ApiError::internal("seed not assigned"))?;
        let mut p = PipelineParams::new(req.func_name, &req.prompt, r.width, r.height, seed);
        p.negative_prompt = req.negative_prompt.clone();
        p.steps = req.steps;
        p.guidance_scale = req.guidance_scale();
        p.strength = req.strength();
        p.scheduler = req.scheduler().to_string();
        p.init_image = r.init_image;
        p.mask_image = r.mask_image;
        if let Some(name) = &req.lora_name {
            p.lora = Some(LoraSpec {
                adapter: self.lora(name)?,
                strength: req.lora_strength(),
            });
        }
        if let Some(name) = &req.controlnet_name {
            let mut c = ControlSpec::new(self.controlnet(name)?, req.preprocessor());
            c.scale = req.controlnet_scale();
            c.condition_image = r.condition_image;
            c.low_threshold = req.low_threshold();
            c.high_threshold = req.high_threshold();
            p.controlnet = Some(c);
        }
        let outputs = self.engine.generate_batch(&bundle, &p, req.image_num, self.batch)?;
        let mut images = Vec::with_capacity(outputs.len());
        for (i, o) in outputs.iter().enumerate() {
            images.push(if req.use_base64 {
                to_png_base64(&o.image)?
            } else {
                write_png(&o.image, out, i)?
            });
        }
        Ok(images)
    }
}

fn write_png(image: &Tensor, out: &OutputTarget, index: usize) -> Result<String, ApiError> {
    let bytes = to_png_bytes(image)?;
    std::fs::create_dir_all(&out.dir).map_err(|e| ApiError::internal(format!("output dir: {e}")))?;
    let path = out.dir.join(format!("{}-{index}.png", out.stem));
    std::fs::write(&path, bytes).map_err(|e| ApiError::internal(format!("writing {}: {e}", path.display())))?;
    Ok(path.display().to_string())
}

impl Backend for LocalBackend {
    fn registry(&self) -> Result<Registry, ApiError> {
        Ok(self.inner.registry.clone())
    }

    fn prepare(&self, req: &GenerationRequest, out: OutputTarget) -> Result<JobFuture, ApiError> {
        let resolved = resolve(req, &self.inner.registry)?;
        let inner = Arc::clone(&self.inner);
        let req = req.clone();
        Ok(Box::pin(async move {
            tokio::task::spawn_blocking(move || inner.run(&req, resolved, &out))
                .await
                .map_err(|e| ApiError::internal(format!("generation task panicked: {e}")))?
        }))
    }
}

/// Counters a stub exposes to tests.
#[derive(Debug, Default)]
pub struct StubStats {
    pub running: AtomicUsize,
    pub max_running: AtomicUsize,
    pub completed: AtomicUsize,
}

/// Fixed-latency stand-in for the engine. Each "image" is the string
/// `stub:{name}:{task_id}:{i}`, so callers can tell who served a request.
pub struct StubBackend {
    name: String,
    latency: Duration,
    registry: Registry,
    stats: Arc<StubStats>,
}

impl StubBackend {
    pub fn new(name: &str, latency: Duration) -> Self {
        Self {
            name: name.to_string(),
            latency,
            registry: Registry::toy_zoo(0),
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> Arc<StubStats> {
        Arc::clone(&self.stats)
    }
}

impl Backend for StubBackend {
    fn registry(&self) -> Result<Registry, ApiError> {
        Ok(self.registry.clone())
    }

    fn prepare(&self, req: &GenerationRequest, _out: OutputTarget) -> Result<JobFuture, ApiError> {
        resolve(req, &self.registry)?;
        let stats = Arc::clone(&self.stats);
        let latency = self.latency;
        let images: Vec<String> = (0..req.image_num)
            .map(|i| format!("stub:{}:{}:{i}", self.name, req.task_id))
            .collect();
        Ok(Box::pin(async move {
            let now = stats.running.fetch_add(1, Ordering::AcqRel) + 1;
            stats.max_running.fetch_max(now, Ordering::AcqRel);
            tokio::time::sleep(latency).await;
            stats.running.fetch_sub(1, Ordering::AcqRel);
            stats.completed.fetch_add(1, Ordering::AcqRel);
            Ok(images)
        }))
    }
}
