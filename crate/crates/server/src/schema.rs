//! Request and response bodies of the public API, with strict validation.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use diffserve_core::pipelines::{Func, DEFAULT_GUIDANCE, DEFAULT_SCHEDULER, DEFAULT_STEPS, DEFAULT_STRENGTH};
use diffserve_core::preprocess::{Preprocessor, DEFAULT_HIGH_THRESHOLD, DEFAULT_LOW_THRESHOLD};
use diffserve_core::schedulers::SchedulerRegistry;

use crate::error::ApiError;

/// Numeric bounds enforced on every request.
#[derive(Debug, Clone, PartialEq)]
pub struct Limits {
    pub max_image_num: usize,
    /// Sides must be multiples of this: the VAE factor (8) times the U-Net's
    /// total downsampling (2) for the toy models.
    pub side_multiple: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub max_steps: usize,
    pub max_guidance: f32,
    pub max_controlnet_scale: f32,
    pub schedulers: Vec<String>,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_image_num: 4,
            side_multiple: 16,
            min_side: 32,
            max_side: 512,
            max_steps: 1000,
            max_guidance: 50.0,
            max_controlnet_scale: 2.0,
            schedulers: SchedulerRegistry::with_builtins().names(),
        }
    }
}

pub const REQUEST_FIELDS: [&str; 24] = [
    "task_id",
    "prompt",
    "negative_prompt",
    "func_name",
    "steps",
    "image_num",
    "width",
    "height",
    "use_base64",
    "seed",
    "init_image",
    "mask_image",
    "condition_image",
    "model_name",
    "lora_name",
    "lora_strength",
    "controlnet_name",
    "controlnet_scale",
    "preprocessor",
    "low_threshold",
    "high_threshold",
    "scheduler",
    "guidance_scale",
    "strength",
];

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_image_num() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub task_id: String,
    pub prompt: String,
    #[serde(default)]
    pub negative_prompt: String,
    pub func_name: Func,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_image_num")]
    pub image_num: usize,
    /// Defaults to the model's registry size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default = "default_true")]
    pub use_base64: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_image: Option<String>,
    /// Defaults to the first registry entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_strength: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlnet_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlnet_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f32>,
}

impl GenerationRequest {
    /// A text-to-image request with every optional field unset.
    pub fn t2i(task_id: &str, prompt: &str) -> Self {
        Self {
            task_id: task_id.into(),
            prompt: prompt.into(),
            negative_prompt: String::new(),
            func_name: Func::T2i,
            steps: DEFAULT_STEPS,
            image_num: 1,
            width: None,
            height: None,
            use_base64: true,
            seed: None,
            init_image: None,
            mask_image: None,
            condition_image: None,
            model_name: None,
            lora_name: None,
            lora_strength: None,
            controlnet_name: None,
            controlnet_scale: None,
            preprocessor: None,
            low_threshold: None,
            high_threshold: None,
            scheduler: None,
            guidance_scale: None,
            strength: None,
        }
    }

    /// Parses and validates a request body: 400 for schema and bound
    /// violations, then 422 when the function's required images are missing.
    pub fn parse(body: &[u8], limits: &Limits) -> Result<Self, ApiError> {
        let req: Self = parse_strict(body, &REQUEST_FIELDS)?;
        req.validate(limits)?;
        Ok(req)
    }

    pub fn validate(&self, limits: &Limits) -> Result<(), ApiError> {
        let bad = |field: &str, msg: String| Err(ApiError::bad_request(format!("{field}: {msg}")));
        if self.steps == 0 || self.steps > limits.max_steps {
            return bad("steps", format!("must be in [1, {}], got {}", limits.max_steps, self.steps));
        }
        if self.image_num == 0 || self.image_num > limits.max_image_num {
            return bad(
                "image_num",
                format!("must be in [1, {}], got {}", limits.max_image_num, self.image_num),
            );
        }
        for (field, side) in [("width", self.width), ("height", self.height)] {
            if let Some(v) = side {
                if v < limits.min_side || v > limits.max_side || v % limits.side_multiple != 0 {
                    return bad(
                        field,
                        format!(
                            "must be a multiple of {} in [{}, {}], got {v}",
                            limits.side_multiple, limits.min_side, limits.max_side
                        ),
                    );
                }
            }
        }
        check_range("guidance_scale", self.guidance_scale, 0.0, limits.max_guidance)?;
        check_range("strength", self.strength, 0.0, 1.0)?;
        check_range("lora_strength", self.lora_strength, 0.0, 1.0)?;
        check_range("controlnet_scale", self.controlnet_scale, 0.0, limits.max_controlnet_scale)?;
        check_range("low_threshold", self.low_threshold, 0.0, 1.0)?;
        check_range("high_threshold", self.high_threshold, 0.0, 1.0)?;
        if self.low_threshold() > self.high_threshold() {
            return bad(
                "low_threshold",
                format!("must not exceed high_threshold ({} > {})", self.low_threshold(), self.high_threshold()),
            );
        }
        if let Some(p) = &self.preprocessor {
            if p.parse::<Preprocessor>().is_err() {
                return bad("preprocessor", format!("unknown `{p}` (known: canny, depth, none)"));
            }
        }
        if let Some(s) = &self.scheduler {
            if !limits.schedulers.iter().any(|k| k == s) {
                return bad("scheduler", format!("unknown `{s}` (known: {})", limits.schedulers.join(", ")));
            }
        }
        if self.lora_strength.is_some() && self.lora_name.is_none() {
            return bad("lora_strength", "given without lora_name".into());
        }
        if self.controlnet_scale.is_some() && self.controlnet_name.is_none() {
            return bad("controlnet_scale", "given without controlnet_name".into());
        }
        for (field, v) in [
            ("model_name", &self.model_name),
            ("lora_name", &self.lora_name),
            ("controlnet_name", &self.controlnet_name),
        ] {
            if v.as_deref() == Some("") {
                return bad(field, "must not be empty".into());
            }
        }

        let needs_init = self.func_name != Func::T2i;
        if needs_init && self.init_image.is_none() {
            return Err(ApiError::unprocessable(format!(
                "init_image is required for func_name `{}`",
                self.func_name.as_str()
            )));
        }
        if self.func_name == Func::Inpaint && self.mask_image.is_none() {
            return Err(ApiError::unprocessable("mask_image is required for func_name `inpaint`"));
        }
        if self.controlnet_name.is_some() && self.condition_image.is_none() && self.func_name != Func::Edit {
            return Err(ApiError::unprocessable(
                "condition_image is required with controlnet_name (edit falls back to init_image)",
            ));
        }
        Ok(())
    }

    pub fn lora_strength(&self) -> f32 {
        self.lora_strength.unwrap_or(1.0)
    }

    pub fn controlnet_scale(&self) -> f32 {
        self.controlnet_scale.unwrap_or(1.0)
    }

    pub fn preprocessor(&self) -> Preprocessor {
        self.preprocessor
            .as_deref()
            .and_then(|p| p.parse().ok())
            .unwrap_or(Preprocessor::Canny)
    }

    pub fn low_threshold(&self) -> f32 {
        self.low_threshold.unwrap_or(DEFAULT_LOW_THRESHOLD)
    }

    pub fn high_threshold(&self) -> f32 {
        self.high_threshold.unwrap_or(DEFAULT_HIGH_THRESHOLD)
    }

    pub fn scheduler(&self) -> &str {
        self.scheduler.as_deref().unwrap_or(DEFAULT_SCHEDULER)
    }

    pub fn guidance_scale(&self) -> f32 {
        self.guidance_scale.unwrap_or(DEFAULT_GUIDANCE)
    }

    pub fn strength(&self) -> f32 {
        self.strength.unwrap_or(DEFAULT_STRENGTH)
    }
}

fn check_range(field: &str, v: Option<f32>, lo: f32, hi: f32) -> Result<(), ApiError> {
    match v {
        Some(x) if !(x >= lo && x <= hi) => Err(ApiError::bad_request(format!(
            "{field}: must be in [{lo}, {hi}], got {x}"
        ))),
        _ => Ok(()),
    }
}

/// JSON object with no keys outside `allowed`, deserialized with the failing
/// field named in any error.
pub fn parse_strict<T: DeserializeOwned>(body: &[u8], allowed: &[&str]) -> Result<T, ApiError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(ApiError::bad_request("request body must be a JSON object"));
    };
    let unknown = unknown_fields(&map, allowed);
    if !unknown.is_empty() {
        return Err(ApiError::bad_request(format!("unknown field(s): {}", unknown.join(", "))));
    }
    serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        if path == "." {
            ApiError::bad_request(inner)
        } else {
            ApiError::bad_request(format!("{path}: {inner}"))
        }
    })
}

pub fn unknown_fields(map: &Map<String, Value>, allowed: &[&str]) -> Vec<String> {
    map.keys().filter(|k| !allowed.contains(&k.as_str())).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub task_id: String,
    pub success: bool,
    /// Base64 PNGs, or file paths when the request set `use_base64: false`.
    pub images: Vec<String>,
    pub seed: Option<u64>,
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResult {
    pub fn failure(task_id: &str, seed: Option<u64>, elapsed_ms: f64, error: &str) -> Self {
        Self {
            task_id: task_id.to_string(),
            success: false,
            images: Vec::new(),
            seed,
            elapsed_ms,
            error: Some(error.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Done | TaskStatus::Failed)
    }

    /// Allowed moves: queued -> running -> done | failed, and queued -> failed.
    pub fn can_become(self, next: TaskStatus) -> bool {
        matches!(
            (self, next),
            (TaskStatus::Queued, TaskStatus::Running)
                | (TaskStatus::Queued, TaskStatus::Failed)
                | (TaskStatus::Running, TaskStatus::Done)
                | (TaskStatus::Running, TaskStatus::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Server-assigned id used in `/tasks/{id}`.
    pub id: String,
    /// The client's id, echoed.
    pub task_id: String,
    pub status: TaskStatus,
    /// Unix time in milliseconds.
    pub submitted_at: u64,
    pub finished_at: Option<u64>,
    pub result: Option<GenerationResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccepted {
    pub id: String,
    pub task_id: String,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: String,
    pub mode: String,
    pub queue_depth: usize,
    pub in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<Vec<crate::cluster::WorkerRecord>>,
}

pub const PREPROCESS_FIELDS: [&str; 4] = ["image", "preprocessor", "low_threshold", "high_threshold"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRequest {
    /// Base64 RGB PNG.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_threshold: Option<f32>,
}

impl PreprocessRequest {
    pub fn parse(body: &[u8]) -> Result<Self, ApiError> {
        let req: Self = parse_strict(body, &PREPROCESS_FIELDS)?;
        check_range("low_threshold", req.low_threshold, 0.0, 1.0)?;
        check_range("high_threshold", req.high_threshold, 0.0, 1.0)?;
        let (lo, hi) = req.thresholds();
        if lo > hi {
            return Err(ApiError::bad_request(format!(
                "low_threshold: must not exceed high_threshold ({lo} > {hi})"
            )));
        }
        req.kind()?;
        Ok(req)
    }

    pub fn kind(&self) -> Result<Preprocessor, ApiError> {
        match &self.preprocessor {
            None => Ok(Preprocessor::Canny),
            Some(p) => p
                .parse()
                .map_err(|_| ApiError::bad_request(format!("preprocessor: unknown `{p}` (known: canny, depth, none)"))),
        }
    }

    pub fn thresholds(&self) -> (f32, f32) {
        (
            self.low_threshold.unwrap_or(DEFAULT_LOW_THRESHOLD),
            self.high_threshold.unwrap_or(DEFAULT_HIGH_THRESHOLD),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessResult {
    /// Base64 PNG of the condition map (three equal channels).
    pub image: String,
    pub preprocessor: String,
    pub width: usize,
    pub height: usize,
}
