//! Latency and tracked-allocation benchmarks of the text-to-image path under
//! different optimization switches.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::models::weights_checksum;
use crate::pipelines::{to_png_bytes, Engine, Func, LoraSpec, PipelineParams};
use crate::tensor::AllocTracker;

pub use crate::pipelines::OptimizationConfig;

pub const DEFAULT_REPEATS: usize = 20;
pub const STAGES: [&str; 5] = ["tokenize", "text_encode", "unet_loop", "vae_decode", "png_encode"];

/// Published reference deployment numbers, shown for context only.
pub const REFERENCE_LATENCY_S: (f64, f64) = (6.34, 2.96);
pub const REFERENCE_MEMORY_GB: (f64, f64) = (6.94, 5.56);

/// What was run, so two reports can be checked for comparability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub bundle: String,
    pub prompt: String,
    pub negative_prompt: String,
    pub steps: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub guidance_scale: f32,
    pub lora: Option<(String, f32)>,
}

impl Workload {
    fn of(bundle: &ModelBundle, p: &PipelineParams) -> Self {
        Self {
            bundle: bundle.name.clone(),
            prompt: p.prompt.clone(),
            negative_prompt: p.negative_prompt.clone(),
            steps: p.steps,
            width: p.width,
            height: p.height,
            seed: p.seed,
            guidance_scale: p.guidance_scale,
            lora: p.lora.as_ref().map(|l| (l.adapter.name.clone(), l.strength)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub peak_alloc_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub config: OptimizationConfig,
    pub workload: Workload,
    pub repeats: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub per_stage: Vec<StageTiming>,
    pub peak_alloc_bytes: usize,
    /// Hash of the generated image, to confirm every configuration agrees.
    pub image_checksum: String,
}

impl BenchReport {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.per_stage.iter().find(|s| s.stage == name)
    }
}

/// Mean and sample standard deviation; a single sample has std 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The fixed comparison workload: 25 steps at 64x64 with a LoRA attached.
pub fn reference_params(lora: Arc<LoraAdapter>) -> PipelineParams {
    let mut p = PipelineParams::new(Func::T2i, "romantic starry sky", 64, 64, 2024);
    p.negative_prompt = "noise, low-quality".into();
    p.lora = Some(LoraSpec {
        adapter: lora,
        strength: 1.0,
    });
    p
}

/// Runs text-to-image `repeats` times after one excluded warm-up. Each run gets
/// a fresh allocation tracker so peaks cover that generation's working set.
pub fn run_benchmark(
    bundle: &ModelBundle,
    params: &PipelineParams,
    config: OptimizationConfig,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let engine = Engine::new(config);
    engine.generate(bundle, params)?;

    let mut totals = Vec::with_capacity(repeats);
    let mut stage_ms: Vec<Vec<f64>> = vec![Vec::with_capacity(repeats); STAGES.len()];
    let mut stage_peak = [0usize; STAGES.len()];
    let mut peak = 0;
    let mut checksum = String::new();
    for _ in 0..repeats {
        let tracker = AllocTracker::new();
        let _scope = AllocTracker::enter(&tracker);
        let start = Instant::now();
        let out = engine.generate(bundle, params)?;
        tracker.begin_window();
        let png_start = Instant::now();
        let png = to_png_bytes(&out.image)?;
        let png_ms = png_start.elapsed().as_secs_f64() * 1e3;
        totals.push(start.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(tracker.peak());

        for (i, name) in STAGES.iter().enumerate() {
            let (ms, bytes) = if *name == "png_encode" {
                (png_ms, tracker.window_peak())
            } else {
                out.stage(name).map_or((0.0, 0), |s| (s.wall_ms, s.peak_bytes))
            };
            stage_ms[i].push(ms);
            stage_peak[i] = stage_peak[i].max(bytes);
        }
        checksum = weights_checksum(&png);
    }
    let (mean_ms, std_ms) = mean_std(&totals);
    let per_stage = STAGES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (mean_ms, std_ms) = mean_std(&stage_ms[i]);
            StageTiming {
                stage: name.to_string(),
                mean_ms,
                std_ms,
                peak_alloc_bytes: stage_peak[i],
            }
        })
        .collect();
    Ok(BenchReport {
        label: config.label(),
        config,
        workload: Workload::of(bundle, params),
        repeats,
        mean_ms,
        std_ms,
        per_stage,
        peak_alloc_bytes: peak,
        image_checksum: checksum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: BenchReport,
    pub optimized: BenchReport,
    pub speedup: f64,
    pub memory_ratio: f64,
    pub identical_images: bool,
}

/// Side-by-side time and memory for two runs of the same workload.
pub fn compare_report(baseline: &BenchReport, optimized: &BenchReport) -> Result<Comparison> {
    if baseline.workload != optimized.workload {
        return Err(Error::InvalidArgument(format!(
            "reports cover different workloads: {:?} vs {:?}",
            baseline.workload, optimized.workload
        )));
    }
    Ok(Comparison {
        baseline: baseline.clone(),
        optimized: optimized.clone(),
        speedup: baseline.mean_ms / optimized.mean_ms,
        memory_ratio: optimized.peak_alloc_bytes as f64 / baseline.peak_alloc_bytes.max(1) as f64,
        identical_images: baseline.image_checksum == optimized.image_checksum,
    })
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let (b, o) = (&self.baseline, &self.optimized);
        let mib = |x: usize| x as f64 / (1024.0 * 1024.0);
        let mut s = String::new();
        let _ = writeln!(s, "columns: A = {}, B = {}", b.label, o.label);
        let _ = writeln!(s, "{:<28}{:>16}{:>16}", "", "A", "B");
        let _ = writeln!(s, "{:<28}{:>16.2}{:>16.2}", "Inference time (ms)", b.mean_ms, o.mean_ms);
        let _ = writeln!(s, "{:<28}{:>16.2}{:>16.2}", "  std (ms)", b.std_ms, o.std_ms);
        let _ = writeln!(
            s,
            "{:<28}{:>16.3}{:>16.3}",
            "Peak tracked alloc (MiB)",
            mib(b.peak_alloc_bytes),
            mib(o.peak_alloc_bytes)
        );
        for (bs, os) in b.per_stage.iter().zip(&o.per_stage) {
            let _ = writeln!(s, "{:<28}{:>16.3}{:>16.3}", format!("  {} (ms)", bs.stage), bs.mean_ms, os.mean_ms);
        }
        let _ = writeln!(
            s,
            "speedup {:.2}x, memory ratio {:.3}, images identical: {}  ({} repeats, warm-up excluded)",
            self.speedup, self.memory_ratio, self.identical_images, b.repeats
        );
        let (l0, l1) = REFERENCE_LATENCY_S;
        let (m0, m1) = REFERENCE_MEMORY_GB;
        let _ = writeln!(
            s,
            "reference row (published GPU deployment, not reproducible here): {l0:.2} s -> {l1:.2} s ({:.2}x), {m0:.2} GB -> {m1:.2} GB",
            l0 / l1
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str, mean_ms: f64, peak: usize) -> BenchReport {
        BenchReport {
            label: label.into(),
            config: OptimizationConfig::default(),
            workload: Workload {
                bundle: "toy".into(),
                prompt: "p".into(),
                negative_prompt: String::new(),
                steps: 25,
                width: 64,
                height: 64,
                seed: 1,
                guidance_scale: 7.5,
                lora: None,
            },
            repeats: 20,
            mean_ms,
            std_ms: 0.0,
            per_stage: Vec::new(),
            peak_alloc_bytes: peak,
            image_checksum: "x".into(),
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let c = compare_report(&report("baseline", 10.0, 100), &report("opt", 5.0, 80)).unwrap();
        assert_eq!(c.speedup, 2.0);
        assert!((c.memory_ratio - 0.8).abs() < 1e-12);
        assert!(c.render_table().contains("not reproducible here"));
        assert!(c.to_json().unwrap().contains("\"speedup\": 2.0"));
    }

    #[test]
    fn mismatched_workloads_rejected() {
        let mut o = report("opt", 5.0, 80);
        o.workload.steps = 10;
        assert!(compare_report(&report("b", 10.0, 100), &o).is_err());
    }

    #[test]
    fn single_sample_has_zero_std() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
