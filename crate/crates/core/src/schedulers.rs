//! Noise schedules, DDIM / DDPM update rules and a by-name scheduler registry.

use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{unknown, Error, Result};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Linear,
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub mode: BetaMode,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(mode: BetaMode, train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if train_steps < 2 {
            return Err(Error::InvalidArgument("need at least 2 training steps".into()));
        }
        let last = (train_steps - 1) as f64;
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| {
                let f = i as f64 / last;
                match mode {
                    BetaMode::Linear => beta_start + f * (beta_end - beta_start),
                    BetaMode::ScaledLinear => {
                        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
                        (s + f * (e - s)).powi(2)
                    }
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            mode,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn standard() -> Self {
        Self::new(BetaMode::Linear, DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar` at `t`, with `None` (before the first step) meaning 1.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.train_steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {})",
                self.train_steps()
            )));
        }
        Ok(())
    }
}

/// Forward process: `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
pub fn add_noise(x0: &Tensor, noise: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!(
            "add_noise: x0 {:?} vs noise {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    let ab = schedule.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| (a * x as f64 + b * n as f64) as f32)
        .collect();
    Tensor::new(x0.shape(), data)
}

/// Trailing-aligned, evenly strided timesteps: `T-1, T-1-k, ...` with `k = T / steps`.
pub fn select_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::InvalidArgument(format!(
            "steps must be in [1, {train_steps}], got {steps}"
        )));
    }
    let stride = train_steps / steps;
    Ok((0..steps).map(|i| train_steps - 1 - i * stride).collect())
}

fn check_pair(x_t: &Tensor, eps: &Tensor) -> Result<()> {
    if x_t.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "sample {:?} vs noise prediction {:?}",
            x_t.shape(),
            eps.shape()
        )));
    }
    Ok(())
}

fn check_order(schedule: &NoiseSchedule, t: usize, t_prev: Option<usize>) -> Result<()> {
    schedule.check_t(t)?;
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::InvalidArgument(format!(
                "timesteps must decrease: t={t}, t_prev={p}"
            )));
        }
    }
    Ok(())
}

/// DDIM update from `t` to `t_prev` (`None` = final step, alpha_bar = 1).
/// With `eta > 0`, gaussian noise with the DDIM variance is drawn from `rng`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_pair(x_t, eps)?;
    check_order(schedule, t, t_prev)?;
    let ab_t = schedule.alpha_bars[t];
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let sa_prev = ab_prev.sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = Vec::with_capacity(x_t.len());
    for (&x, &e) in x_t.data().iter().zip(eps.data()) {
        let (x, e) = (x as f64, e as f64);
        let x0 = (x - sb_t * e) / sa_t;
        let mut v = sa_prev * x0 + dir * e;
        if sigma > 0.0 {
            v += sigma * rng.gaussian();
        }
        out.push(v as f32);
    }
    Tensor::new(x_t.shape(), out)
}

/// Ancestral DDPM update. For `t_prev = t - 1` this is the textbook posterior
/// step; for strided schedules the per-step alpha is `ab_t / ab_prev`.
pub fn ddpm_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    check_pair(x_t, eps)?;
    check_order(schedule, t, t_prev)?;
    let ab_t = schedule.alpha_bars[t];
    let ab_prev = schedule.alpha_bar(t_prev);
    let (alpha, beta) = if t_prev == t.checked_sub(1) {
        (schedule.alphas[t], schedule.betas[t])
    } else {
        let a = ab_t / ab_prev;
        (a, 1.0 - a)
    };
    let coef = beta / (1.0 - ab_t).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = match t_prev {
        Some(_) => ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt(),
        None => 0.0,
    };
    let mut out = Vec::with_capacity(x_t.len());
    for (&x, &e) in x_t.data().iter().zip(eps.data()) {
        let mut v = inv_sqrt_alpha * (x as f64 - coef * e as f64);
        if sigma > 0.0 {
            v += sigma * rng.gaussian();
        }
        out.push(v as f32);
    }
    Tensor::new(x_t.shape(), out)
}

/// A denoising update rule usable through the registry.
pub trait StepRule: Send + Sync {
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        x_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        schedule: &NoiseSchedule,
        eta: f64,
        rng: &mut Rng,
    ) -> Result<Tensor>;
}

pub struct Ddim;

impl StepRule for Ddim {
    fn step(
        &self,
        x_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        schedule: &NoiseSchedule,
        eta: f64,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        ddim_step(x_t, eps, t, t_prev, schedule, eta, rng)
    }
}

pub struct Ddpm;

impl StepRule for Ddpm {
    fn step(
        &self,
        x_t: &Tensor,
        eps: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        schedule: &NoiseSchedule,
        _eta: f64,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        ddpm_step(x_t, eps, t, t_prev, schedule, rng)
    }
}

/// Per-generation bookkeeping over a shared schedule.
pub struct SchedulerState {
    pub schedule: Arc<NoiseSchedule>,
    pub timesteps: Arc<Vec<usize>>,
    pub eta: f64,
    pub step_index: usize,
}

impl SchedulerState {
    pub fn new(schedule: Arc<NoiseSchedule>, timesteps: Arc<Vec<usize>>, eta: f64) -> Result<Self> {
        if eta < 0.0 {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument("timesteps must be strictly decreasing".into()));
        }
        Ok(Self {
            schedule,
            timesteps,
            eta,
            step_index: 0,
        })
    }

    /// Skips the first `n` timesteps (img2img starts part-way down the schedule).
    pub fn skip(&mut self, n: usize) {
        self.step_index = n.min(self.timesteps.len());
    }

    pub fn current(&self) -> Option<usize> {
        self.timesteps.get(self.step_index).copied()
    }

    pub fn next_timestep(&self) -> Option<usize> {
        self.timesteps.get(self.step_index + 1).copied()
    }

    pub fn remaining(&self) -> usize {
        self.timesteps.len() - self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.timesteps.len()
    }

    pub fn step(&mut self, rule: &dyn StepRule, x_t: &Tensor, eps: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let t = self
            .current()
            .ok_or_else(|| Error::InvalidArgument("scheduler already finished".into()))?;
        let out = rule.step(x_t, eps, t, self.next_timestep(), &self.schedule, self.eta, rng)?;
        self.step_index += 1;
        Ok(out)
    }
}

/// Name -> update rule. Filled at startup, read concurrently afterwards.
pub struct SchedulerRegistry {
    rules: RwLock<IndexMap<String, Arc<dyn StepRule>>>,
}

impl Default for SchedulerRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl SchedulerRegistry {
    pub fn empty() -> Self {
        Self {
            rules: RwLock::new(IndexMap::new()),
        }
    }

    pub fn with_builtins() -> Self {
        let r = Self::empty();
        r.register("ddim", Arc::new(Ddim)).expect("fresh registry");
        r.register("ddpm", Arc::new(Ddpm)).expect("fresh registry");
        r
    }

    pub fn register(&self, name: &str, rule: Arc<dyn StepRule>) -> Result<()> {
        let mut rules = self.rules.write().expect("scheduler registry poisoned");
        if rules.contains_key(name) {
            return Err(Error::Duplicate(format!("scheduler `{name}`")));
        }
        rules.insert(name.to_string(), rule);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn StepRule>> {
        let rules = self.rules.read().expect("scheduler registry poisoned");
        rules
            .get(name)
            .cloned()
            .ok_or_else(|| unknown("scheduler", name, rules.keys()))
    }

    pub fn names(&self) -> Vec<String> {
        self.rules
            .read()
            .expect("scheduler registry poisoned")
            .keys()
            .cloned()
            .collect()
    }
}
