//! Forward diffusion: noise schedules, per-patch step sampling and
//! corruption of clean patches.
//!
//! With `gamma[s]` the cumulative product of `alpha` up to step `s`, a clean
//! patch is corrupted in closed form as
//! `x_s = sqrt(gamma[s]) * x_0 + sqrt(1 - gamma[s]) * eps`.
//! `gamma[0] = 1`, so step 0 is the clean patch; training samples steps
//! from `1..=T`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOTAL_STEPS: usize = 1000;

const COSINE_OFFSET: f64 = 0.008;
const ALPHA_MIN: f64 = 0.001;
const ALPHA_MAX: f64 = 0.9999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::invalid(format!("unknown scheduler `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// `alpha[s - 1]` is alpha(s) for `s = 1..=T`.
    alpha: Vec<f64>,
    /// `gamma[s]` for `s = 0..=T`.
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.alpha.len()
    }

    /// alpha(s) for `1 ≤ s ≤ T`.
    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gamma(&self, s: usize) -> f64 {
        self.gamma[s]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }
}

pub fn build_schedule(kind: ScheduleKind, total_steps: usize) -> Result<NoiseSchedule> {
    if total_steps < 1 {
        return Err(Error::invalid("a noise schedule needs at least one step"));
    }
    let t = total_steps as f64;
    let alpha: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |s: f64| {
                let angle = (s / t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                angle.cos().powi(2)
            };
            let f0 = f(0.0);
            (1..=total_steps)
                .map(|s| {
                    let ratio = (f(s as f64) / f0) / (f(s as f64 - 1.0) / f0);
                    ratio.clamp(ALPHA_MIN, ALPHA_MAX)
                })
                .collect()
        }
        ScheduleKind::Linear => (1..=total_steps)
            .map(|s| {
                let frac = if total_steps == 1 {
                    0.0
                } else {
                    (s - 1) as f64 / (t - 1.0)
                };
                1.0 - (LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * frac)
            })
            .collect(),
    };
    let mut gamma = Vec::with_capacity(total_steps + 1);
    gamma.push(1.0);
    for a in &alpha {
        gamma.push(gamma.last().unwrap() * a);
    }
    Ok(NoiseSchedule { kind, alpha, gamma })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Each patch draws its own step.
    Independent,
    /// All patches of a sequence share one step.
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepAssignment {
    pub steps: Vec<usize>,
    pub mode: StepMode,
}

impl StepAssignment {
    pub fn fixed(n: usize, step: usize) -> Self {
        StepAssignment {
            steps: vec![step; n],
            mode: StepMode::Same,
        }
    }
}

/// Draws diffusion steps uniformly from `1..=total_steps` for `n` patches.
pub fn sample_steps(n: usize, mode: StepMode, total_steps: usize, rng: &mut impl Rng) -> Result<StepAssignment> {
    if n == 0 || total_steps == 0 {
        return Err(Error::invalid("need at least one patch and one step"));
    }
    let steps = match mode {
        StepMode::Independent => (0..n).map(|_| rng.random_range(1..=total_steps)).collect(),
        StepMode::Same => vec![rng.random_range(1..=total_steps); n],
    };
    Ok(StepAssignment { steps, mode })
}

/// Corrupts one patch to step `step` with the supplied standard-normal noise.
pub fn add_noise(x0: &[f64], step: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    if step > schedule.total_steps() {
        return Err(Error::invalid(format!(
            "step {step} outside 0..={}",
            schedule.total_steps()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("patch of {} vs noise of {}", x0.len(), eps.len())));
    }
    let g = schedule.gamma(step);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.sample(StandardNormal);
    }
    t
}

/// Noises every patch row of `patches` (`[... × P]`) at its own step.
pub fn noise_patches(patches: &Tensor, steps: &[usize], schedule: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    if steps.len() != patches.outer_len() || eps.shape() != patches.shape() {
        return Err(Error::shape(format!(
            "{} steps / noise {:?} for patches {:?}",
            steps.len(),
            eps.shape(),
            patches.shape()
        )));
    }
    let mut out = Tensor::zeros(patches.shape());
    for (r, &s) in steps.iter().enumerate() {
        let noisy = add_noise(patches.row(r), s, schedule, eps.row(r))?;
        out.row_mut(r).copy_from_slice(&noisy);
    }
    Ok(out)
}
