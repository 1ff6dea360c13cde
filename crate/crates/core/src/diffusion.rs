//! Noise schedule, forward diffusion and deterministic DDIM sampling and
//! inversion.
//!
//! Noise levels are addressed by [`Level`]: either a schedule index or the
//! clean endpoint where `alpha_bar == 1`. A sampling pass over a descending
//! plan finishes at [`Level::Clean`]; an inversion pass starts there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both
    /// endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "noise schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or_else(|| {
            Error::invalid(format!("timestep {t} outside schedule of {}", self.steps()))
        })
    }

    pub fn alpha_bar_at(&self, level: Level) -> Result<f64> {
        match level {
            Level::Clean => Ok(1.0),
            Level::Noisy(t) => self.alpha_bar(t),
        }
    }
}

/// A point on the noise axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Clean,
    Noisy(usize),
}

/// Strictly monotone list of schedule indices visited by a DDIM pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan(Vec<usize>);

impl TimestepPlan {
    /// `points` indices spread uniformly over `[0, train_steps - 1]`, both
    /// endpoints included, in ascending order. A single point plan is the
    /// top of the schedule.
    pub fn uniform(points: usize, train_steps: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::invalid("timestep plan needs at least one point"));
        }
        if points > train_steps {
            return Err(Error::invalid(format!(
                "{points} plan points cannot be distinct within {train_steps} schedule steps"
            )));
        }
        if points == 1 {
            return Ok(TimestepPlan(vec![train_steps - 1]));
        }
        let span = (train_steps - 1) as f64;
        let idx = (0..points)
            .map(|k| (k as f64 * span / (points - 1) as f64).round() as usize)
            .collect();
        TimestepPlan::from_indices(idx)
    }

    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty timestep plan"));
        }
        let inc = indices.windows(2).all(|w| w[0] < w[1]);
        let dec = indices.windows(2).all(|w| w[0] > w[1]);
        if !(inc || dec) {
            return Err(Error::invalid(format!(
                "timestep plan {indices:?} is not strictly monotone"
            )));
        }
        Ok(TimestepPlan(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reversed(&self) -> TimestepPlan {
        TimestepPlan(self.0.iter().rev().copied().collect())
    }

    pub fn is_ascending(&self) -> bool {
        self.0.windows(2).all(|w| w[0] < w[1])
    }

    pub fn is_descending(&self) -> bool {
        self.0.windows(2).all(|w| w[0] > w[1])
    }

    fn check_within(&self, sched: &NoiseSchedule) -> Result<()> {
        match self.0.iter().find(|&&t| t >= sched.steps()) {
            Some(t) => Err(Error::invalid(format!(
                "plan index {t} outside schedule of {}",
                sched.steps()
            ))),
            None => Ok(()),
        }
    }
}

/// Anything that predicts the noise contained in a latent at a timestep.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &[f64]) -> Result<Tensor>;
}

/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_with(eps, |x, e| a * x + b * e)
}

/// One deterministic DDIM update between two noise levels. Works in both
/// directions: toward `Clean` is sampling, away from it is inversion.
pub fn ddim_step(
    z: &Tensor,
    eps_hat: &Tensor,
    from: Level,
    to: Level,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if from == to {
        return Err(Error::invalid(format!("ddim_step from {from:?} to itself")));
    }
    let ab_from = sched.alpha_bar_at(from)?;
    let ab_to = sched.alpha_bar_at(to)?;
    let (sa_from, sb_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sb_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    z.zip_with(eps_hat, |zt, e| {
        let x0 = (zt - sb_from * e) / sa_from;
        sa_to * x0 + sb_to * e
    })
}

/// Denoises `z_top` along a strictly descending plan, ending at the clean
/// level. The predictor is queried once per plan index.
pub fn ddim_sample(
    model: &impl NoisePredictor,
    z_top: &Tensor,
    cond: &[f64],
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if plan.is_empty() {
        return Err(Error::invalid("empty sampling plan"));
    }
    if !plan.is_descending() {
        return Err(Error::invalid("sampling plan must be strictly descending"));
    }
    plan.check_within(sched)?;
    let idx = plan.indices();
    let mut z = z_top.clone();
    for (i, &t) in idx.iter().enumerate() {
        let eps = model.predict_noise(&z, t, cond)?;
        let to = idx.get(i + 1).map_or(Level::Clean, |&n| Level::Noisy(n));
        z = ddim_step(&z, &eps, Level::Noisy(t), to, sched)?;
    }
    Ok(z)
}

/// Maps a clean latent up an ascending plan to its inverted noise latent.
/// Each update uses the prediction at the lower end of the step; the first
/// step, which leaves the clean level, uses the lowest plan index.
pub fn ddim_invert(
    model: &impl NoisePredictor,
    z0: &Tensor,
    cond: &[f64],
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if plan.is_empty() {
        return Err(Error::invalid("empty inversion plan"));
    }
    if !plan.is_ascending() {
        return Err(Error::invalid("inversion plan must be strictly ascending"));
    }
    plan.check_within(sched)?;
    let idx = plan.indices();
    let mut z = z0.clone();
    let mut from = Level::Clean;
    for &t in idx {
        let eval_t = match from {
            Level::Clean => t,
            Level::Noisy(s) => s,
        };
        let eps = model.predict_noise(&z, eval_t, cond)?;
        z = ddim_step(&z, &eps, from, Level::Noisy(t), sched)?;
        from = Level::Noisy(t);
    }
    Ok(z)
}

/// Predictor that always returns zeros; useful as a reference model.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, z_t: &Tensor, _t: usize, _cond: &[f64]) -> Result<Tensor> {
        Tensor::zeros(z_t.shape())
    }
}

/// Predictor returning a fixed tensor regardless of its inputs.
#[derive(Debug, Clone)]
pub struct ConstantPredictor(pub Tensor);

impl NoisePredictor for ConstantPredictor {
    fn predict_noise(&self, z_t: &Tensor, _t: usize, _cond: &[f64]) -> Result<Tensor> {
        z_t.same_shape(&self.0)?;
        Ok(self.0.clone())
    }
}

/// Schedule and DDIM plan sizes as they appear in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub invert_steps: usize,
    pub sample_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            train_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            invert_steps: 20,
            sample_steps: 30,
        }
    }
}

/// A schedule with its ascending inversion plan and descending sampling
/// plan.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSetup {
    pub schedule: NoiseSchedule,
    pub invert_plan: TimestepPlan,
    pub sample_plan: TimestepPlan,
}

impl DiffusionConfig {
    pub fn build(&self) -> Result<DiffusionSetup> {
        let schedule = NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)?;
        Ok(DiffusionSetup {
            invert_plan: TimestepPlan::uniform(self.invert_steps, self.train_steps)?,
            sample_plan: TimestepPlan::uniform(self.sample_steps, self.train_steps)?.reversed(),
            schedule,
        })
    }
}
