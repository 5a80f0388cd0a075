//! Cumulative noise schedules and their inference-step subsampling.
//!
//! Inference index `t` runs over `0..=T` with `t = 0` the clean-data end.
//! Index `t >= 1` maps to the training step `timesteps[t - 1]`; the data end
//! uses the first entry of the training grid (never exactly one).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// Cumulative products `prod_{j <= i} (1 - beta_j)` for betas linear in `i`.
pub fn build_linear_schedule(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>> {
    if num_train_steps == 0 {
        return Err(Error::Param("num_train_steps must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let denom = (num_train_steps.max(2) - 1) as f64;
    let mut acc = 1.0;
    Ok((0..num_train_steps)
        .map(|i| {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / denom;
            acc *= 1.0 - beta;
            acc
        })
        .collect())
}

/// Cumulative signal coefficients over the inference grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(rename = "T")]
    steps: usize,
    alphas_cum: Vec<f64>,
    timesteps: Vec<usize>,
}

/// Everything a predictor may condition on for one inference index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub index: usize,
    pub alpha_cum: f64,
    /// Training-grid step, absent at the data end.
    pub train_step: Option<usize>,
}

impl NoiseSchedule {
    pub fn new(alphas_cum: Vec<f64>, timesteps: Vec<usize>) -> Result<Self> {
        let schedule = NoiseSchedule {
            steps: timesteps.len(),
            alphas_cum,
            timesteps,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// The default grid: 1000 linear-beta training steps subsampled to `steps`.
    pub fn default_with_steps(steps: usize) -> Result<Self> {
        let train = build_linear_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
        subsample_schedule(&train, steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if self.alphas_cum.len() != self.steps + 1 {
            return Err(Error::Param(format!(
                "alphas_cum has {} entries, expected T+1 = {}",
                self.alphas_cum.len(),
                self.steps + 1
            )));
        }
        if self.timesteps.len() != self.steps {
            return Err(Error::Param("timesteps must have T entries".into()));
        }
        for (i, &a) in self.alphas_cum.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Param(format!("alphas_cum[{i}] = {a} outside (0, 1]")));
            }
        }
        if let Some(i) = self.alphas_cum.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Param(format!(
                "alphas_cum not strictly decreasing at index {}",
                i + 1
            )));
        }
        if let Some(i) = self.timesteps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Param(format!(
                "timesteps not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(())
    }

    /// Number of inference steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn alpha_cum(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    pub fn level(&self, t: usize) -> NoiseLevel {
        NoiseLevel {
            index: t,
            alpha_cum: self.alphas_cum[t],
            train_step: t.checked_sub(1).map(|i| self.timesteps[i]),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let schedule: NoiseSchedule = serde_json::from_str(s)?;
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Picks `steps` training indices with a uniform stride so that the last one is
/// the final stride boundary (`stride * steps - 1`), i.e. the noisiest level is
/// always on the grid.
pub fn subsample_schedule(train_alphas: &[f64], steps: usize) -> Result<NoiseSchedule> {
    let n = train_alphas.len();
    if steps == 0 {
        return Err(Error::Param("T must be at least 1".into()));
    }
    if steps > n {
        return Err(Error::Param(format!("T = {steps} exceeds the {n} training steps")));
    }
    let stride = n / steps;
    let timesteps: Vec<usize> = (1..=steps).map(|t| t * stride - 1).collect();
    // With T = n the first inference level is the first training entry; the
    // data end then falls back to the empty product.
    let data_end = if timesteps[0] == 0 { 1.0 } else { train_alphas[0] };
    let alphas_cum = std::iter::once(data_end)
        .chain(timesteps.iter().map(|&i| train_alphas[i]))
        .collect();
    NoiseSchedule::new(alphas_cum, timesteps)
}
