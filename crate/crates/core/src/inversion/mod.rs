//! Inversion algorithms: plain DDIM, editable noise-map refinement and the
//! comparison baselines.

mod baselines;
mod refine;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{
    compute_residuals, fixed_point_invert, null_cond_optimize, replay_with_null_offsets, NullOffsets, ResidualSequence,
    FIXED_POINT_DIVERGENCE_RATIO,
};
pub use refine::{enm_invert, enm_refine_timestep, refinement_loss_and_gradient};

use crate::ddim::{ddim_inverse_step, ddim_step, Latent};
use crate::error::{Error, Result};
use crate::guidance::{Condition, GuidanceConfig};
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::vector::{sub, NormMode};

/// Inversion / editing pipelines compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ddim,
    FixedPoint,
    NullOpt,
    Residual,
    Enm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ddim,
        Method::FixedPoint,
        Method::NullOpt,
        Method::Residual,
        Method::Enm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::FixedPoint => "fixed_point",
            Method::NullOpt => "null_opt",
            Method::Residual => "residual",
            Method::Enm => "enm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Param(format!("unknown method `{s}`")))
    }
}

/// Hyperparameters of the per-timestep refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Weight of the edit-alignment term.
    pub lambda: f64,
    /// Maximum number of gradient updates per timestep.
    pub max_iters: usize,
    /// Early-stop threshold on the total loss, in units of `norm`.
    pub tau: f64,
    pub step_size: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub norm: NormMode,
    /// Recompute the edited prediction at every inner iteration instead of
    /// holding it fixed for the timestep.
    pub recompute_edited: bool,
    /// Guidance used by both denoising evaluations inside the loss.
    pub guidance: GuidanceConfig,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            lambda: 10.0,
            max_iters: 10,
            tau: 1e-5,
            step_size: 0.1,
            backtrack_factor: 0.5,
            max_backtracks: 8,
            norm: NormMode::MeanSquares,
            recompute_edited: false,
            guidance: GuidanceConfig::none(),
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Param(format!("refinement config: {what}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be > 0");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be > 0");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        self.guidance.validate()
    }
}

/// Diagnostics for one inversion step `t - 1 -> t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Reconstruction term `N(z_{t-1} - f(z_t, t, src))` at exit.
    pub l_recon: f64,
    pub l_edit: Option<f64>,
    pub refinement_iters: usize,
    pub stopped_by_tau: bool,
    #[serde(default)]
    pub backtrack_exhausted: bool,
    #[serde(default)]
    pub diverged: bool,
    /// `N(f(z_t, t, tgt) - f(z_t, t, src))` at the stored latent.
    pub noise_gap: Option<f64>,
    /// Loss before the first update followed by the loss after every accepted
    /// update (fixed-point: the per-iteration residuals).
    #[serde(default)]
    pub loss_trace: Vec<f64>,
}

/// Inverted noise maps `z_1 .. z_T` with per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: Method,
    pub source: Latent,
    pub latents: Vec<Latent>,
    pub per_step: Vec<StepRecord>,
    pub config: Option<RefinementConfig>,
    pub fixed_point_iters: Option<usize>,
    pub cond_src: Condition,
    pub cond_tgt: Option<Condition>,
    /// Guidance used by the inversion steps.
    pub guidance: GuidanceConfig,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.latents.len()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    /// Latent at inference index `t` (0 is the source).
    pub fn latent(&self, t: usize) -> &Latent {
        if t == 0 {
            &self.source
        } else {
            &self.latents[t - 1]
        }
    }

    pub fn noise(&self) -> &Latent {
        self.latents.last().unwrap_or(&self.source)
    }

    pub fn refine_iters_total(&self) -> usize {
        self.per_step.iter().map(|r| r.refinement_iters).sum()
    }

    pub fn check_against(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.latents.len() != schedule.steps() {
            return Err(Error::Param(format!(
                "trajectory has {} steps but the schedule has {}",
                self.latents.len(),
                schedule.steps()
            )));
        }
        Ok(())
    }

    /// Per-step records as CSV (header included).
    pub fn per_step_csv(&self) -> String {
        let mut out =
            String::from("t,l_recon,l_edit,refinement_iters,stopped_by_tau,backtrack_exhausted,diverged,noise_gap\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_step {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t,
                r.l_recon,
                opt(r.l_edit),
                r.refinement_iters,
                r.stopped_by_tau,
                r.backtrack_exhausted,
                r.diverged,
                opt(r.noise_gap)
            ));
        }
        out
    }
}

pub(crate) fn check_source(z0: &Latent, schedule: &NoiseSchedule) -> Result<()> {
    if z0.t_index != 0 {
        return Err(Error::Param(format!(
            "inversion starts from t = 0, latent is at {}",
            z0.t_index
        )));
    }
    schedule.validate()?;
    crate::error::check_finite("z0", &z0.values)
}

/// Plain DDIM inversion: `z_t = f_inv(z_{t-1})` for `t = 1..T`.
pub fn ddim_invert<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z0: &Latent,
    cond_src: Condition,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
) -> Result<Trajectory> {
    check_source(z0, schedule)?;
    let mut traj = Trajectory {
        method: Method::Ddim,
        source: z0.clone(),
        latents: Vec::with_capacity(schedule.steps()),
        per_step: Vec::with_capacity(schedule.steps()),
        config: None,
        fixed_point_iters: None,
        cond_src,
        cond_tgt: None,
        guidance: *guidance,
    };
    for t in 1..=schedule.steps() {
        let prev = traj.latent(t - 1).clone();
        let step = ddim_inverse_step(predictor, &prev, cond_src, guidance, schedule).and_then(|z| {
            let recon = ddim_step(predictor, &z, cond_src, guidance, schedule)?;
            Ok((z, recon))
        });
        let (z, recon) = match step {
            Ok(v) => v,
            Err(e) => return Err(abort(t, e, traj)),
        };
        traj.per_step.push(StepRecord {
            t,
            l_recon: NormMode::MeanSquares.apply(&sub(&prev.values, &recon.values)),
            l_edit: None,
            refinement_iters: 0,
            stopped_by_tau: false,
            backtrack_exhausted: false,
            diverged: false,
            noise_gap: None,
            loss_trace: Vec::new(),
        });
        traj.latents.push(z);
    }
    Ok(traj)
}

pub(crate) fn abort(t: usize, source: Error, partial: Trajectory) -> Error {
    let source = match source {
        Error::AtStep { source, .. } => *source,
        other => other,
    };
    Error::Inversion {
        t,
        source: Box::new(source),
        partial: Box::new(partial),
    }
}
