//! Comparison baselines: fixed-point inversion, per-step null-branch offsets
//! and residual correction.

use serde::{Deserialize, Serialize};

use super::{abort, check_source, Method, StepRecord, Trajectory};
use crate::ddim::{ddim_inverse_step, ddim_step, ddim_step_with_eps, Latent, Transition};
use crate::error::{check_finite, check_len, Error, Result};
use crate::guidance::{cfg_combine, Condition, GuidanceConfig};
use crate::predictor::{guided_eps, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::vector::{add, sub, NormMode};

/// Residual growth (relative to the first residual) treated as divergence.
pub const FIXED_POINT_DIVERGENCE_RATIO: f64 = 1e3;

/// Solves `f(z_t, t, cond) = z_{t-1}` at every step by iterating
/// `z <- f_inv` with the noise estimate taken at the current iterate.
pub fn fixed_point_invert<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z0: &Latent,
    cond_src: Condition,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    iters: usize,
) -> Result<Trajectory> {
    check_source(z0, schedule)?;
    let mut traj = Trajectory {
        method: Method::FixedPoint,
        source: z0.clone(),
        latents: Vec::with_capacity(schedule.steps()),
        per_step: Vec::with_capacity(schedule.steps()),
        config: None,
        fixed_point_iters: Some(iters),
        cond_src,
        cond_tgt: None,
        guidance: *guidance,
    };
    for t in 1..=schedule.steps() {
        let prev = traj.latent(t - 1).clone();
        match fixed_point_step(predictor, &prev, cond_src, schedule, guidance, iters) {
            Ok((z, record)) => {
                traj.latents.push(z);
                traj.per_step.push(record);
            }
            Err(e) => return Err(abort(t, e, traj)),
        }
    }
    Ok(traj)
}

fn fixed_point_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    prev: &Latent,
    cond: Condition,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    iters: usize,
) -> Result<(Latent, StepRecord)> {
    let t = prev.t_index + 1;
    let level = schedule.level(t);
    let up = Transition::inverse(schedule, t - 1);
    let down = Transition::reverse(schedule, t);
    let residual = |z: &[f64], eps: &[f64]| NormMode::MeanSquares.apply(&sub(&down.apply(z, eps), &prev.values));

    let mut z = ddim_inverse_step(predictor, prev, cond, guidance, schedule)?.values;
    let mut eps = guided_eps(predictor, &z, &level, cond, guidance)?;
    let mut trace = vec![residual(&z, &eps)];
    let mut used = 0;
    let mut diverged = false;
    while used < iters {
        let next = up.apply(&prev.values, &eps);
        check_finite("fixed-point iterate", &next).map_err(|e| Error::at_step(t, e))?;
        used += 1;
        if next == z {
            break;
        }
        let next_eps = guided_eps(predictor, &next, &level, cond, guidance)?;
        let r = residual(&next, &next_eps);
        trace.push(r);
        z = next;
        eps = next_eps;
        if r > FIXED_POINT_DIVERGENCE_RATIO * trace[0] && trace[0] > 0.0 || !r.is_finite() {
            diverged = true;
            break;
        }
    }
    let record = StepRecord {
        t,
        l_recon: *trace.last().unwrap(),
        l_edit: None,
        refinement_iters: used,
        stopped_by_tau: false,
        backtrack_exhausted: false,
        diverged,
        noise_gap: None,
        loss_trace: trace,
    };
    Ok((Latent::new(z, t), record))
}

/// Per-step corrections `r_t = z_{t-1} - f(z_t, t, src)` for `t = 1..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSequence {
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualSequence {
    /// Residual added after the denoising step out of level `t`.
    pub fn at(&self, t: usize) -> &[f64] {
        &self.residuals[t - 1]
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// Residuals of `stored` under `cond_src`, using the trajectory's own
/// inversion guidance.
pub fn compute_residuals<P: NoisePredictor + ?Sized>(
    predictor: &P,
    stored: &Trajectory,
    cond_src: Condition,
    schedule: &NoiseSchedule,
) -> Result<ResidualSequence> {
    stored.check_against(schedule)?;
    let residuals = (1..=schedule.steps())
        .map(|t| {
            let recon = ddim_step(predictor, stored.latent(t), cond_src, &stored.guidance, schedule)?;
            Ok(sub(&stored.latent(t - 1).values, &recon.values))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualSequence { residuals })
}

/// Offsets added to the unconditional branch at every denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullOffsets {
    /// `offsets[t - 1]` is used when denoising out of level `t`.
    pub offsets: Vec<Vec<f64>>,
    /// Squared replay error per step before and after optimization.
    pub initial_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
}

impl NullOffsets {
    pub fn zeros(steps: usize, dim: usize) -> Self {
        NullOffsets {
            offsets: vec![vec![0.0; dim]; steps],
            initial_loss: vec![0.0; steps],
            final_loss: vec![0.0; steps],
        }
    }
}

fn offset_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &Latent,
    cond: Condition,
    guidance: &GuidanceConfig,
    offset: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let level = schedule.level(z.t_index);
    let cond_eps = predictor.eps(&z.values, &level, cond)?;
    if guidance.is_identity() {
        return ddim_step_with_eps(z, &cond_eps, schedule);
    }
    let uncond_eps = add(&predictor.eps(&z.values, &level, Condition::Unconditional)?, offset);
    let eps = cfg_combine(&uncond_eps, &cond_eps, guidance)?;
    ddim_step_with_eps(z, &eps, schedule)
}

/// Learns one unconditional-branch offset per step so that guided replay from
/// `z_T` tracks the stored latents. Runs from `t = T` down to 1 along the
/// replayed path; each offset takes `opt_steps` gradient steps on the squared
/// replay error.
pub fn null_cond_optimize<P: NoisePredictor + ?Sized>(
    predictor: &P,
    stored: &Trajectory,
    cond_src: Condition,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    opt_steps: usize,
) -> Result<NullOffsets> {
    stored.check_against(schedule)?;
    let steps = schedule.steps();
    let d = stored.dim();
    let mut out = NullOffsets::zeros(steps, d);
    let mut z = stored.noise().clone();
    for t in (1..=steps).rev() {
        let target = &stored.latent(t - 1).values;
        let mut offset = vec![0.0; d];
        let mut next =
            offset_step(predictor, &z, cond_src, guidance, &offset, schedule).map_err(|e| Error::at_step(t, e))?;
        let loss = |x: &Latent| sub(target, &x.values).iter().map(|r| r * r).sum::<f64>();
        out.initial_loss[t - 1] = loss(&next);
        // The replayed latent is affine in the offset with slope
        // k (1 - w) I, so the squared error has curvature 2 (k (1 - w))^2.
        let slope = if guidance.is_identity() {
            0.0
        } else {
            Transition::reverse(schedule, t).eps_scale * (1.0 - guidance.scale)
        };
        if slope != 0.0 {
            let lr = 0.25 / (slope * slope);
            for _ in 0..opt_steps {
                let resid = sub(target, &next.values);
                for (o, r) in offset.iter_mut().zip(&resid) {
                    // gradient is -2 slope r
                    *o += lr * 2.0 * slope * r;
                }
                next = offset_step(predictor, &z, cond_src, guidance, &offset, schedule)
                    .map_err(|e| Error::at_step(t, e))?;
            }
        }
        check_finite("null offset", &offset).map_err(|e| Error::at_step(t, e))?;
        out.final_loss[t - 1] = loss(&next);
        out.offsets[t - 1] = offset;
        z = next;
    }
    Ok(out)
}

/// Guided sampling from the trajectory's `z_T` with the learned offsets.
pub fn replay_with_null_offsets<P: NoisePredictor + ?Sized>(
    predictor: &P,
    traj: &Trajectory,
    cond: Condition,
    guidance: &GuidanceConfig,
    offsets: &NullOffsets,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    traj.check_against(schedule)?;
    check_len("null offsets", schedule.steps(), offsets.offsets.len())?;
    let mut z = traj.noise().clone();
    for t in (1..=schedule.steps()).rev() {
        z = offset_step(predictor, &z, cond, guidance, &offsets.offsets[t - 1], schedule)
            .map_err(|e| Error::at_step(t, e))?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::ddim_invert;
    use crate::mixture::{Component, GaussianMixture};
    use crate::predictor::LatentIndependentPredictor;

    fn mixture() -> GaussianMixture {
        let comp = |weight, mean: Vec<f64>, sigma, class| Component {
            weight,
            mean,
            sigma,
            class,
        };
        GaussianMixture::new(
            2,
            vec![
                comp(0.3, vec![-1.5, 0.4], 0.4, 0),
                comp(0.2, vec![-1.0, -0.6], 0.3, 0),
                comp(0.5, vec![1.5, 0.0], 0.5, 1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn fixed_point_on_latent_independent_predictor_converges_at_once() {
        let s = NoiseSchedule::default_with_steps(20).unwrap();
        let p = LatentIndependentPredictor {
            base: vec![0.1, 0.2],
            drift: vec![0.5, -0.5],
            class_shift: 0.0,
        };
        let z0 = Latent::new(vec![0.7, -0.3], 0);
        let fp = fixed_point_invert(&p, &z0, Condition::Class(0), &s, &GuidanceConfig::none(), 5).unwrap();
        assert!(fp.per_step.iter().all(|r| r.refinement_iters == 1));
        let ddim = ddim_invert(&p, &z0, Condition::Class(0), &s, &GuidanceConfig::none()).unwrap();
        assert_eq!(fp.latents, ddim.latents);
    }

    #[test]
    fn zero_fixed_point_iterations_is_ddim() {
        let g = mixture();
        let s = NoiseSchedule::default_with_steps(30).unwrap();
        let z0 = Latent::new(vec![-1.3, 0.2], 0);
        let fp = fixed_point_invert(&g, &z0, Condition::Class(0), &s, &GuidanceConfig::none(), 0).unwrap();
        let ddim = ddim_invert(&g, &z0, Condition::Class(0), &s, &GuidanceConfig::none()).unwrap();
        assert_eq!(fp.latents, ddim.latents);
    }

    #[test]
    fn fixed_point_residuals_shrink() {
        let g = mixture();
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let z0 = Latent::new(vec![-1.3, 0.2], 0);
        let fp = fixed_point_invert(&g, &z0, Condition::Class(0), &s, &GuidanceConfig::none(), 5).unwrap();
        let decreasing = fp
            .per_step
            .iter()
            .filter(|r| r.loss_trace.windows(2).all(|w| w[1] <= w[0]))
            .count();
        assert!(decreasing >= 48, "{decreasing}/50");
        assert!(fp.per_step.iter().all(|r| !r.diverged));
    }

    #[test]
    fn residuals_vanish_for_latent_independent_predictor() {
        let s = NoiseSchedule::default_with_steps(10).unwrap();
        let p = LatentIndependentPredictor::constant(vec![0.5, -0.5]);
        let traj = ddim_invert(
            &p,
            &Latent::new(vec![1.0, 1.0], 0),
            Condition::Class(0),
            &s,
            &GuidanceConfig::none(),
        )
        .unwrap();
        let r = compute_residuals(&p, &traj, Condition::Class(0), &s).unwrap();
        assert_eq!(r.len(), 10);
        assert!(r.residuals.iter().flatten().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn null_offsets_degenerate_cases() {
        let g = mixture();
        let s = NoiseSchedule::default_with_steps(10).unwrap();
        let traj = ddim_invert(
            &g,
            &Latent::new(vec![-1.2, 0.1], 0),
            Condition::Class(0),
            &s,
            &GuidanceConfig::none(),
        )
        .unwrap();
        let unit = null_cond_optimize(&g, &traj, Condition::Class(0), &s, &GuidanceConfig::new(1.0), 10).unwrap();
        assert!(unit.offsets.iter().flatten().all(|x| *x == 0.0));
        let none = null_cond_optimize(&g, &traj, Condition::Class(0), &s, &GuidanceConfig::new(7.5), 0).unwrap();
        assert!(none.offsets.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn null_offsets_restore_guided_replay() {
        let g = mixture();
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let z0 = Latent::new(vec![-1.2, 0.1], 0);
        let traj = ddim_invert(&g, &z0, Condition::Class(0), &s, &GuidanceConfig::none()).unwrap();
        let w = GuidanceConfig::new(7.5);
        let zero = NullOffsets::zeros(50, 2);
        let plain = replay_with_null_offsets(&g, &traj, Condition::Class(0), &w, &zero, &s).unwrap();
        let offsets = null_cond_optimize(&g, &traj, Condition::Class(0), &s, &w, 10).unwrap();
        let tuned = replay_with_null_offsets(&g, &traj, Condition::Class(0), &w, &offsets, &s).unwrap();
        let mse = |a: &Latent| crate::vector::mean_squared_diff(&a.values, &z0.values);
        assert!(mse(&tuned) <= 0.01 * mse(&plain), "{} vs {}", mse(&tuned), mse(&plain));
    }
}
