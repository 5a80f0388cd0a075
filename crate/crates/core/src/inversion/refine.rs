//! Editable noise-map refinement.
//!
//! After every inversion step the fresh latent `z_t` is refined by gradient
//! descent on
//!
//! ```text
//! L(z_t) = N(z_{t-1} - f(z_t, t, src)) + lambda * N(z_e - f(z_t, t, src)),
//! z_e = f(z_t, t, tgt)   (taken once, with the incoming z_t)
//! ```
//!
//! The gradient flows through the source prediction only:
//! `dL/dz_t = J_f^T g`, `J_f = s I + k d eps / d z`, where `g` is the gradient of
//! `L` with respect to the source prediction. Each update is a backtracking
//! step that never increases `L`.

use super::{abort, check_source, Method, RefinementConfig, StepRecord, Trajectory};
use crate::ddim::{ddim_inverse_step, ddim_step, Latent, Transition};
use crate::error::{check_finite, Error, Result};
use crate::guidance::{Condition, GuidanceConfig};
use crate::predictor::{guided_vjp, NoisePredictor};
use crate::schedule::NoiseSchedule;
use crate::vector::{lincomb, sub};

struct Evaluation {
    total: f64,
    recon: f64,
    edit: f64,
    source_pred: Vec<f64>,
}

struct LossContext<'a, P: ?Sized> {
    predictor: &'a P,
    z_prev: &'a [f64],
    t: usize,
    cond_src: Condition,
    cfg: &'a RefinementConfig,
    schedule: &'a NoiseSchedule,
}

impl<P: NoisePredictor + ?Sized> LossContext<'_, P> {
    fn denoise(&self, z: &[f64], cond: Condition) -> Result<Vec<f64>> {
        let latent = Latent::new(z.to_vec(), self.t);
        Ok(ddim_step(self.predictor, &latent, cond, &self.cfg.guidance, self.schedule)?.values)
    }

    fn evaluate(&self, z: &[f64], edited: &[f64]) -> Result<Evaluation> {
        let source_pred = self.denoise(z, self.cond_src)?;
        let norm = self.cfg.norm;
        let recon = norm.apply(&sub(self.z_prev, &source_pred));
        let edit = norm.apply(&sub(edited, &source_pred));
        let total = recon + self.cfg.lambda * edit;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("refinement loss is {total}")));
        }
        Ok(Evaluation {
            total,
            recon,
            edit,
            source_pred,
        })
    }

    fn gradient(&self, z: &[f64], edited: &[f64], eval: &Evaluation) -> Result<Vec<f64>> {
        let norm = self.cfg.norm;
        // d/d(pred) of N(a - pred) is -N'(a - pred)
        let g_recon = norm.gradient(&sub(self.z_prev, &eval.source_pred));
        let g_edit = norm.gradient(&sub(edited, &eval.source_pred));
        let g_pred = lincomb(-1.0, &g_recon, -self.cfg.lambda, &g_edit);
        let tr = Transition::reverse(self.schedule, self.t);
        let through_eps = guided_vjp(
            self.predictor,
            z,
            &self.schedule.level(self.t),
            self.cond_src,
            &g_pred,
            &self.cfg.guidance,
        )?;
        let grad = lincomb(tr.latent_scale, &g_pred, tr.eps_scale, &through_eps);
        check_finite("refinement gradient", &grad)?;
        Ok(grad)
    }
}

/// Analytic gradient of the refinement loss at `z_t` for a given edited
/// target; exposed for gradient checks.
pub fn refinement_loss_and_gradient<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_t: &Latent,
    z_prev: &Latent,
    edited: &[f64],
    cond_src: Condition,
    cfg: &RefinementConfig,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let ctx = LossContext {
        predictor,
        z_prev: &z_prev.values,
        t: z_t.t_index,
        cond_src,
        cfg,
        schedule,
    };
    let eval = ctx.evaluate(&z_t.values, edited)?;
    let grad = ctx.gradient(&z_t.values, edited, &eval)?;
    Ok((eval.total, grad))
}

/// Refines the freshly inverted `z_t` against the stored `z_{t-1}`.
#[allow(clippy::too_many_arguments)]
pub fn enm_refine_timestep<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_t: &Latent,
    z_prev: &Latent,
    cond_src: Condition,
    cond_tgt: Condition,
    cfg: &RefinementConfig,
    schedule: &NoiseSchedule,
) -> Result<(Latent, StepRecord)> {
    let t = z_t.t_index;
    if t == 0 || t > schedule.steps() || z_prev.t_index + 1 != t {
        return Err(Error::Param(format!(
            "refinement needs z_t at t in 1..=T and z_prev at t-1, got {} and {}",
            t, z_prev.t_index
        )));
    }
    cfg.validate()?;
    let ctx = LossContext {
        predictor,
        z_prev: &z_prev.values,
        t,
        cond_src,
        cfg,
        schedule,
    };
    let wrap = |e: Error| Error::at_step(t, e);

    let mut z = z_t.values.clone();
    let mut edited = ctx.denoise(&z, cond_tgt).map_err(wrap)?;
    let mut eval = ctx.evaluate(&z, &edited).map_err(wrap)?;
    let mut trace = vec![eval.total];
    let mut iters = 0;
    let mut stopped_by_tau = false;
    let mut exhausted = false;

    loop {
        if eval.total < cfg.tau {
            stopped_by_tau = true;
            break;
        }
        if iters == cfg.max_iters {
            break;
        }
        let grad = ctx.gradient(&z, &edited, &eval).map_err(wrap)?;
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let candidate = lincomb(1.0, &z, -step, &grad);
            let cand_eval = ctx.evaluate(&candidate, &edited).map_err(wrap)?;
            if cand_eval.total <= eval.total {
                accepted = Some((candidate, cand_eval));
                break;
            }
            step *= cfg.backtrack_factor;
        }
        let Some((candidate, cand_eval)) = accepted else {
            exhausted = true;
            break;
        };
        z = candidate;
        eval = cand_eval;
        iters += 1;
        if cfg.recompute_edited {
            edited = ctx.denoise(&z, cond_tgt).map_err(wrap)?;
            eval = ctx.evaluate(&z, &edited).map_err(wrap)?;
        }
        trace.push(eval.total);
    }

    // Gap diagnostic at the refined latent.
    let edited_now = ctx.denoise(&z, cond_tgt).map_err(wrap)?;
    let noise_gap = cfg.norm.apply(&sub(&edited_now, &eval.source_pred));

    let record = StepRecord {
        t,
        l_recon: eval.recon,
        l_edit: Some(eval.edit),
        refinement_iters: iters,
        stopped_by_tau,
        backtrack_exhausted: exhausted,
        diverged: false,
        noise_gap: Some(noise_gap),
        loss_trace: trace,
    };
    Ok((Latent::new(z, t), record))
}

/// Inverts `z0` with a refinement after every DDIM inversion step.
#[allow(clippy::too_many_arguments)]
pub fn enm_invert<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z0: &Latent,
    cond_src: Condition,
    cond_tgt: Condition,
    cfg: &RefinementConfig,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
) -> Result<Trajectory> {
    check_source(z0, schedule)?;
    cfg.validate()?;
    let mut traj = Trajectory {
        method: Method::Enm,
        source: z0.clone(),
        latents: Vec::with_capacity(schedule.steps()),
        per_step: Vec::with_capacity(schedule.steps()),
        config: Some(*cfg),
        fixed_point_iters: None,
        cond_src,
        cond_tgt: Some(cond_tgt),
        guidance: *guidance,
    };
    for t in 1..=schedule.steps() {
        let prev = traj.latent(t - 1).clone();
        let result = ddim_inverse_step(predictor, &prev, cond_src, guidance, schedule)
            .and_then(|fresh| enm_refine_timestep(predictor, &fresh, &prev, cond_src, cond_tgt, cfg, schedule));
        match result {
            Ok((z, record)) => {
                traj.latents.push(z);
                traj.per_step.push(record);
            }
            Err(e) => return Err(abort(t, e, traj)),
        }
    }
    Ok(traj)
}
