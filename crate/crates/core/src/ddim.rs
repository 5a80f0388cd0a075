//! Deterministic DDIM transitions between adjacent inference levels.
//!
//! Both directions share one update. Moving a latent from level `a` to level
//! `b` (cumulative signal coefficients `alpha_a`, `alpha_b`) gives
//!
//! ```text
//! z_b = sqrt(alpha_b / alpha_a) z_a + sqrt(alpha_b) (c(alpha_b) - c(alpha_a)) eps,
//! c(alpha) = sqrt(1 / alpha - 1)
//! ```
//!
//! The denoising step `f` (`b = t - 1`) evaluates `eps` at `(z_t, t)`. The
//! inversion step `f_inv` (`b = t + 1`) evaluates `eps` at the current latent
//! but at the destination level `t + 1`. With that choice `f(f_inv(z))` is
//! exact whenever the predictor ignores its latent argument, even when it
//! varies with the level.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::guidance::{Condition, GuidanceConfig};
use crate::predictor::{guided_eps, NoisePredictor};
use crate::schedule::NoiseSchedule;

/// A latent vector pinned to an inference level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub values: Vec<f64>,
    pub t_index: usize,
}

impl Latent {
    pub fn new(values: Vec<f64>, t_index: usize) -> Self {
        Latent { values, t_index }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Coefficients `(latent_scale, eps_scale)` of the transition from one level to another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub latent_scale: f64,
    pub eps_scale: f64,
}

impl Transition {
    pub fn between(alpha_from: f64, alpha_to: f64) -> Self {
        let c = |a: f64| (1.0 / a - 1.0).max(0.0).sqrt();
        Transition {
            latent_scale: (alpha_to / alpha_from).sqrt(),
            eps_scale: alpha_to.sqrt() * (c(alpha_to) - c(alpha_from)),
        }
    }

    pub fn reverse(schedule: &NoiseSchedule, t: usize) -> Self {
        Self::between(schedule.alpha_cum(t), schedule.alpha_cum(t - 1))
    }

    pub fn inverse(schedule: &NoiseSchedule, t: usize) -> Self {
        Self::between(schedule.alpha_cum(t), schedule.alpha_cum(t + 1))
    }

    pub fn apply(&self, z: &[f64], eps: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(eps)
            .map(|(z, e)| self.latent_scale * z + self.eps_scale * e)
            .collect()
    }
}

fn check_reverse_index(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Param(format!(
            "denoising step needs t in 1..={}, got {t}",
            schedule.steps()
        )));
    }
    Ok(())
}

fn check_inverse_index(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t >= schedule.steps() {
        return Err(Error::Param(format!(
            "inversion step needs t in 0..{}, got {t}",
            schedule.steps()
        )));
    }
    Ok(())
}

/// `sqrt(alpha_t) z0 + sqrt(1 - alpha_t) eps`.
pub fn forward_diffuse(z0: &Latent, t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Latent> {
    check_len("forward_diffuse", z0.dim(), eps.len())?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::Param(format!(
            "forward_diffuse needs t in 1..={}, got {t}",
            schedule.steps()
        )));
    }
    Ok(Latent::new(forward_mix(&z0.values, eps, schedule.alpha_cum(t)), t))
}

pub(crate) fn forward_mix(z0: &[f64], eps: &[f64], alpha: f64) -> Vec<f64> {
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// One denoising step from `t` to `t - 1` with a caller-supplied noise estimate.
pub fn ddim_step_with_eps(z_t: &Latent, eps: &[f64], schedule: &NoiseSchedule) -> Result<Latent> {
    let t = z_t.t_index;
    check_reverse_index(schedule, t)?;
    check_len("ddim_step", z_t.dim(), eps.len())?;
    let out = Transition::reverse(schedule, t).apply(&z_t.values, eps);
    check_finite("ddim_step output", &out).map_err(|e| Error::at_step(t, e))?;
    Ok(Latent::new(out, t - 1))
}

/// The denoising step `f(z_t, t, cond)`.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_t: &Latent,
    cond: Condition,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let t = z_t.t_index;
    check_reverse_index(schedule, t)?;
    let eps =
        guided_eps(predictor, &z_t.values, &schedule.level(t), cond, guidance).map_err(|e| Error::at_step(t, e))?;
    ddim_step_with_eps(z_t, &eps, schedule)
}

/// The inversion step `f_inv(z_t, t, cond)`, landing on level `t + 1`.
pub fn ddim_inverse_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_t: &Latent,
    cond: Condition,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let t = z_t.t_index;
    check_inverse_index(schedule, t)?;
    let eps =
        guided_eps(predictor, &z_t.values, &schedule.level(t + 1), cond, guidance).map_err(|e| Error::at_step(t, e))?;
    check_len("ddim_inverse_step", z_t.dim(), eps.len())?;
    let out = Transition::inverse(schedule, t).apply(&z_t.values, &eps);
    check_finite("ddim_inverse_step output", &out).map_err(|e| Error::at_step(t, e))?;
    Ok(Latent::new(out, t + 1))
}

/// Denoises from `z_T` down to level 0. The returned sequence holds every
/// visited latent, `z_T` first and `z_0` last.
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z_big_t: &Latent,
    cond: Condition,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<(Latent, Vec<Latent>)> {
    if z_big_t.t_index != schedule.steps() {
        return Err(Error::Param(format!(
            "sampling starts at t = T = {}, latent is at {}",
            schedule.steps(),
            z_big_t.t_index
        )));
    }
    let mut visited = Vec::with_capacity(schedule.steps() + 1);
    visited.push(z_big_t.clone());
    let mut z = z_big_t.clone();
    for t in (1..=schedule.steps()).rev() {
        z = ddim_step(predictor, &z, cond, guidance, schedule).map_err(|e| match e {
            e @ Error::AtStep { .. } => e,
            other => Error::at_step(t, other),
        })?;
        visited.push(z.clone());
    }
    Ok((z, visited))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{LatentIndependentPredictor, ZeroPredictor};

    fn sched(steps: usize) -> NoiseSchedule {
        NoiseSchedule::default_with_steps(steps).unwrap()
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = NoiseSchedule::new(vec![0.99, 0.64, 0.1], vec![1, 2]).unwrap();
        let z0 = Latent::new(vec![1.5, -2.0, 0.25], 0);
        let eps = [0.3, 0.7, -1.1];
        let out = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        for i in 0..3 {
            assert!((out.values[i] - (0.8 * z0.values[i] + 0.6 * eps[i])).abs() < 1e-15);
        }
        let zero = Latent::new(vec![0.0; 3], 0);
        let out = forward_diffuse(&zero, 2, &eps, &s).unwrap();
        for i in 0..3 {
            assert_eq!(out.values[i], 0.9_f64.sqrt() * eps[i]);
        }
        assert!(forward_diffuse(&z0, 1, &[0.0; 2], &s).is_err());
        // noiseless identity at alpha = 1
        assert_eq!(forward_mix(&z0.values, &[0.0; 3], 1.0), z0.values);
    }

    #[test]
    fn zero_predictor_step_scales() {
        let s = sched(10);
        let p = ZeroPredictor { dim: 3 };
        let z = Latent::new(vec![1.0, -2.0, 3.0], 5);
        let down = ddim_step(&p, &z, Condition::Class(0), &GuidanceConfig::none(), &s).unwrap();
        let up = ddim_inverse_step(&p, &z, Condition::Class(0), &GuidanceConfig::none(), &s).unwrap();
        let r_down = (s.alpha_cum(4) / s.alpha_cum(5)).sqrt();
        let r_up = (s.alpha_cum(6) / s.alpha_cum(5)).sqrt();
        for i in 0..3 {
            assert_eq!(down.values[i], r_down * z.values[i]);
            assert_eq!(up.values[i], r_up * z.values[i]);
        }
        assert_eq!((down.t_index, up.t_index), (4, 6));
    }

    #[test]
    fn flat_transition_is_identity() {
        let tr = Transition::between(0.37, 0.37);
        assert_eq!(tr.latent_scale, 1.0);
        assert_eq!(tr.eps_scale, 0.0);
        assert_eq!(tr.apply(&[1.0, 2.0], &[100.0, -5.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn standard_normal_oracle_step_matches_hand_evaluation() {
        // For N(0, I) data the Bayes-optimal eps at level t is sqrt(1 - a_t) z.
        struct StdNormal;
        impl NoisePredictor for StdNormal {
            fn dim(&self) -> usize {
                2
            }
            fn eps(&self, z: &[f64], l: &crate::schedule::NoiseLevel, _: Condition) -> Result<Vec<f64>> {
                Ok(z.iter().map(|x| (1.0 - l.alpha_cum).sqrt() * x).collect())
            }
            fn vjp(&self, _: &[f64], _: &crate::schedule::NoiseLevel, _: Condition, v: &[f64]) -> Result<Vec<f64>> {
                Ok(v.to_vec())
            }
        }
        let s = sched(50);
        let z = Latent::new(vec![0.83, -1.27], 17);
        let out = ddim_step(&StdNormal, &z, Condition::Unconditional, &GuidanceConfig::none(), &s).unwrap();
        let (a_t, a_p) = (s.alpha_cum(17), s.alpha_cum(16));
        for i in 0..2 {
            let eps = (1.0 - a_t).sqrt() * z.values[i];
            let hand = (a_p / a_t).sqrt() * z.values[i]
                + a_p.sqrt() * ((1.0 / a_p - 1.0).sqrt() - (1.0 / a_t - 1.0).sqrt()) * eps;
            assert!((out.values[i] - hand).abs() <= 1e-15 * hand.abs().max(1.0));
        }
    }

    #[test]
    fn latent_independent_roundtrip_is_exact() {
        let s = sched(50);
        let p = LatentIndependentPredictor {
            base: vec![0.5, -1.0, 2.0],
            drift: vec![1.0, 0.3, -0.7],
            class_shift: 0.25,
        };
        let g = GuidanceConfig::none();
        for t in 0..50 {
            let z = Latent::new(vec![0.1 * t as f64, -3.0, 1e6], t);
            let up = ddim_inverse_step(&p, &z, Condition::Class(1), &g, &s).unwrap();
            let back = ddim_step(&p, &up, Condition::Class(1), &g, &s).unwrap();
            for (a, b) in back.values.iter().zip(&z.values) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn index_bounds() {
        let s = sched(5);
        let p = ZeroPredictor { dim: 1 };
        let g = GuidanceConfig::none();
        assert!(ddim_step(&p, &Latent::new(vec![1.0], 0), Condition::Class(0), &g, &s).is_err());
        assert!(ddim_inverse_step(&p, &Latent::new(vec![1.0], 5), Condition::Class(0), &g, &s).is_err());
        assert!(ddim_sample(&p, &Latent::new(vec![1.0], 4), Condition::Class(0), &g, &s).is_err());
    }

    #[test]
    fn sampling_with_zero_predictor_telescopes() {
        let s = sched(20);
        let p = ZeroPredictor { dim: 2 };
        let z_t = Latent::new(vec![2.0, -4.0], 20);
        let (z0, seq) = ddim_sample(&p, &z_t, Condition::Class(0), &GuidanceConfig::none(), &s).unwrap();
        assert_eq!(seq.len(), 21);
        assert_eq!(z0.t_index, 0);
        let r = (s.alpha_cum(0) / s.alpha_cum(20)).sqrt();
        for i in 0..2 {
            assert!((z0.values[i] - r * z_t.values[i]).abs() <= 1e-12 * (r * z_t.values[i]).abs());
        }
    }

    #[test]
    fn one_step_chain() {
        let s = sched(1);
        let p = LatentIndependentPredictor::constant(vec![0.3, 0.1]);
        let z = Latent::new(vec![1.0, 2.0], 1);
        let g = GuidanceConfig::none();
        let (z0, seq) = ddim_sample(&p, &z, Condition::Class(0), &g, &s).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(z0, ddim_step(&p, &z, Condition::Class(0), &g, &s).unwrap());
    }

    #[test]
    fn non_finite_predictor_is_attributed_to_step() {
        let s = sched(4);
        let p = LatentIndependentPredictor::constant(vec![f64::INFINITY]);
        let err = ddim_sample(
            &p,
            &Latent::new(vec![1.0], 4),
            Condition::Class(0),
            &GuidanceConfig::none(),
            &s,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtStep { t: 4, .. }), "{err}");
    }
}
