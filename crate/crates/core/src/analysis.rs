//! Reconstruction and editing from stored trajectories, noise-gap profiles and
//! gap/quality correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::ddim::{ddim_step, Latent};
use crate::error::{check_len, Error, Result};
use crate::guidance::{Condition, GuidanceConfig};
use crate::inversion::{ResidualSequence, Trajectory};
use crate::mixture::GaussianMixture;
use crate::predictor::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::vector::{add, mean_squared_diff, sub, NormMode};

/// Guided sampling from the trajectory's `z_T` under `cond`.
pub fn reconstruct<P: NoisePredictor + ?Sized>(
    predictor: &P,
    traj: &Trajectory,
    cond: Condition,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    edit(predictor, traj, cond, guidance, schedule, None)
}

/// Resamples from the trajectory's `z_T` under `cond_tgt`; with residuals,
/// `r_t` is added to the output of the step out of level `t`.
pub fn edit<P: NoisePredictor + ?Sized>(
    predictor: &P,
    traj: &Trajectory,
    cond_tgt: Condition,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    residuals: Option<&ResidualSequence>,
) -> Result<Latent> {
    traj.check_against(schedule)?;
    if let Some(r) = residuals {
        check_len("residual sequence", schedule.steps(), r.len())?;
        for step in &r.residuals {
            check_len("residual", traj.dim(), step.len())?;
        }
    }
    let mut z = traj.noise().clone();
    for t in (1..=schedule.steps()).rev() {
        let mut next = ddim_step(predictor, &z, cond_tgt, guidance, schedule).map_err(|e| Error::at_step(t, e))?;
        if let Some(r) = residuals {
            next.values = add(&next.values, r.at(t));
        }
        z = next;
    }
    Ok(z)
}

/// Per-step gaps between the source and target one-step predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    /// `gaps[t - 1]` belongs to the stored `z_t`.
    pub gaps: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub fixed_step: usize,
    pub gap_at_fixed_step: f64,
}

impl GapProfile {
    pub fn at(&self, t: usize) -> f64 {
        self.gaps[t - 1]
    }
}

/// Step nearest to 30/50 of the way through a `steps`-step schedule.
pub fn default_fixed_step(steps: usize) -> usize {
    ((30.0 * steps as f64 / 50.0).round() as usize).clamp(1, steps.max(1))
}

/// `gap_t = N(f(z_t, t, src) - f(z_t, t, tgt))` for every stored latent.
#[allow(clippy::too_many_arguments)]
pub fn noise_gap_profile<P: NoisePredictor + ?Sized>(
    predictor: &P,
    traj: &Trajectory,
    cond_src: Condition,
    cond_tgt: Condition,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    norm: NormMode,
    fixed_step: Option<usize>,
) -> Result<GapProfile> {
    traj.check_against(schedule)?;
    let steps = schedule.steps();
    let fixed_step = fixed_step.unwrap_or_else(|| default_fixed_step(steps));
    if fixed_step == 0 || fixed_step > steps {
        return Err(Error::Param(format!(
            "fixed analysis step {fixed_step} outside 1..={steps}"
        )));
    }
    let gaps = (1..=steps)
        .map(|t| {
            let z = traj.latent(t);
            let src = ddim_step(predictor, z, cond_src, guidance, schedule)?;
            if cond_src == cond_tgt {
                return Ok(0.0);
            }
            let tgt = ddim_step(predictor, z, cond_tgt, guidance, schedule)?;
            Ok(norm.apply(&sub(&src.values, &tgt.values)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = gaps.iter().sum::<f64>() / steps as f64;
    let max = gaps.iter().copied().fold(0.0, f64::max);
    Ok(GapProfile {
        gap_at_fixed_step: gaps[fixed_step - 1],
        gaps,
        mean,
        max,
        fixed_step,
    })
}

/// Negative log-likelihood of `z` under the data mixture of `cond`.
pub fn edit_fidelity_nll(gmm: &GaussianMixture, cond: Condition, z: &[f64]) -> Result<f64> {
    Ok(-gmm.marginal_at(1.0, cond)?.log_density(z)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditQuality {
    pub recon_mse: f64,
    pub edit_nll: f64,
    pub preservation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub edited: Latent,
    pub reconstructed: Latent,
    pub quality: EditQuality,
    pub profile: GapProfile,
}

/// Options shared by reconstruction, editing and the gap profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditSettings {
    pub guidance_recon: GuidanceConfig,
    pub guidance_edit: GuidanceConfig,
    /// Guidance of the gap profile's one-step predictions.
    pub guidance_gap: GuidanceConfig,
    pub norm: NormMode,
    pub fixed_step: Option<usize>,
}

impl Default for EditSettings {
    fn default() -> Self {
        EditSettings {
            guidance_recon: GuidanceConfig::none(),
            guidance_edit: GuidanceConfig::new(GuidanceConfig::EDIT_SCALE),
            guidance_gap: GuidanceConfig::none(),
            norm: NormMode::MeanSquares,
            fixed_step: None,
        }
    }
}

/// Reconstructs, edits and scores one trajectory against the oracle mixture.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_edit<P: NoisePredictor + ?Sized>(
    predictor: &P,
    gmm: &GaussianMixture,
    traj: &Trajectory,
    cond_src: Condition,
    cond_tgt: Condition,
    settings: &EditSettings,
    schedule: &NoiseSchedule,
    residuals: Option<&ResidualSequence>,
) -> Result<EditOutcome> {
    let reconstructed = edit(predictor, traj, cond_src, &settings.guidance_recon, schedule, residuals)?;
    let edited = edit(predictor, traj, cond_tgt, &settings.guidance_edit, schedule, residuals)?;
    let profile = noise_gap_profile(
        predictor,
        traj,
        cond_src,
        cond_tgt,
        &settings.guidance_gap,
        schedule,
        settings.norm,
        settings.fixed_step,
    )?;
    let z0 = &traj.source.values;
    let quality = EditQuality {
        recon_mse: mean_squared_diff(&reconstructed.values, z0),
        edit_nll: edit_fidelity_nll(gmm, cond_tgt, &edited.values)?,
        preservation_mse: mean_squared_diff(&edited.values, z0),
    };
    Ok(EditOutcome {
        edited,
        reconstructed,
        quality,
        profile,
    })
}

/// Sample statistics of `(gap, quality)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n: usize,
    /// Two-sided, from the t statistic with `n - 2` degrees of freedom.
    pub p_value_pearson: f64,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn gap_quality_correlation(records: &[(f64, f64)]) -> Result<Correlation> {
    let n = records.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 records, got {n}")));
    }
    if records.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Numeric("correlation input contains non-finite values".into()));
    }
    let x: Vec<f64> = records.iter().map(|r| r.0).collect();
    let y: Vec<f64> = records.iter().map(|r| r.1).collect();
    let undefined = || Error::UndefinedCorrelation("zero variance in one coordinate".into());
    let r = pearson(&x, &y).ok_or_else(undefined)?;
    let rho = pearson(&ranks(&x), &ranks(&y)).ok_or_else(undefined)?;
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
        (2.0 * dist.cdf(-t.abs())).min(1.0)
    };
    Ok(Correlation {
        pearson_r: r,
        spearman_rho: rho,
        n,
        p_value_pearson: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::{compute_residuals, ddim_invert, enm_invert, RefinementConfig};
    use crate::mixture::Component;
    use crate::predictor::LatentIndependentPredictor;

    fn two_class() -> GaussianMixture {
        let comp = |weight, mean: Vec<f64>, sigma, class| Component {
            weight,
            mean,
            sigma,
            class,
        };
        GaussianMixture::new(
            2,
            vec![
                comp(0.25, vec![-1.5, 0.5], 0.5, 0),
                comp(0.25, vec![-1.5, -0.5], 0.5, 0),
                comp(0.5, vec![1.5, 0.0], 0.5, 1),
            ],
        )
        .unwrap()
    }

    fn single_class() -> GaussianMixture {
        GaussianMixture::new(
            2,
            vec![
                Component {
                    weight: 0.6,
                    mean: vec![0.5, 0.0],
                    sigma: 0.4,
                    class: 3,
                },
                Component {
                    weight: 0.4,
                    mean: vec![-0.5, 0.3],
                    sigma: 0.6,
                    class: 3,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn latent_independent_reconstruction_is_exact() {
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let p = LatentIndependentPredictor {
            base: vec![0.3, -0.1],
            drift: vec![1.0, 0.5],
            class_shift: 0.2,
        };
        let z0 = Latent::new(vec![0.9, -1.1], 0);
        let g = GuidanceConfig::none();
        let traj = ddim_invert(&p, &z0, Condition::Class(1), &s, &g).unwrap();
        let rec = reconstruct(&p, &traj, Condition::Class(1), &g, &s).unwrap();
        for (a, b) in rec.values.iter().zip(&z0.values) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn editing_to_source_is_reconstruction() {
        let gmm = two_class();
        let s = NoiseSchedule::default_with_steps(20).unwrap();
        let g = GuidanceConfig::none();
        let traj = ddim_invert(&gmm, &Latent::new(vec![-1.4, 0.3], 0), Condition::Class(0), &s, &g).unwrap();
        let a = reconstruct(&gmm, &traj, Condition::Class(0), &g, &s).unwrap();
        let b = edit(&gmm, &traj, Condition::Class(0), &g, &s, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residuals_telescope_to_source() {
        let gmm = two_class();
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let g = GuidanceConfig::none();
        let z0 = Latent::new(vec![-1.4, 0.3], 0);
        let traj = ddim_invert(&gmm, &z0, Condition::Class(0), &s, &g).unwrap();
        let r = compute_residuals(&gmm, &traj, Condition::Class(0), &s).unwrap();
        let out = edit(&gmm, &traj, Condition::Class(0), &g, &s, Some(&r)).unwrap();
        for (a, b) in out.values.iter().zip(&z0.values) {
            assert!((a - b).abs() <= 1e-10);
        }
        let short = ResidualSequence {
            residuals: r.residuals[1..].to_vec(),
        };
        assert!(matches!(
            edit(&gmm, &traj, Condition::Class(0), &g, &s, Some(&short)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn single_class_guidance_collapses() {
        let gmm = single_class();
        let s = NoiseSchedule::default_with_steps(20).unwrap();
        let traj = ddim_invert(
            &gmm,
            &Latent::new(vec![0.2, 0.1], 0),
            Condition::Class(3),
            &s,
            &GuidanceConfig::none(),
        )
        .unwrap();
        let a = reconstruct(&gmm, &traj, Condition::Class(3), &GuidanceConfig::none(), &s).unwrap();
        let b = reconstruct(&gmm, &traj, Condition::Class(3), &GuidanceConfig::new(7.5), &s).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-12);
        }
        let gap = noise_gap_profile(
            &gmm,
            &traj,
            Condition::Class(3),
            Condition::Unconditional,
            &GuidanceConfig::none(),
            &s,
            NormMode::MeanSquares,
            None,
        )
        .unwrap();
        assert!(gap.gaps.iter().all(|g| *g <= 1e-28));
    }

    #[test]
    fn gap_profile_shape() {
        let gmm = two_class();
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let g = GuidanceConfig::none();
        let traj = ddim_invert(&gmm, &Latent::new(vec![-1.4, 0.3], 0), Condition::Class(0), &s, &g).unwrap();
        let same = noise_gap_profile(
            &gmm,
            &traj,
            Condition::Class(0),
            Condition::Class(0),
            &g,
            &s,
            NormMode::L2,
            None,
        )
        .unwrap();
        assert!(same.gaps.iter().all(|x| *x == 0.0));
        let p = noise_gap_profile(
            &gmm,
            &traj,
            Condition::Class(0),
            Condition::Class(1),
            &g,
            &s,
            NormMode::L2,
            None,
        )
        .unwrap();
        assert_eq!(p.gaps.len(), 50);
        assert_eq!(p.fixed_step, 30);
        assert_eq!(p.gap_at_fixed_step, p.at(30));
        assert!(p.gaps.iter().all(|x| *x > 0.0));
        assert!(p.max >= p.mean);
    }

    #[test]
    fn fixed_step_defaults() {
        assert_eq!(default_fixed_step(50), 30);
        assert_eq!(default_fixed_step(20), 12);
        assert_eq!(default_fixed_step(1), 1);
        assert_eq!(default_fixed_step(10), 6);
    }

    #[test]
    fn refined_reconstruction_is_no_worse() {
        let gmm = two_class();
        let s = NoiseSchedule::default_with_steps(50).unwrap();
        let g = GuidanceConfig::none();
        let z0 = Latent::new(vec![-1.7, 0.9], 0);
        let ddim = ddim_invert(&gmm, &z0, Condition::Class(0), &s, &g).unwrap();
        let cfg = RefinementConfig {
            lambda: 0.0,
            tau: 1e-300,
            ..RefinementConfig::default()
        };
        let enm = enm_invert(&gmm, &z0, Condition::Class(0), Condition::Class(1), &cfg, &s, &g).unwrap();
        let mse = |t: &Trajectory| {
            mean_squared_diff(
                &reconstruct(&gmm, t, Condition::Class(0), &g, &s).unwrap().values,
                &z0.values,
            )
        };
        assert!(mse(&enm) <= mse(&ddim), "{} vs {}", mse(&enm), mse(&ddim));
    }

    #[test]
    fn nll_at_standard_normal_mode() {
        let gmm = GaussianMixture::new(
            2,
            vec![Component {
                weight: 1.0,
                mean: vec![1.0, 2.0],
                sigma: 1.0,
                class: 0,
            }],
        )
        .unwrap();
        let nll = edit_fidelity_nll(&gmm, Condition::Class(0), &[1.0, 2.0]).unwrap();
        assert!((nll - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn correlation_textbook_cases() {
        let up: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        let c = gap_quality_correlation(&up).unwrap();
        assert!((c.pearson_r - 1.0).abs() <= 1e-12);
        assert!((c.spearman_rho - 1.0).abs() <= 1e-12);
        let down: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, -(i as f64))).collect();
        let c = gap_quality_correlation(&down).unwrap();
        assert!((c.pearson_r + 1.0).abs() <= 1e-12);
        assert!((c.spearman_rho + 1.0).abs() <= 1e-12);
        assert_eq!(c.p_value_pearson, 0.0);
    }

    #[test]
    fn correlation_p_value_matches_reference() {
        // x = 1..8, y with noise; r and p from an independent t-distribution
        // evaluation.
        let ys = [2.1, 1.9, 3.5, 3.0, 5.2, 4.1, 6.8, 5.9];
        let recs: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, y)| ((i + 1) as f64, *y)).collect();
        let c = gap_quality_correlation(&recs).unwrap();
        assert!((c.pearson_r - REF_R).abs() < 1e-12, "{}", c.pearson_r);
        assert!((c.p_value_pearson - REF_P).abs() < 1e-9, "{}", c.p_value_pearson);
        assert!((c.spearman_rho - REF_RHO).abs() < 1e-12, "{}", c.spearman_rho);
    }

    const REF_R: f64 = 0.9034838835222544;
    const REF_P: f64 = 0.0020881419362873683;
    const REF_RHO: f64 = 0.9047619047619048;

    #[test]
    fn correlation_ties_and_errors() {
        let r = ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert!(matches!(
            gap_quality_correlation(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(gap_quality_correlation(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }
}
