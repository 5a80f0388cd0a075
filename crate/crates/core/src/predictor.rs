//! The noise-predictor contract and a few reference implementations.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{check_len, Error, Result};
use crate::guidance::{cfg_combine, Condition, GuidanceConfig};
use crate::schedule::NoiseLevel;

/// An epsilon-prediction model together with its vector-Jacobian product.
pub trait NoisePredictor: Send + Sync {
    /// Dimension of the latents this predictor accepts.
    fn dim(&self) -> usize;

    fn eps(&self, z: &[f64], level: &NoiseLevel, cond: Condition) -> Result<Vec<f64>>;

    /// `v^T (d eps / d z)` evaluated at `z`.
    fn vjp(&self, z: &[f64], level: &NoiseLevel, cond: Condition, v: &[f64]) -> Result<Vec<f64>>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eps(&self, z: &[f64], level: &NoiseLevel, cond: Condition) -> Result<Vec<f64>> {
        (**self).eps(z, level, cond)
    }
    fn vjp(&self, z: &[f64], level: &NoiseLevel, cond: Condition, v: &[f64]) -> Result<Vec<f64>> {
        (**self).vjp(z, level, cond, v)
    }
}

/// Guided prediction `eps_u + w (eps_c - eps_u)`; a single conditional call when
/// the guidance is the identity.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &[f64],
    level: &NoiseLevel,
    cond: Condition,
    guidance: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let cond_eps = predictor.eps(z, level, cond)?;
    check_len("predictor output", z.len(), cond_eps.len())?;
    if guidance.is_identity() {
        return Ok(cond_eps);
    }
    let uncond_eps = predictor.eps(z, level, Condition::Unconditional)?;
    check_len("predictor output", z.len(), uncond_eps.len())?;
    cfg_combine(&uncond_eps, &cond_eps, guidance)
}

/// VJP of [`guided_eps`].
pub fn guided_vjp<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &[f64],
    level: &NoiseLevel,
    cond: Condition,
    v: &[f64],
    guidance: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let cond_vjp = predictor.vjp(z, level, cond, v)?;
    if guidance.is_identity() {
        return Ok(cond_vjp);
    }
    let uncond_vjp = predictor.vjp(z, level, Condition::Unconditional, v)?;
    cfg_combine(&uncond_vjp, &cond_vjp, guidance)
}

/// Central-difference estimate of `v^T (d eps / d z)`, one coordinate at a
/// time (`2 d` predictor evaluations).
pub fn finite_difference_vjp<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &[f64],
    level: &NoiseLevel,
    cond: Condition,
    v: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Param(format!("finite-difference step must be > 0, got {h}")));
    }
    check_len("finite_difference_vjp", z.len(), v.len())?;
    let mut probe = z.to_vec();
    let mut out = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let zi = probe[i];
        probe[i] = zi + h;
        let plus = predictor.eps(&probe, level, cond)?;
        probe[i] = zi - h;
        let minus = predictor.eps(&probe, level, cond)?;
        probe[i] = zi;
        for (side, vals) in [("+", &plus), ("-", &minus)] {
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "predictor output non-finite at probe z {side} h*e_{i}"
                )));
            }
        }
        let column: f64 = v
            .iter()
            .zip(plus.iter().zip(&minus))
            .map(|(vj, (p, m))| vj * (p - m))
            .sum();
        out.push(column / (2.0 * h));
    }
    Ok(out)
}

/// Wraps any predictor and replaces its VJP by central differences.
pub struct FiniteDifference<P> {
    pub inner: P,
    pub h: f64,
}

impl<P: NoisePredictor> NoisePredictor for FiniteDifference<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eps(&self, z: &[f64], level: &NoiseLevel, cond: Condition) -> Result<Vec<f64>> {
        self.inner.eps(z, level, cond)
    }
    fn vjp(&self, z: &[f64], level: &NoiseLevel, cond: Condition, v: &[f64]) -> Result<Vec<f64>> {
        finite_difference_vjp(&self.inner, z, level, cond, v, self.h)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub dim: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eps(&self, z: &[f64], _: &NoiseLevel, _: Condition) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.len()])
    }
    fn vjp(&self, z: &[f64], _: &NoiseLevel, _: Condition, _: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.len()])
    }
}

/// A latent-independent predictor: `eps = base + level.alpha_cum * drift`,
/// shifted per class by `class_shift * id`. Time- and condition-dependent but
/// constant in `z`, so DDIM inversion is exact for it.
#[derive(Debug, Clone)]
pub struct LatentIndependentPredictor {
    pub base: Vec<f64>,
    pub drift: Vec<f64>,
    pub class_shift: f64,
}

impl LatentIndependentPredictor {
    pub fn constant(eps: Vec<f64>) -> Self {
        let d = eps.len();
        LatentIndependentPredictor {
            base: eps,
            drift: vec![0.0; d],
            class_shift: 0.0,
        }
    }
}

impl NoisePredictor for LatentIndependentPredictor {
    fn dim(&self) -> usize {
        self.base.len()
    }
    fn eps(&self, z: &[f64], level: &NoiseLevel, cond: Condition) -> Result<Vec<f64>> {
        check_len("latent", self.base.len(), z.len())?;
        let shift = match cond {
            Condition::Class(id) => self.class_shift * id as f64,
            Condition::Unconditional => 0.0,
        };
        Ok(self
            .base
            .iter()
            .zip(&self.drift)
            .map(|(b, d)| b + level.alpha_cum * d + shift)
            .collect())
    }
    fn vjp(&self, z: &[f64], _: &NoiseLevel, _: Condition, _: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.len()])
    }
}

/// `eps(z) = A z + b`, with `A` stored row-major.
#[derive(Debug, Clone)]
pub struct AffinePredictor {
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl NoisePredictor for AffinePredictor {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn eps(&self, z: &[f64], _: &NoiseLevel, _: Condition) -> Result<Vec<f64>> {
        let d = self.offset.len();
        check_len("latent", d, z.len())?;
        Ok((0..d)
            .map(|i| {
                let row = &self.matrix[i * d..(i + 1) * d];
                row.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + self.offset[i]
            })
            .collect())
    }
    fn vjp(&self, z: &[f64], _: &NoiseLevel, _: Condition, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.offset.len();
        check_len("latent", d, z.len())?;
        check_len("cotangent", d, v.len())?;
        Ok((0..d)
            .map(|j| (0..d).map(|i| v[i] * self.matrix[i * d + j]).sum())
            .collect())
    }
}

/// Counts `eps` calls per condition; used to audit how often a routine queries
/// the model.
pub struct CountingPredictor<P> {
    pub inner: P,
    counts: Mutex<HashMap<Condition, usize>>,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        CountingPredictor {
            inner,
            counts: Mutex::new(HashMap::new()),
        }
    }

    pub fn eps_calls(&self, cond: Condition) -> usize {
        self.counts.lock().unwrap().get(&cond).copied().unwrap_or(0)
    }

    pub fn reset(&self) {
        self.counts.lock().unwrap().clear();
    }
}

impl<P: NoisePredictor> NoisePredictor for CountingPredictor<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eps(&self, z: &[f64], level: &NoiseLevel, cond: Condition) -> Result<Vec<f64>> {
        *self.counts.lock().unwrap().entry(cond).or_insert(0) += 1;
        self.inner.eps(z, level, cond)
    }
    fn vjp(&self, z: &[f64], level: &NoiseLevel, cond: Condition, v: &[f64]) -> Result<Vec<f64>> {
        self.inner.vjp(z, level, cond, v)
    }
}
