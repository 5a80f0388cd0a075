//! Class-conditional isotropic Gaussian mixtures and their exact scores.
//!
//! Pushing a mixture through the forward process keeps it a mixture:
//! component `k` becomes `N(sqrt(a) mu_k, (a sigma_k^2 + 1 - a) I)`. The
//! Bayes-optimal noise predictor is then available in closed form,
//!
//! ```text
//! eps*(z) = -sqrt(1 - a) grad log p_a(z),   grad log p_a(z) = sum_k gamma_k (m_k - z) / v_k
//! ```
//!
//! and so is its Jacobian, which is `-sqrt(1 - a)` times the Hessian of the
//! log density:
//!
//! ```text
//! H = -(sum_k gamma_k / v_k) I + sum_k gamma_k u_k u_k^T - s s^T,   u_k = (m_k - z) / v_k
//! ```
//!
//! All mixture sums are evaluated in log space.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::guidance::Condition;
use crate::predictor::NoisePredictor;
use crate::schedule::{NoiseLevel, NoiseSchedule};
use crate::vector::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub class: u32,
}

impl Component {
    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// An immutable class-conditional mixture. Global weights sum to one; a
/// class selects its own components with weights renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    class_priors: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// A mixture at one noise level, restricted to one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub dim: usize,
    pub components: Vec<MarginalComponent>,
}

/// Responsibilities and score of a marginal at one point.
struct Posterior {
    gammas: Vec<f64>,
    log_density: f64,
}

impl Marginal {
    fn log_terms(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let sq: f64 = z.iter().zip(&c.mean).map(|(x, m)| (x - m) * (x - m)).sum();
                c.weight.ln() - 0.5 * sq / c.variance - 0.5 * d * (2.0 * PI * c.variance).ln()
            })
            .collect()
    }

    fn posterior(&self, z: &[f64]) -> Posterior {
        let terms = self.log_terms(z);
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = terms.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Posterior {
            gammas: weights.iter().map(|w| w / total).collect(),
            log_density: max + total.ln(),
        }
    }

    /// `log sum_k w_k N(z; m_k, v_k I)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_len("log_density", self.dim, z.len())?;
        Ok(self.posterior(z).log_density)
    }

    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("responsibilities", self.dim, z.len())?;
        Ok(self.posterior(z).gammas)
    }

    /// `grad_z log p(z)`.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("score", self.dim, z.len())?;
        let post = self.posterior(z);
        Ok(self.score_from(z, &post.gammas))
    }

    fn score_from(&self, z: &[f64], gammas: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        for (c, g) in self.components.iter().zip(gammas) {
            for i in 0..self.dim {
                s[i] += g * (c.mean[i] - z[i]) / c.variance;
            }
        }
        s
    }

    /// Hessian of `log p` at `z` applied to `v` (the Hessian is symmetric).
    pub fn score_jacobian_vec(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len("score_jacobian_vec", self.dim, z.len())?;
        check_len("score_jacobian_vec", self.dim, v.len())?;
        let post = self.posterior(z);
        let s = self.score_from(z, &post.gammas);
        let mut out = vec![0.0; self.dim];
        let mut diag = 0.0;
        for (c, g) in self.components.iter().zip(&post.gammas) {
            if *g == 0.0 {
                continue;
            }
            diag += g / c.variance;
            let u: Vec<f64> = c.mean.iter().zip(z).map(|(m, x)| (m - x) / c.variance).collect();
            let uv = g * dot(&u, v);
            for i in 0..self.dim {
                out[i] += uv * u[i];
            }
        }
        let sv = dot(&s, v);
        for i in 0..self.dim {
            out[i] += -diag * v[i] - sv * s[i];
        }
        Ok(out)
    }
}

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::MixtureSpec {
                path: "d".into(),
                message: "dimension must be positive".into(),
            });
        }
        if components.is_empty() {
            return Err(Error::MixtureSpec {
                path: "classes".into(),
                message: "at least one component is required".into(),
            });
        }
        for (k, c) in components.iter().enumerate() {
            let path = |field: &str| format!("components[{k}].{field}");
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::MixtureSpec {
                    path: path("w"),
                    message: format!("weight must be positive, got {}", c.weight),
                });
            }
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(Error::MixtureSpec {
                    path: path("sigma"),
                    message: format!("sigma must be positive, got {}", c.sigma),
                });
            }
            if c.mean.len() != dim {
                return Err(Error::MixtureSpec {
                    path: path("mean"),
                    message: format!("expected {dim} entries, got {}", c.mean.len()),
                });
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::MixtureSpec {
                    path: path("mean"),
                    message: "entries must be finite".into(),
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::MixtureSpec {
                path: "classes[*].components[*].w".into(),
                message: format!("weights must sum to 1, got {total}"),
            });
        }
        let components: Vec<Component> = components
            .into_iter()
            .map(|c| Component {
                weight: c.weight / total,
                ..c
            })
            .collect();
        let mut class_priors = BTreeMap::new();
        for c in &components {
            *class_priors.entry(c.class).or_insert(0.0) += c.weight;
        }
        Ok(GaussianMixture {
            dim,
            components,
            class_priors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn class_priors(&self) -> &BTreeMap<u32, f64> {
        &self.class_priors
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.class_priors.keys().copied().collect()
    }

    fn resolve(&self, cond: Condition) -> Result<(Vec<&Component>, f64)> {
        match cond {
            Condition::Unconditional => Ok((self.components.iter().collect(), 1.0)),
            Condition::Class(id) => {
                let prior = *self.class_priors.get(&id).ok_or(Error::UnknownClass(id))?;
                Ok((self.components.iter().filter(|c| c.class == id).collect(), prior))
            }
        }
    }

    /// The mixture after forward diffusion to signal level `alpha`.
    pub fn marginal_at(&self, alpha: f64, cond: Condition) -> Result<Marginal> {
        let (components, prior) = self.resolve(cond)?;
        let root = alpha.sqrt();
        Ok(Marginal {
            dim: self.dim,
            components: components
                .into_iter()
                .map(|c| MarginalComponent {
                    weight: c.weight / prior,
                    mean: c.mean.iter().map(|m| root * m).collect(),
                    variance: alpha * c.variance() + (1.0 - alpha),
                })
                .collect(),
        })
    }

    pub fn marginal(&self, t: usize, cond: Condition, schedule: &NoiseSchedule) -> Result<Marginal> {
        self.marginal_at(schedule.alpha_cum(t), cond)
    }

    /// Bayes-optimal `eps*(z)` at signal level `alpha`.
    pub fn oracle_eps(&self, z: &[f64], alpha: f64, cond: Condition) -> Result<Vec<f64>> {
        let score = self.marginal_at(alpha, cond)?.score(z)?;
        let k = -(1.0 - alpha).sqrt();
        Ok(score.into_iter().map(|s| k * s).collect())
    }

    /// `v^T d eps* / d z` at signal level `alpha`.
    pub fn oracle_eps_vjp(&self, z: &[f64], alpha: f64, cond: Condition, v: &[f64]) -> Result<Vec<f64>> {
        let hv = self.marginal_at(alpha, cond)?.score_jacobian_vec(z, v)?;
        let k = -(1.0 - alpha).sqrt();
        Ok(hv.into_iter().map(|x| k * x).collect())
    }

    /// Draws a point from the (class-restricted) data distribution.
    pub fn sample<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<Vec<f64>> {
        let (components, prior) = self.resolve(cond)?;
        let u: f64 = rng.random::<f64>() * prior;
        let mut acc = 0.0;
        let mut chosen = components[components.len() - 1];
        for c in &components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        Ok(chosen
            .mean
            .iter()
            .map(|m| {
                let n: f64 = rng.sample(StandardNormal);
                m + chosen.sigma * n
            })
            .collect())
    }

    /// [`GaussianMixture::sample`] from a fresh ChaCha8 stream seeded with `seed`.
    pub fn sample_seeded(&self, cond: Condition, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(cond, &mut rng)
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        if spec.classes.is_empty() {
            return Err(Error::MixtureSpec {
                path: "classes".into(),
                message: "at least one class is required".into(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut components = Vec::new();
        for (ci, class) in spec.classes.iter().enumerate() {
            if !seen.insert(class.id) {
                return Err(Error::MixtureSpec {
                    path: format!("classes[{ci}].id"),
                    message: format!("duplicate class id {}", class.id),
                });
            }
            if class.components.is_empty() {
                return Err(Error::MixtureSpec {
                    path: format!("classes[{ci}].components"),
                    message: "each class needs at least one component".into(),
                });
            }
            for c in &class.components {
                components.push(Component {
                    weight: c.w,
                    mean: c.mean.clone(),
                    sigma: c.sigma,
                    class: class.id,
                });
            }
        }
        GaussianMixture::new(spec.d, components).map_err(|e| match e {
            Error::MixtureSpec { path, message } => Error::MixtureSpec {
                path: spec_path(spec, &path),
                message,
            },
            other => other,
        })
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            d: self.dim,
            classes: self
                .class_priors
                .keys()
                .map(|&id| ClassSpec {
                    id,
                    components: self
                        .components
                        .iter()
                        .filter(|c| c.class == id)
                        .map(|c| ComponentSpec {
                            w: c.weight,
                            mean: c.mean.clone(),
                            sigma: c.sigma,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(json).map_err(|e| Error::MixtureSpec {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::from_spec(&spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Smallest and largest coordinate of the componentwise `mean +- 3 sigma` boxes.
    pub fn bounding_box(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.components {
            for m in &c.mean {
                lo = lo.min(m - 3.0 * c.sigma);
                hi = hi.max(m + 3.0 * c.sigma);
            }
        }
        (lo, hi)
    }
}

/// Translates a flat `components[k].field` path back to the file's nested layout.
fn spec_path(spec: &MixtureSpec, flat: &str) -> String {
    let Some(rest) = flat.strip_prefix("components[") else {
        return flat.to_string();
    };
    let Some((index, field)) = rest.split_once(']') else {
        return flat.to_string();
    };
    let Ok(mut k) = index.parse::<usize>() else {
        return flat.to_string();
    };
    for (ci, class) in spec.classes.iter().enumerate() {
        if k < class.components.len() {
            return format!("classes[{ci}].components[{k}]{field}");
        }
        k -= class.components.len();
    }
    flat.to_string()
}

impl NoisePredictor for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eps(&self, z: &[f64], level: &NoiseLevel, cond: Condition) -> Result<Vec<f64>> {
        self.oracle_eps(z, level.alpha_cum, cond)
    }

    fn vjp(&self, z: &[f64], level: &NoiseLevel, cond: Condition, v: &[f64]) -> Result<Vec<f64>> {
        self.oracle_eps_vjp(z, level.alpha_cum, cond, v)
    }
}

/// On-disk mixture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub d: usize,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: u32,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub w: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}
