use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// What the predictor is conditioned on: one class of the data model, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Class(u32),
    Unconditional,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Class(id) => write!(f, "class:{id}"),
            Condition::Unconditional => f.write_str("uncond"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// Accepts `uncond`, `unconditional`, `class:3` or a bare class id.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uncond") || s.eq_ignore_ascii_case("unconditional") {
            return Ok(Condition::Unconditional);
        }
        let id = s.strip_prefix("class:").unwrap_or(s);
        id.parse()
            .map(Condition::Class)
            .map_err(|_| Error::Param(format!("cannot parse condition `{s}`")))
    }
}

/// Classifier-free guidance weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub enabled: bool,
}

impl GuidanceConfig {
    pub const EDIT_SCALE: f64 = 7.5;

    pub fn new(scale: f64) -> Self {
        GuidanceConfig { scale, enabled: true }
    }

    /// Plain conditional prediction.
    pub fn none() -> Self {
        GuidanceConfig {
            scale: 1.0,
            enabled: false,
        }
    }

    /// True when the guided prediction is just the conditional branch.
    pub fn is_identity(&self) -> bool {
        !self.enabled || self.scale == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale >= 0.0 && self.scale.is_finite() {
            Ok(())
        } else {
            Err(Error::Param(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.scale
            )))
        }
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig::none()
    }
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], guidance: &GuidanceConfig) -> Result<Vec<f64>> {
    check_len("cfg_combine", eps_uncond.len(), eps_cond.len())?;
    if guidance.is_identity() {
        return Ok(eps_cond.to_vec());
    }
    let w = guidance.scale;
    if w == 0.0 {
        return Ok(eps_uncond.to_vec());
    }
    Ok(eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + w * (c - u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale_is_conditional() {
        let u = [0.3, -2.0, 1e-17];
        let c = [0.1, 5.0, -3.0];
        assert_eq!(cfg_combine(&u, &c, &GuidanceConfig::new(1.0)).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, &GuidanceConfig::none()).unwrap(), c);
    }

    #[test]
    fn zero_scale_is_unconditional() {
        let u = [0.3, -2.0];
        let c = [0.1, 5.0];
        assert_eq!(cfg_combine(&u, &c, &GuidanceConfig::new(0.0)).unwrap(), u);
    }

    #[test]
    fn edit_scale() {
        let out = cfg_combine(&[0.0, 0.0], &[1.0, -1.0], &GuidanceConfig::new(7.5)).unwrap();
        assert_eq!(out, vec![7.5, -7.5]);
    }

    #[test]
    fn dimension_mismatch() {
        let err = cfg_combine(&[0.0], &[1.0, 2.0], &GuidanceConfig::new(2.0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn condition_parsing() {
        assert_eq!("uncond".parse::<Condition>().unwrap(), Condition::Unconditional);
        assert_eq!("class:2".parse::<Condition>().unwrap(), Condition::Class(2));
        assert_eq!("7".parse::<Condition>().unwrap(), Condition::Class(7));
        assert!("dog".parse::<Condition>().is_err());
        assert_eq!(Condition::Class(4).to_string(), "class:4");
    }
}
