//! Trajectory dumps: pretty JSON, or a JSON header followed by raw
//! little-endian `f64` blocks.
//!
//! Binary layout: the 8-byte magic, the header length as a little-endian
//! `u64`, the header JSON, then `T + 1` blocks of `d` values (the source
//! followed by `z_1 .. z_T`).

use anyhow::{bail, ensure, Context, Result};
use enm_core::inversion::{Method, StepRecord};
use enm_core::{Condition, GuidanceConfig, Latent, RefinementConfig, Trajectory};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"ENMTRAJ\x01";

/// Enough to rebuild the schedule a trajectory was inverted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub schedule: ScheduleSpec,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Conditions {
    source: Condition,
    target: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(rename = "T")]
    steps: usize,
    d: usize,
    method: Method,
    config: Option<RefinementConfig>,
    fixed_point_iters: Option<usize>,
    conditions: Conditions,
    guidance: GuidanceConfig,
    schedule: ScheduleSpec,
    per_step: Vec<StepRecord>,
}

pub fn to_json(file: &TrajectoryFile) -> Result<String> {
    Ok(serde_json::to_string_pretty(file)?)
}

pub fn to_binary(file: &TrajectoryFile) -> Result<Vec<u8>> {
    let traj = &file.trajectory;
    let header = Header {
        steps: traj.steps(),
        d: traj.dim(),
        method: traj.method,
        config: traj.config,
        fixed_point_iters: traj.fixed_point_iters,
        conditions: Conditions {
            source: traj.cond_src,
            target: traj.cond_tgt,
        },
        guidance: traj.guidance,
        schedule: file.schedule,
        per_step: traj.per_step.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * traj.dim() * (traj.steps() + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in 0..=traj.steps() {
        let z = traj.latent(t);
        ensure!(z.dim() == traj.dim(), "latent {t} has dimension {}", z.dim());
        for v in &z.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_binary(bytes: &[u8]) -> Result<TrajectoryFile> {
    ensure!(
        bytes.len() >= 16 && bytes[..8] == MAGIC[..],
        "not a binary trajectory dump"
    );
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    ensure!(body.len() >= len, "truncated header");
    let header: Header = serde_json::from_slice(&body[..len]).context("trajectory header")?;
    let data = &body[len..];
    let expected = 8 * header.d * (header.steps + 1);
    if data.len() != expected {
        bail!("expected {expected} bytes of latents, found {}", data.len());
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut blocks = values.chunks(header.d.max(1)).map(<[f64]>::to_vec);
    let mut next = |t| {
        Latent::new(
            if header.d == 0 {
                Vec::new()
            } else {
                blocks.next().unwrap_or_default()
            },
            t,
        )
    };
    let source = next(0);
    let latents = (1..=header.steps).map(&mut next).collect();
    ensure!(header.per_step.len() == header.steps, "per-step records do not match T");
    Ok(TrajectoryFile {
        schedule: header.schedule,
        trajectory: Trajectory {
            method: header.method,
            source,
            latents,
            per_step: header.per_step,
            config: header.config,
            fixed_point_iters: header.fixed_point_iters,
            cond_src: header.conditions.source,
            cond_tgt: header.conditions.target,
            guidance: header.guidance,
        },
    })
}

/// Accepts either encoding.
pub fn decode(bytes: &[u8]) -> Result<TrajectoryFile> {
    if bytes.starts_with(MAGIC) {
        from_binary(bytes)
    } else {
        Ok(serde_json::from_slice(bytes).context("trajectory JSON")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use enm_core::inversion::enm_invert;
    use enm_core::schedule::{build_linear_schedule, subsample_schedule};
    use enm_core::GaussianMixture;

    fn sample() -> TrajectoryFile {
        let gmm = GaussianMixture::from_json(enm_bench::config::DEFAULT_MIXTURE).unwrap();
        let train = build_linear_schedule(1000, 0.00085, 0.012).unwrap();
        let schedule = subsample_schedule(&train, 6).unwrap();
        let z0 = Latent::new(gmm.sample_seeded(Condition::Class(0), 3).unwrap(), 0);
        let traj = enm_invert(
            &gmm,
            &z0,
            Condition::Class(0),
            Condition::Class(1),
            &RefinementConfig::default(),
            &schedule,
            &GuidanceConfig::none(),
        )
        .unwrap();
        TrajectoryFile {
            schedule: ScheduleSpec {
                train_steps: 1000,
                beta_start: 0.00085,
                beta_end: 0.012,
                steps: 6,
            },
            trajectory: traj,
        }
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let file = sample();
        let bytes = to_binary(&file).unwrap();
        assert_eq!(decode(&bytes).unwrap(), file);
        let json = to_json(&file).unwrap();
        assert_eq!(decode(json.as_bytes()).unwrap(), file);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let bytes = to_binary(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(b"{}").is_err());
    }
}
