//! Deterministic DDIM sampling and inversion, editable noise-map refinement,
//! and closed-form Gaussian-mixture noise predictors to test them against.

pub mod analysis;
pub mod ddim;
pub mod error;
pub mod guidance;
pub mod inversion;
pub mod mixture;
pub mod predictor;
pub mod schedule;
pub mod vector;

pub use ddim::{ddim_inverse_step, ddim_sample, ddim_step, forward_diffuse, Latent};
pub use error::{Error, Result};
pub use guidance::{cfg_combine, Condition, GuidanceConfig};
pub use inversion::{Method, RefinementConfig, StepRecord, Trajectory};
pub use mixture::GaussianMixture;
pub use predictor::NoisePredictor;
pub use schedule::{build_linear_schedule, subsample_schedule, NoiseLevel, NoiseSchedule};
pub use vector::NormMode;
