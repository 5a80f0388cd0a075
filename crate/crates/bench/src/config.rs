use std::path::{Path, PathBuf};

use enm_core::inversion::Method;
use enm_core::schedule::{
    build_linear_schedule, subsample_schedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_INFERENCE_STEPS,
    DEFAULT_TRAIN_STEPS,
};
use enm_core::{GaussianMixture, GuidanceConfig, NoiseSchedule, RefinementConfig};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const DEFAULT_MIXTURE: &str = include_str!("../assets/default_d8.json");
pub const IMAGE_MIXTURE: &str = include_str!("../assets/image_d64.json");

/// Everything that determines a benchmark run. Missing JSON fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Mixture spec file; the bundled suite is used when absent.
    pub mixture: Option<PathBuf>,
    /// Use the bundled 64-dimensional (8x8) suite instead of the 8-dimensional one.
    pub image_mode: bool,
    pub tasks: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub refinement: RefinementConfig,
    pub guidance_invert: f64,
    pub guidance_edit: f64,
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Gradient steps per offset for the null-branch baseline.
    pub null_opt_steps: usize,
    pub fixed_point_iters: usize,
    pub lambda_grid: Vec<f64>,
    pub steps_grid: Vec<usize>,
    pub fixed_step: Option<usize>,
    /// Invert and reconstruct under the unconditional source.
    pub null_source: bool,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Record per-row wall time. Off by default so reports are reproducible.
    pub timing: bool,
    pub out: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mixture: None,
            image_mode: false,
            tasks: 50,
            seed: 0,
            methods: Method::ALL.to_vec(),
            refinement: RefinementConfig::default(),
            guidance_invert: 1.0,
            guidance_edit: GuidanceConfig::EDIT_SCALE,
            steps: DEFAULT_INFERENCE_STEPS,
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            null_opt_steps: 10,
            fixed_point_iters: 5,
            lambda_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            steps_grid: vec![20, 50],
            fixed_step: None,
            null_source: false,
            jobs: 1,
            timing: false,
            out: None,
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| BenchError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.tasks == 0 {
            return bad("tasks must be >= 1");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.steps == 0 || self.steps > self.train_steps {
            return bad("steps must lie in 1..=train_steps");
        }
        if let Some(s) = self.fixed_step {
            if s == 0 || s > self.steps {
                return bad("fixed_step must lie in 1..=steps");
            }
        }
        if !(self.guidance_invert >= 0.0 && self.guidance_edit >= 0.0) {
            return bad("guidance scales must be >= 0");
        }
        self.refinement
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        build_linear_schedule(self.train_steps, self.beta_start, self.beta_end)
            .map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<()> {
        self.validate()?;
        if self.lambda_grid.is_empty() || self.steps_grid.is_empty() {
            return Err(BenchError::Config("sweep grids must be non-empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(BenchError::Config("lambda grid entries must be finite and >= 0".into()));
        }
        if self.steps_grid.iter().any(|t| *t == 0 || *t > self.train_steps) {
            return Err(BenchError::Config(
                "steps grid entries must lie in 1..=train_steps".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule_with_steps(self.steps)
    }

    pub fn schedule_with_steps(&self, steps: usize) -> Result<NoiseSchedule> {
        let train = build_linear_schedule(self.train_steps, self.beta_start, self.beta_end)?;
        Ok(subsample_schedule(&train, steps)?)
    }

    pub fn load_mixture(&self) -> Result<GaussianMixture> {
        Ok(match &self.mixture {
            Some(path) => GaussianMixture::load(path)?,
            None if self.image_mode => GaussianMixture::from_json(IMAGE_MIXTURE)?,
            None => GaussianMixture::from_json(DEFAULT_MIXTURE)?,
        })
    }

    pub fn invert_guidance(&self) -> GuidanceConfig {
        GuidanceConfig::new(self.guidance_invert)
    }

    pub fn edit_guidance(&self) -> GuidanceConfig {
        GuidanceConfig::new(self.guidance_edit)
    }
}
