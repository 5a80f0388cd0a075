//! Paired sweeps over the edit weight and the number of inference steps.

use enm_core::inversion::Method;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::Result;
use crate::run::{metric_serde, run_tasks, BenchReport};
use crate::task::generate_tasks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub report: BenchReport,
}

/// Per-point medians, one line per `(lambda, T, method)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub lambda: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub method: Method,
    #[serde(with = "metric_serde")]
    pub median_recon_mse: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_edit_nll: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_gap_at_fixed_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub trend: Vec<TrendRow>,
}

impl SweepReport {
    pub fn point(&self, lambda: f64, steps: usize) -> Option<&BenchReport> {
        self.points
            .iter()
            .find(|p| p.lambda == lambda && p.steps == steps)
            .map(|p| &p.report)
    }

    /// Every point consumed the same task list.
    pub fn is_paired(&self) -> bool {
        self.points.windows(2).all(|w| w[0].report.tasks == w[1].report.tasks)
    }

    pub fn failed_rows(&self) -> usize {
        self.points.iter().map(|p| p.report.failed_rows()).sum()
    }

    pub fn trend_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(crate::run::format_metric).unwrap_or_default();
        let mut out = String::from("lambda,T,method,median_recon_mse,median_edit_nll,median_gap_at_fixed_step\n");
        for t in &self.trend {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.lambda,
                t.steps,
                t.method,
                opt(t.median_recon_mse),
                opt(t.median_edit_nll),
                opt(t.median_gap_at_fixed_step)
            ));
        }
        out
    }
}

/// One benchmark per `(T, lambda)` grid point, all on the same tasks.
pub fn run_sweep(cfg: &BenchConfig) -> Result<SweepReport> {
    cfg.validate_sweep()?;
    let gmm = cfg.load_mixture()?;
    let tasks = generate_tasks(&gmm, cfg.tasks, cfg.seed, cfg.null_source)?;
    let mut points = Vec::new();
    for &steps in &cfg.steps_grid {
        for &lambda in &cfg.lambda_grid {
            let mut point = cfg.clone();
            point.steps = steps;
            point.refinement.lambda = lambda;
            if point.fixed_step.is_some_and(|s| s > steps) {
                point.fixed_step = None;
            }
            let report = run_tasks(&point, &gmm, &gmm, tasks.clone())?;
            points.push(SweepPoint { lambda, steps, report });
        }
    }
    let trend = points
        .iter()
        .flat_map(|p| {
            p.report.aggregates.iter().map(move |a| TrendRow {
                lambda: p.lambda,
                steps: p.steps,
                method: a.method,
                median_recon_mse: a.median_recon_mse,
                median_edit_nll: a.median_edit_nll,
                median_gap_at_fixed_step: a.median_gap_at_fixed_step,
            })
        })
        .collect();
    Ok(SweepReport { points, trend })
}
