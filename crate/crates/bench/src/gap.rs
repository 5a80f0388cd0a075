//! Per-step gap profiles and their relation to edit quality.

use enm_core::analysis::{gap_quality_correlation, Correlation, GapProfile};
use enm_core::inversion::Method;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{BenchError, Result};
use crate::run::{format_metric, run_method, run_tasks, BenchReport};
use crate::task::generate_tasks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub method: Method,
    pub task_id: usize,
    pub profile: GapProfile,
}

/// Correlation of `gap_at_fixed_step` with `edit_nll` over the successful
/// rows of one method, or over all rows when `method` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCorrelation {
    pub method: Option<Method>,
    pub correlation: Option<Correlation>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAnalysis {
    pub report: BenchReport,
    pub profiles: Vec<TaskProfile>,
    pub correlations: Vec<MethodCorrelation>,
}

impl GapAnalysis {
    /// Long format: one line per `(method, task, t)`.
    pub fn profiles_csv(&self) -> String {
        let mut out = String::from("method,task_id,t,gap\n");
        for p in &self.profiles {
            for (i, g) in p.profile.gaps.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", p.method, p.task_id, i + 1, format_metric(*g)));
            }
        }
        out
    }

    pub fn correlation(&self, method: Option<Method>) -> Option<&MethodCorrelation> {
        self.correlations.iter().find(|c| c.method == method)
    }
}

fn correlate(report: &BenchReport, method: Option<Method>) -> MethodCorrelation {
    let pairs: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| method.is_none_or(|m| r.method == m))
        .filter_map(|r| Some((r.gap_at_fixed_step?, r.edit_nll?)))
        .collect();
    match gap_quality_correlation(&pairs) {
        Ok(c) => MethodCorrelation {
            method,
            correlation: Some(c),
            error: None,
        },
        Err(e) => MethodCorrelation {
            method,
            correlation: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs the benchmark and keeps the full gap profile of every successful
/// `(task, method)` pair.
pub fn run_gap_analysis(cfg: &BenchConfig) -> Result<GapAnalysis> {
    cfg.validate()?;
    let gmm = cfg.load_mixture()?;
    let tasks = generate_tasks(&gmm, cfg.tasks, cfg.seed, cfg.null_source)?;
    let schedule = cfg.schedule()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
    let profiles: Vec<TaskProfile> = pool.install(|| {
        tasks
            .par_iter()
            .flat_map_iter(|task| {
                cfg.methods.iter().filter_map(|&method| {
                    let res = run_method(&gmm, &gmm, task, method, cfg, &schedule).ok()?;
                    Some(TaskProfile {
                        method,
                        task_id: task.task_id,
                        profile: res.outcome.profile,
                    })
                })
            })
            .collect()
    });
    let report = run_tasks(cfg, &gmm, &gmm, tasks)?;
    let mut correlations: Vec<MethodCorrelation> = cfg.methods.iter().map(|&m| correlate(&report, Some(m))).collect();
    correlations.push(correlate(&report, None));
    Ok(GapAnalysis {
        report,
        profiles,
        correlations,
    })
}
