//! Per-task pipelines and the benchmark runner.

use std::collections::BTreeMap;
use std::time::Instant;

use enm_core::analysis::{evaluate_edit, noise_gap_profile, EditOutcome, EditQuality, EditSettings};
use enm_core::inversion::{
    compute_residuals, ddim_invert, enm_invert, fixed_point_invert, null_cond_optimize, replay_with_null_offsets,
    Method,
};
use enm_core::predictor::NoisePredictor;
use enm_core::vector::mean_squared_diff;
use enm_core::{GaussianMixture, NoiseSchedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{BenchError, Result};
use crate::metrics::{edit_fidelity_nll, psnr, square_raster, ssim, Normalizer};
use crate::task::{generate_tasks, EditTask};

/// Serializes non-finite floats as strings (`"inf"`, `"-inf"`, `"nan"`) so
/// JSON stays lossless.
pub(crate) mod metric_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_finite() => s.serialize_some(x),
            Some(x) => s.serialize_some(&super::format_metric(*x)),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => t
                .parse::<f64>()
                .map(Some)
                .map_err(|_| serde::de::Error::custom(format!("not a number: {t}"))),
        }
    }
}

/// Decimal form used in every emitted artifact; round-trips exactly.
pub fn format_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

/// One `(method, task)` result. Metric fields are empty when the row failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: Method,
    pub task_id: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub tau: Option<f64>,
    #[serde(rename = "T")]
    pub steps: usize,
    pub guidance_edit: f64,
    #[serde(with = "metric_serde")]
    pub recon_mse: Option<f64>,
    #[serde(with = "metric_serde")]
    pub psnr: Option<f64>,
    #[serde(with = "metric_serde")]
    pub ssim: Option<f64>,
    #[serde(with = "metric_serde")]
    pub edit_nll: Option<f64>,
    #[serde(with = "metric_serde")]
    pub preservation_mse: Option<f64>,
    #[serde(with = "metric_serde")]
    pub gap_mean: Option<f64>,
    #[serde(with = "metric_serde")]
    pub gap_at_fixed_step: Option<f64>,
    pub refine_iters_total: Option<usize>,
    pub wall_time_ms: Option<f64>,
    pub error: Option<String>,
}

impl Row {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Medians over a method's successful rows, and its paired win rates against
/// DDIM inversion (fraction of tasks with a metric no worse than DDIM's).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub rows: usize,
    pub failed: usize,
    #[serde(with = "metric_serde")]
    pub median_recon_mse: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_psnr: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_ssim: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_edit_nll: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_preservation_mse: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_gap_mean: Option<f64>,
    #[serde(with = "metric_serde")]
    pub median_gap_at_fixed_step: Option<f64>,
    pub win_rate_recon_vs_ddim: Option<f64>,
    pub win_rate_edit_vs_ddim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub tasks: Vec<EditTask>,
    pub rows: Vec<Row>,
    pub aggregates: Vec<MethodAggregate>,
}

impl BenchReport {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }

    pub fn aggregate(&self, method: Method) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Rows of one method, in task order.
    pub fn method_rows(&self, method: Method) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Whether the stored aggregates equal a recomputation from the rows.
    pub fn verify_aggregates(&self) -> bool {
        aggregate_rows(&self.rows, &self.config.methods) == self.aggregates
    }
}

/// Median with the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            a / 2.0 + b / 2.0
        }
    })
}

fn column(rows: &[&Row], get: impl Fn(&Row) -> Option<f64>) -> Vec<f64> {
    rows.iter().filter(|r| r.ok()).filter_map(|r| get(r)).collect()
}

fn win_rate(mine: &[&Row], ddim: &BTreeMap<usize, &Row>, get: impl Fn(&Row) -> Option<f64>) -> Option<f64> {
    let mut total = 0usize;
    let mut wins = 0usize;
    for r in mine.iter().filter(|r| r.ok()) {
        let Some(base) = ddim.get(&r.task_id).filter(|b| b.ok()) else {
            continue;
        };
        if let (Some(a), Some(b)) = (get(r), get(base)) {
            total += 1;
            if a <= b {
                wins += 1;
            }
        }
    }
    (total > 0).then(|| wins as f64 / total as f64)
}

pub fn aggregate_rows(rows: &[Row], methods: &[Method]) -> Vec<MethodAggregate> {
    let ddim: BTreeMap<usize, &Row> = rows
        .iter()
        .filter(|r| r.method == Method::Ddim)
        .map(|r| (r.task_id, r))
        .collect();
    let has_ddim = !ddim.is_empty();
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&Row> = rows.iter().filter(|r| r.method == method).collect();
            let med = |get: fn(&Row) -> Option<f64>| median(&column(&mine, get));
            MethodAggregate {
                method,
                rows: mine.len(),
                failed: mine.iter().filter(|r| !r.ok()).count(),
                median_recon_mse: med(|r| r.recon_mse),
                median_psnr: med(|r| r.psnr),
                median_ssim: med(|r| r.ssim),
                median_edit_nll: med(|r| r.edit_nll),
                median_preservation_mse: med(|r| r.preservation_mse),
                median_gap_mean: med(|r| r.gap_mean),
                median_gap_at_fixed_step: med(|r| r.gap_at_fixed_step),
                win_rate_recon_vs_ddim: if has_ddim {
                    win_rate(&mine, &ddim, |r| r.recon_mse)
                } else {
                    None
                },
                win_rate_edit_vs_ddim: if has_ddim {
                    win_rate(&mine, &ddim, |r| r.edit_nll)
                } else {
                    None
                },
            }
        })
        .collect()
}

/// Result of one method on one task, before it is flattened into a row.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub outcome: EditOutcome,
    pub refine_iters_total: usize,
}

/// Inverts, reconstructs, edits and scores one task with one method.
pub fn run_method<P: NoisePredictor + ?Sized>(
    predictor: &P,
    gmm: &GaussianMixture,
    task: &EditTask,
    method: Method,
    cfg: &BenchConfig,
    schedule: &NoiseSchedule,
) -> Result<MethodResult> {
    let g_inv = cfg.invert_guidance();
    let g_edit = cfg.edit_guidance();
    let settings = EditSettings {
        guidance_recon: g_inv,
        guidance_edit: g_edit,
        guidance_gap: cfg.refinement.guidance,
        norm: cfg.refinement.norm,
        fixed_step: cfg.fixed_step,
    };
    let (src, tgt) = (task.cond_src, task.cond_tgt);
    let z0 = &task.z0;
    let evaluate = |traj, residuals| evaluate_edit(predictor, gmm, traj, src, tgt, &settings, schedule, residuals);
    let (outcome, iters) = match method {
        Method::Ddim => {
            let traj = ddim_invert(predictor, z0, src, schedule, &g_inv)?;
            (evaluate(&traj, None)?, 0)
        }
        Method::FixedPoint => {
            let traj = fixed_point_invert(predictor, z0, src, schedule, &g_inv, cfg.fixed_point_iters)?;
            (evaluate(&traj, None)?, traj.refine_iters_total())
        }
        Method::Enm => {
            let traj = enm_invert(predictor, z0, src, tgt, &cfg.refinement, schedule, &g_inv)?;
            (evaluate(&traj, None)?, traj.refine_iters_total())
        }
        Method::Residual => {
            let traj = ddim_invert(predictor, z0, src, schedule, &g_inv)?;
            let residuals = compute_residuals(predictor, &traj, src, schedule)?;
            (evaluate(&traj, Some(&residuals))?, 0)
        }
        Method::NullOpt => {
            // Offsets are fitted at the editing guidance so that guided
            // reconstruction tracks the stored path; the same offsets drive
            // the edit.
            let traj = ddim_invert(predictor, z0, src, schedule, &g_inv)?;
            let offsets = null_cond_optimize(predictor, &traj, src, schedule, &g_edit, cfg.null_opt_steps)?;
            let reconstructed = replay_with_null_offsets(predictor, &traj, src, &g_edit, &offsets, schedule)?;
            let edited = replay_with_null_offsets(predictor, &traj, tgt, &g_edit, &offsets, schedule)?;
            let profile = noise_gap_profile(
                predictor,
                &traj,
                src,
                tgt,
                &settings.guidance_gap,
                schedule,
                settings.norm,
                settings.fixed_step,
            )?;
            let quality = EditQuality {
                recon_mse: mean_squared_diff(&reconstructed.values, &z0.values),
                edit_nll: edit_fidelity_nll(gmm, tgt, &edited.values)?,
                preservation_mse: mean_squared_diff(&edited.values, &z0.values),
            };
            let outcome = EditOutcome {
                edited,
                reconstructed,
                quality,
                profile,
            };
            (outcome, cfg.null_opt_steps * schedule.steps())
        }
    };
    Ok(MethodResult {
        outcome,
        refine_iters_total: iters,
    })
}

fn make_row<P: NoisePredictor + ?Sized>(
    predictor: &P,
    gmm: &GaussianMixture,
    task: &EditTask,
    method: Method,
    cfg: &BenchConfig,
    schedule: &NoiseSchedule,
    normalizer: &Normalizer,
) -> Row {
    let started = Instant::now();
    let result = run_method(predictor, gmm, task, method, cfg, schedule).and_then(|res| {
        let recon = normalizer.apply(&res.outcome.reconstructed.values);
        let source = normalizer.apply(&task.z0.values);
        let p = psnr(&recon, &source, 1.0)?;
        let s = square_raster(source.len())
            .map(|raster| ssim(&recon, &source, raster))
            .transpose()?;
        Ok((res, p, s))
    });
    let elapsed = cfg.timing.then(|| started.elapsed().as_secs_f64() * 1e3);
    let is_enm = method == Method::Enm;
    let mut row = Row {
        method,
        task_id: task.task_id,
        seed: task.seed,
        lambda: is_enm.then_some(cfg.refinement.lambda),
        k: is_enm.then_some(cfg.refinement.max_iters),
        tau: is_enm.then_some(cfg.refinement.tau),
        steps: schedule.steps(),
        guidance_edit: cfg.guidance_edit,
        recon_mse: None,
        psnr: None,
        ssim: None,
        edit_nll: None,
        preservation_mse: None,
        gap_mean: None,
        gap_at_fixed_step: None,
        refine_iters_total: None,
        wall_time_ms: elapsed,
        error: None,
    };
    match result {
        Ok((res, p, s)) => {
            let q = res.outcome.quality;
            row.recon_mse = Some(q.recon_mse);
            row.psnr = Some(p);
            row.ssim = s;
            row.edit_nll = Some(q.edit_nll);
            row.preservation_mse = Some(q.preservation_mse);
            row.gap_mean = Some(res.outcome.profile.mean);
            row.gap_at_fixed_step = Some(res.outcome.profile.gap_at_fixed_step);
            row.refine_iters_total = Some(res.refine_iters_total);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))
}

/// Runs `cfg` with the mixture's own Bayes-optimal predictor.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let gmm = cfg.load_mixture()?;
    run_benchmark_with(cfg, &gmm, &gmm)
}

/// Runs `cfg` against an arbitrary predictor; `gmm` still defines the tasks
/// and the fidelity metric.
pub fn run_benchmark_with<P: NoisePredictor + ?Sized>(
    cfg: &BenchConfig,
    gmm: &GaussianMixture,
    predictor: &P,
) -> Result<BenchReport> {
    cfg.validate()?;
    let tasks = generate_tasks(gmm, cfg.tasks, cfg.seed, cfg.null_source)?;
    run_tasks(cfg, gmm, predictor, tasks)
}

pub(crate) fn run_tasks<P: NoisePredictor + ?Sized>(
    cfg: &BenchConfig,
    gmm: &GaussianMixture,
    predictor: &P,
    tasks: Vec<EditTask>,
) -> Result<BenchReport> {
    if predictor.dim() != gmm.dim() {
        return Err(BenchError::Shape(format!(
            "predictor dimension {} differs from mixture dimension {}",
            predictor.dim(),
            gmm.dim()
        )));
    }
    let schedule = cfg.schedule()?;
    let normalizer = Normalizer::for_mixture(gmm);
    let per_task: Vec<Vec<Row>> = worker_pool(cfg.jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                cfg.methods
                    .iter()
                    .map(|&m| make_row(predictor, gmm, task, m, cfg, &schedule, &normalizer))
                    .collect()
            })
            .collect()
    });
    let rows: Vec<Row> = per_task.into_iter().flatten().collect();
    let aggregates = aggregate_rows(&rows, &cfg.methods);
    Ok(BenchReport {
        config: cfg.clone(),
        tasks,
        rows,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[1.0, f64::INFINITY]), Some(f64::INFINITY));
    }

    #[test]
    fn metric_format_roundtrips() {
        for x in [
            0.1,
            1e-300,
            -2.5e17,
            f64::INFINITY,
            f64::NEG_INFINITY,
            0.30000000000000004,
        ] {
            assert_eq!(format_metric(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_metric(f64::INFINITY), "inf");
    }

    #[test]
    fn small_run_covers_every_method() {
        let cfg = BenchConfig {
            tasks: 2,
            steps: 10,
            ..Default::default()
        };
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2 * Method::ALL.len());
        assert_eq!(report.failed_rows(), 0);
        assert!(report.verify_aggregates());
        let ddim = report.aggregate(Method::Ddim).unwrap();
        assert_eq!(ddim.win_rate_recon_vs_ddim, Some(1.0));
        for r in &report.rows {
            assert!(r.ssim.is_none());
            assert_eq!(r.lambda.is_some(), r.method == Method::Enm);
            assert!(r.wall_time_ms.is_none());
        }
    }
}
