//! `enm`: invert, edit, benchmark and analyze on Gaussian-mixture tasks.

mod trajfile;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use enm_bench::run::format_metric;
use enm_bench::{run_gap_analysis, run_sweep, BenchConfig, BenchReport};
use enm_core::analysis::{evaluate_edit, EditSettings};
use enm_core::inversion::{ddim_invert, enm_invert, fixed_point_invert, Method};
use enm_core::{Condition, NormMode};

use trajfile::{ScheduleSpec, TrajectoryFile};

#[derive(Parser)]
#[command(
    name = "enm",
    version,
    about = "Diffusion inversion experiments on exact Gaussian-mixture oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert one task and dump its trajectory.
    Invert(InvertArgs),
    /// Reconstruct and edit a dumped trajectory.
    Edit(EditArgs),
    /// Run every method on the task suite.
    Bench(CommonArgs),
    /// Paired grid over the edit weight and the number of steps.
    Sweep(SweepArgs),
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Subcommand)]
enum Analyze {
    /// Gap profiles, gap/quality correlation and a scatter plot.
    Gap(CommonArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
    /// Binary trajectory dump (invert only).
    Bin,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Msq,
    L2,
}

/// Flags shared by every subcommand. Each overrides the matching field of
/// `--config`.
#[derive(Args)]
struct CommonArgs {
    /// JSON config file; any field may be omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mixture: Option<PathBuf>,
    /// Use the bundled 64-dimensional suite.
    #[arg(long)]
    image_mode: bool,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Maximum refinement updates per timestep.
    #[arg(long)]
    refine_steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance_invert: Option<f64>,
    #[arg(long)]
    guidance_edit: Option<f64>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    null_source: bool,
    #[arg(long)]
    fixed_step: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    format: Vec<Format>,
    /// Record per-row wall time.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Task index within the generated suite.
    #[arg(long, default_value_t = 0)]
    task: usize,
    #[arg(long, default_value = "enm", value_parser = parse_method)]
    method: Method,
    /// Target condition for the refinement, e.g. `class:1` or `uncond`.
    #[arg(long, value_parser = parse_condition)]
    target: Option<Condition>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trajectory written by `invert` (JSON or binary).
    #[arg(long)]
    trajectory: PathBuf,
    /// Defaults to the target stored in the trajectory.
    #[arg(long, value_parser = parse_condition)]
    target: Option<Condition>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    steps_grid: Option<Vec<usize>>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: enm_core::Error| e.to_string())
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse().map_err(|e: enm_core::Error| e.to_string())
}

/// Invalid input exits with 2, everything else that goes wrong with 1.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn config_err<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Config(e.into()))
}

/// `Ok(true)` when some rows failed.
type Outcome = Result<bool, Failure>;

impl CommonArgs {
    fn build(&self) -> anyhow::Result<BenchConfig> {
        let mut cfg = match &self.config {
            Some(path) => BenchConfig::load(path)?,
            None => BenchConfig::default(),
        };
        if let Some(m) = &self.mixture {
            cfg.mixture = Some(m.clone());
        }
        cfg.image_mode |= self.image_mode;
        cfg.null_source |= self.null_source;
        cfg.timing |= self.timing;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            tasks => tasks,
            seed => seed,
            methods => methods,
            lambda => refinement.lambda,
            refine_steps => refinement.max_iters,
            tau => refinement.tau,
            steps => steps,
            guidance_invert => guidance_invert,
            guidance_edit => guidance_edit,
            jobs => jobs,
        );
        if let Some(n) = self.norm {
            cfg.refinement.norm = match n {
                NormArg::Msq => NormMode::MeanSquares,
                NormArg::L2 => NormMode::L2,
            };
        }
        if self.fixed_step.is_some() {
            cfg.fixed_step = self.fixed_step;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        Ok(cfg)
    }

    fn checked(&self) -> Result<BenchConfig, Failure> {
        let cfg = config_err(self.build())?;
        config_err(cfg.validate())?;
        config_err(cfg.load_mixture())?;
        Ok(cfg)
    }

    fn formats(
        &self,
        cfg: &BenchConfig,
        allowed: &[Format],
        default_to_file: &[Format],
        default_to_stdout: Format,
    ) -> Result<Vec<Format>, Failure> {
        if let Some(bad) = self.format.iter().find(|f| !allowed.contains(f)) {
            let name = bad.to_possible_value().expect("no skipped variants");
            return Err(Failure::Config(anyhow!(
                "format `{}` is not available here",
                name.get_name()
            )));
        }
        Ok(match self.format.is_empty() {
            false => self.format.clone(),
            true if cfg.out.is_some() => default_to_file.to_vec(),
            true => vec![default_to_stdout],
        })
    }
}

/// Writes each artifact to `out/name`, or to stdout when there is no
/// output directory.
struct Sink<'a> {
    out: Option<&'a Path>,
}

impl Sink<'_> {
    fn new(cfg: &BenchConfig) -> Sink<'_> {
        Sink {
            out: cfg.out.as_deref(),
        }
    }

    fn put(&self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        match self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join(name);
                std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
            }
            None => Ok(std::io::stdout().write_all(bytes)?),
        }
    }
}

fn one_for_stdout(cfg: &BenchConfig, formats: &[Format]) -> Result<(), Failure> {
    if cfg.out.is_none() && formats.len() > 1 {
        return Err(Failure::Config(anyhow!("several formats need --out")));
    }
    Ok(())
}

fn summarize(report: &BenchReport) {
    for a in &report.aggregates {
        let m = |v: Option<f64>| v.map(format_metric).unwrap_or_else(|| "-".into());
        eprintln!(
            "{:<12} rows {:>4} failed {:>3}  recon_mse {}  edit_nll {}  gap {}",
            a.method.as_str(),
            a.rows,
            a.failed,
            m(a.median_recon_mse),
            m(a.median_edit_nll),
            m(a.median_gap_at_fixed_step)
        );
    }
}

fn bench(args: &CommonArgs) -> Outcome {
    let cfg = args.checked()?;
    let formats = args.formats(
        &cfg,
        &[Format::Csv, Format::Json, Format::Svg],
        &[Format::Csv, Format::Json, Format::Svg],
        Format::Csv,
    )?;
    one_for_stdout(&cfg, &formats)?;
    let report = enm_bench::run_benchmark(&cfg)?;
    let sink = Sink::new(&cfg);
    for f in formats {
        match f {
            Format::Csv => sink.put("rows.csv", enm_bench::csv_string(&report.rows)?.as_bytes())?,
            Format::Json => sink.put("report.json", enm_bench::emit::json_string(&report)?.as_bytes())?,
            Format::Svg => sink.put("scatter.svg", enm_bench::svg_scatter(&report.rows).as_bytes())?,
            Format::Bin => unreachable!(),
        }
    }
    summarize(&report);
    Ok(report.failed_rows() > 0)
}

fn sweep(args: &SweepArgs) -> Outcome {
    let mut cfg = config_err(args.common.build())?;
    if let Some(g) = &args.lambda_grid {
        cfg.lambda_grid = g.clone();
    }
    if let Some(g) = &args.steps_grid {
        cfg.steps_grid = g.clone();
    }
    config_err(cfg.validate_sweep())?;
    config_err(cfg.load_mixture())?;
    let formats = args.common.formats(
        &cfg,
        &[Format::Csv, Format::Json, Format::Svg],
        &[Format::Csv, Format::Json],
        Format::Csv,
    )?;
    one_for_stdout(&cfg, &formats)?;
    let report = run_sweep(&cfg)?;
    let sink = Sink::new(&cfg);
    for f in formats {
        match f {
            Format::Csv => sink.put("trend.csv", report.trend_csv().as_bytes())?,
            Format::Json => sink.put("sweep.json", serde_json::to_string_pretty(&report)?.as_bytes())?,
            Format::Svg => {
                let rows: Vec<_> = report
                    .points
                    .iter()
                    .flat_map(|p| p.report.rows.iter().cloned())
                    .collect();
                sink.put("scatter.svg", enm_bench::svg_scatter(&rows).as_bytes())?
            }
            Format::Bin => unreachable!(),
        }
    }
    Ok(report.failed_rows() > 0)
}

fn analyze_gap(args: &CommonArgs) -> Outcome {
    let cfg = args.checked()?;
    let formats = args.formats(
        &cfg,
        &[Format::Csv, Format::Json, Format::Svg],
        &[Format::Csv, Format::Json, Format::Svg],
        Format::Csv,
    )?;
    one_for_stdout(&cfg, &formats)?;
    let analysis = run_gap_analysis(&cfg)?;
    let sink = Sink::new(&cfg);
    for f in formats {
        match f {
            Format::Csv => sink.put("gap_profiles.csv", analysis.profiles_csv().as_bytes())?,
            Format::Json => sink.put("gap_analysis.json", serde_json::to_string_pretty(&analysis)?.as_bytes())?,
            Format::Svg => sink.put(
                "gap_scatter.svg",
                enm_bench::svg_scatter(&analysis.report.rows).as_bytes(),
            )?,
            Format::Bin => unreachable!(),
        }
    }
    for c in &analysis.correlations {
        let who = c.method.map_or("all", Method::as_str);
        match (&c.correlation, &c.error) {
            (Some(r), _) => eprintln!(
                "{who:<12} pearson {:.4} (p {:.3e})  spearman {:.4}  n {}",
                r.pearson_r, r.p_value_pearson, r.spearman_rho, r.n
            ),
            (None, e) => eprintln!("{who:<12} no correlation: {}", e.as_deref().unwrap_or("unknown")),
        }
    }
    Ok(analysis.report.failed_rows() > 0)
}

fn schedule_spec(cfg: &BenchConfig) -> ScheduleSpec {
    ScheduleSpec {
        train_steps: cfg.train_steps,
        beta_start: cfg.beta_start,
        beta_end: cfg.beta_end,
        steps: cfg.steps,
    }
}

fn invert(args: &InvertArgs) -> Outcome {
    let cfg = args.common.checked()?;
    if !matches!(args.method, Method::Ddim | Method::FixedPoint | Method::Enm) {
        return Err(Failure::Config(anyhow!(
            "invert supports ddim, fixed_point and enm; {} reuses the ddim trajectory",
            args.method
        )));
    }
    let formats = args.common.formats(
        &cfg,
        &[Format::Csv, Format::Json, Format::Bin],
        &[Format::Json, Format::Csv],
        Format::Json,
    )?;
    one_for_stdout(&cfg, &formats)?;
    if cfg.out.is_none() && formats.contains(&Format::Bin) {
        return Err(Failure::Config(anyhow!("binary dumps need --out")));
    }
    let gmm = config_err(cfg.load_mixture())?;
    let tasks = config_err(enm_bench::generate_tasks(
        &gmm,
        args.task + 1,
        cfg.seed,
        cfg.null_source,
    ))?;
    let task = &tasks[args.task];
    let target = args.target.unwrap_or(task.cond_tgt);
    let schedule = config_err(cfg.schedule())?;
    let g = cfg.invert_guidance();
    let traj = match args.method {
        Method::Ddim => ddim_invert(&gmm, &task.z0, task.cond_src, &schedule, &g),
        Method::FixedPoint => fixed_point_invert(&gmm, &task.z0, task.cond_src, &schedule, &g, cfg.fixed_point_iters),
        _ => enm_invert(&gmm, &task.z0, task.cond_src, target, &cfg.refinement, &schedule, &g),
    }?;
    let mut file = TrajectoryFile {
        schedule: schedule_spec(&cfg),
        trajectory: traj,
    };
    file.trajectory.cond_tgt.get_or_insert(target);
    let sink = Sink::new(&cfg);
    for f in formats {
        match f {
            Format::Json => sink.put("trajectory.json", trajfile::to_json(&file)?.as_bytes())?,
            Format::Bin => sink.put("trajectory.bin", &trajfile::to_binary(&file)?)?,
            Format::Csv => sink.put("per_step.csv", file.trajectory.per_step_csv().as_bytes())?,
            Format::Svg => unreachable!(),
        }
    }
    Ok(false)
}

fn edit(args: &EditArgs) -> Outcome {
    let mut cfg = args.common.checked()?;
    let bytes =
        config_err(std::fs::read(&args.trajectory).with_context(|| format!("reading {}", args.trajectory.display())))?;
    let file = config_err(trajfile::decode(&bytes))?;
    cfg.train_steps = file.schedule.train_steps;
    cfg.beta_start = file.schedule.beta_start;
    cfg.beta_end = file.schedule.beta_end;
    cfg.steps = file.schedule.steps;
    if cfg.fixed_step.is_some_and(|s| s > cfg.steps) {
        cfg.fixed_step = None;
    }
    let schedule = config_err(cfg.schedule())?;
    let gmm = config_err(cfg.load_mixture())?;
    let traj = &file.trajectory;
    if traj.dim() != gmm.dim() {
        return Err(Failure::Config(anyhow!(
            "trajectory has dimension {} but the mixture has {}",
            traj.dim(),
            gmm.dim()
        )));
    }
    let Some(target) = args.target.or(traj.cond_tgt) else {
        return Err(Failure::Config(anyhow!("no target condition given or stored")));
    };
    let formats = args
        .common
        .formats(&cfg, &[Format::Json], &[Format::Json], Format::Json)?;
    let settings = EditSettings {
        guidance_recon: cfg.invert_guidance(),
        guidance_edit: cfg.edit_guidance(),
        guidance_gap: cfg.refinement.guidance,
        norm: cfg.refinement.norm,
        fixed_step: cfg.fixed_step,
    };
    let outcome = evaluate_edit(&gmm, &gmm, traj, traj.cond_src, target, &settings, &schedule, None)?;
    let sink = Sink::new(&cfg);
    for _ in formats {
        let mut text = serde_json::to_string_pretty(&outcome)?;
        text.push('\n');
        sink.put("outcome.json", text.as_bytes())?;
    }
    Ok(false)
}

/// The error chain, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            out = format!("{out}: {msg}");
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Invert(a) => invert(a),
        Command::Edit(a) => edit(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(Analyze::Gap(a)) => analyze_gap(a),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("enm: some rows failed, see the error column");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("enm: invalid configuration: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("enm: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
