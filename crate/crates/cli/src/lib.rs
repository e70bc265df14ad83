//! Command-line front-end: config parsing, experiment execution, reports and plots.

pub mod config;
pub mod plot;
pub mod repro;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use perfed_core::engine;
use perfed_core::experiments::{
    bound_check, gaussian_problem_constants, rate_fit, run_replicates, sweep, write_sweep_csv, Prepared,
    ReplicateSummary,
};
use perfed_core::solution::{ps_po_gap_check, solve_po, solve_po_grid, PoOptions, PO_TOL};
use perfed_core::theory::{
    constants, two_client_closed_forms, step_lemma_check, rescale_constants, validate_schedule, ScheduleSpec, StepRule,
};
use serde_json::json;

pub use config::CliConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_REGIME: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_USAGE, error: error.into() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn exit_code(e: &perfed_core::Error) -> i32 {
    use perfed_core::Error::*;
    match e {
        NonContraction { .. } | NonContractiveRegime { .. } => EXIT_REGIME,
        NonFinite { .. } | Convergence { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

impl From<perfed_core::Error> for Failure {
    fn from(e: perfed_core::Error) -> Self {
        Failure { code: exit_code(&e), error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error.downcast_ref::<perfed_core::Error>().map_or(EXIT_USAGE, exit_code);
        Failure { code, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::usage(e)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(name = "perfed", version, about = "Federated learning under performative distribution shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// First run seed (overrides PERFED_SEED and the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for replicates and sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print the parsed configuration with defaults filled in and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stable and optimal points, their gap and the gap bound.
    Solve,
    /// Simulate and write trace.csv, summary.csv and summary.json.
    Run,
    /// Run one replicate set per value of the declared axis.
    Sweep,
    /// Convergence constants and step-size schedule checks.
    Validate,
    /// Render trace or summary CSVs to plot.svg.
    Plot {
        /// Input CSV (repeatable); defaults to the config's plot.inputs.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Legend label per input (repeatable).
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        title: Option<String>,
        /// Omit the standard-deviation bands.
        #[arg(long)]
        no_band: bool,
    },
    /// Regenerate a named experiment.
    Repro {
        #[arg(value_enum)]
        name: repro::Recipe,
        /// Shorter horizons and two seeds, for smoke testing.
        #[arg(long)]
        quick: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn seed_override(cli: &Cli) -> CmdResult<Option<u64>> {
    if let Some(s) = cli.seed {
        return Ok(Some(s));
    }
    match std::env::var("PERFED_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::usage(anyhow!("PERFED_SEED={v:?} is not a seed"))),
        Err(_) => Ok(None),
    }
}

fn load_config(cli: &Cli, required: bool) -> CmdResult<Option<CliConfig>> {
    let Some(path) = &cli.config else {
        return if required { Err(Failure::usage(anyhow!("--config is required"))) } else { Ok(None) };
    };
    let mut cfg = CliConfig::load(path).map_err(Failure::usage)?;
    if let Some(s) = seed_override(cli)? {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

fn out_dir(cli: &Cli, cfg: Option<&CliConfig>) -> PathBuf {
    cli.out.clone().or_else(|| cfg.and_then(|c| c.out_dir.clone())).unwrap_or_else(|| PathBuf::from("."))
}

/// Runs `f` on a pool capped at `jobs` threads.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CmdResult<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Failure::usage(anyhow!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn execute(cli: &Cli) -> CmdResult {
    if cli.print_config {
        let cfg = load_config(cli, true)?.expect("required");
        let text = fs::read_to_string(cli.config.as_ref().expect("required"))?;
        // Echo the document as written, with defaults filled in but paths unresolved.
        let mut raw = CliConfig::parse(&text).map_err(Failure::usage)?;
        raw.seed = cfg.seed;
        emit(&raw.to_json());
        return Ok(());
    }
    match &cli.command {
        Command::Solve => {
            let cfg = load_config(cli, true)?.expect("required");
            cmd_solve(&cfg, &out_dir(cli, Some(&cfg)))
        }
        Command::Run => {
            let cfg = load_config(cli, true)?.expect("required");
            let out = out_dir(cli, Some(&cfg));
            with_jobs(cli.jobs, || cmd_run(&cfg, &out))?
        }
        Command::Sweep => {
            let cfg = load_config(cli, true)?.expect("required");
            let out = out_dir(cli, Some(&cfg));
            with_jobs(cli.jobs, || cmd_sweep(&cfg, &out))?
        }
        Command::Validate => {
            let cfg = load_config(cli, true)?.expect("required");
            cmd_validate(&cfg, &out_dir(cli, Some(&cfg)))
        }
        Command::Plot { inputs, labels, title, no_band } => {
            let cfg = load_config(cli, false)?;
            let decl = cfg.as_ref().and_then(|c| c.plot.clone());
            let (inputs, labels, title, band) = if inputs.is_empty() {
                let d = decl.ok_or_else(|| Failure::usage(anyhow!("no --input given and no plot section in the config")))?;
                (d.inputs, d.labels.unwrap_or_default(), title.clone().or(d.title), d.band && !no_band)
            } else {
                (inputs.clone(), labels.clone(), title.clone(), !no_band)
            };
            let out = out_dir(cli, cfg.as_ref());
            cmd_plot(&inputs, &labels, title.as_deref(), band, &out.join("plot.svg"))
        }
        Command::Repro { name, quick } => {
            let seed = seed_override(cli)?.unwrap_or(0);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("repro"));
            with_jobs(cli.jobs, || repro::run_recipe(*name, &out.join(name.slug()), seed, *quick))?
        }
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

/// `theta_j +- 10 (1 + |theta_j|)` unless the config gives a box.
fn search_box(cfg: &CliConfig, centre: &[f64]) -> CmdResult<Vec<(f64, f64)>> {
    match &cfg.solve.po_box {
        Some(b) if b.len() == centre.len() => Ok(b.clone()),
        Some(b) if b.len() == 1 => Ok(vec![b[0]; centre.len()]),
        Some(b) => Err(Failure::usage(anyhow!("po_box has {} intervals for {} coordinates", b.len(), centre.len()))),
        None => Ok(centre.iter().map(|c| (c - 10.0 * (1.0 + c.abs()), c + 10.0 * (1.0 + c.abs()))).collect()),
    }
}

pub fn cmd_solve(cfg: &CliConfig, out: &Path) -> CmdResult {
    let prepared = cfg.scenario()?.prepare()?;
    let (pop, model) = (&prepared.population, &prepared.model);
    let bx = search_box(cfg, prepared.theta_ps())?;
    let po = if pop.is_gaussian_quadratic(model) {
        solve_po(pop, model, &bx, PO_TOL)?
    } else {
        solve_po_grid(pop, model, &bx, &PoOptions::default())?
    };
    let gap = match ps_po_gap_check(pop, model, prepared.theta_ps(), &po.theta_po) {
        Ok(g) => json!({"gap": g.gap, "bound": g.bound, "holds": g.holds}),
        Err(e) => json!({"gap": prepared.theta_ps().iter().zip(po.theta_po.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), "bound": null, "note": e.to_string()}),
    };
    create_dir(out)?;
    let report = json!({
        "theta_ps": prepared.theta_ps(),
        "ps_iterations": prepared.ps.iterations,
        "ps_residual": prepared.ps.residual,
        "contraction_estimate": prepared.ps.contraction_estimate,
        "theta_po": po.theta_po,
        "risk_at_po": po.risk_at_po,
        "po_method": po.method,
        "po_on_boundary": po.boundary,
        "gap": gap,
    });
    write_json(&out.join("solve.json"), &report)?;
    emit(&serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn schedule_gamma(s: &ScheduleSpec) -> f64 {
    match s.rule {
        StepRule::Diminishing { gamma, .. } => gamma,
        StepRule::Constant { .. } => 0.0,
    }
}

/// Scalar summary of a replicate set: endpoints, rate fit and bound check.
pub fn summary_json(prepared: &Prepared, summary: &ReplicateSummary) -> CmdResult<serde_json::Value> {
    let settings = &prepared.scenario.settings;
    let schedule = prepared.schedule()?;
    let horizon = settings.horizon;
    let t_min = (horizon / 200).max(1);
    let gamma = schedule_gamma(&schedule);
    let fit = match rate_fit(summary, t_min, horizon, gamma) {
        Ok(slope) => json!({"t_min": t_min, "t_max": horizon, "gamma": gamma, "slope": slope}),
        Err(e) => json!({"t_min": t_min, "t_max": horizon, "gamma": gamma, "slope": null, "note": e.to_string()}),
    };
    let bound = match &prepared.constants {
        Ok(cb) => serde_json::to_value(bound_check(summary, cb, settings.mode(), &schedule))?,
        Err(e) => json!({"checked": false, "skipped_reason": e}),
    };
    Ok(json!({
        "seeds": summary.seeds,
        "failed": summary.failed,
        "horizon": horizon,
        "period": settings.period,
        "scheme": settings.scheme,
        "k": settings.participation(prepared.population.len()).k(prepared.population.len()),
        "batch_size": settings.batch_size,
        "rescaled": settings.rescaled,
        "schedule": schedule,
        "theta_ps": prepared.theta_ps(),
        "communication_count": summary.communication_count,
        "initial_mean_dist_sq": summary.initial_mean(),
        "final_mean_dist_sq": summary.final_mean(),
        "last_decade_mean_dist_sq": if summary.is_empty() { None } else { Some(summary.last_decade_mean()) },
        "rate_fit": fit,
        "bound_check": bound,
    }))
}

fn write_summary_csv(summary: &ReplicateSummary, path: &Path) -> CmdResult {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    summary.write_csv(std::io::BufWriter::new(f))?;
    Ok(())
}

pub fn cmd_run(cfg: &CliConfig, out: &Path) -> CmdResult {
    let prepared = cfg.scenario()?.prepare()?;
    let seeds = cfg.seeds();
    create_dir(out)?;
    let run_cfg = prepared.run_config(seeds[0])?;
    let (trace, abort) = match engine::run(&run_cfg, prepared.theta_ps()) {
        Ok(t) => (t, None),
        Err(a) => (a.trace, Some((a.error, a.step))),
    };
    let trace_path = out.join("trace.csv");
    let f = fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    trace.write_csv(std::io::BufWriter::new(f))?;

    let summary = run_replicates(&prepared, &seeds, false)?;
    if !summary.is_empty() {
        write_summary_csv(&summary, &out.join("summary.csv"))?;
    }
    write_json(&out.join("summary.json"), &summary_json(&prepared, &summary)?)?;
    if let Some((e, step)) = abort {
        return Err(Failure {
            code: EXIT_NUMERIC,
            error: anyhow!("seed {} aborted at step {step}: {e}; partial trace kept", seeds[0]),
        });
    }
    if summary.seeds.is_empty() {
        return Err(Failure { code: EXIT_NUMERIC, error: anyhow!("every seed aborted") });
    }
    for f in &summary.failed {
        eprintln!("warning: seed {} aborted at step {} and was excluded: {}", f.seed, f.step, f.message);
    }
    Ok(())
}

/// Directory name for one sweep cell.
pub fn cell_dir_name(axis: &str, idx: usize, value: &str) -> String {
    let clean: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    format!("cell-{idx:02}-{axis}-{clean}")
}

pub fn cmd_sweep(cfg: &CliConfig, out: &Path) -> CmdResult {
    let decl = cfg.sweep.as_ref().ok_or_else(|| Failure::usage(anyhow!("the config has no \"sweep\" section")))?;
    let cells = sweep(cfg.scenario()?, decl.axis, &decl.values, &cfg.seeds())?;
    create_dir(out)?;
    let path = out.join("sweep.csv");
    let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_sweep_csv(decl.axis, &cells, std::io::BufWriter::new(f))?;
    let mut ok = 0;
    for (i, c) in cells.iter().enumerate() {
        match &c.result {
            Ok((prepared, summary)) => {
                ok += 1;
                let dir = out.join(cell_dir_name(decl.axis.name(), i, &c.value.to_string()));
                create_dir(&dir)?;
                write_summary_csv(summary, &dir.join("summary.csv"))?;
                write_json(&dir.join("summary.json"), &summary_json(prepared, summary)?)?;
            }
            Err(e) => eprintln!("warning: {}={} failed: {e}", decl.axis.name(), c.value),
        }
    }
    if ok == 0 {
        return Err(Failure::usage(anyhow!("every sweep cell failed")));
    }
    Ok(())
}

pub fn cmd_validate(cfg: &CliConfig, out: &Path) -> CmdResult {
    let scenario = cfg.scenario()?;
    let prepared = scenario.prepare()?;
    let settings = &scenario.settings;
    let pc = match &cfg.validate.constants {
        Some(pc) => pc.clone(),
        None => {
            if !prepared.population.is_gaussian_quadratic(&prepared.model) {
                return Err(Failure::usage(anyhow!(
                    "constants cannot be derived for this problem; supply validate.constants"
                )));
            }
            let pc = gaussian_problem_constants(
                &prepared.population,
                &prepared.model,
                prepared.theta_ps(),
                &prepared.theta0,
                settings.delta,
            )?;
            if settings.rescaled { rescale_constants(&pc, &prepared.population.weights())? } else { pc }
        }
    };
    let n = prepared.population.len();
    let mode = settings.mode();
    let cb = constants(&pc, settings.period, settings.k.unwrap_or(n), n)?;
    let schedule = settings.schedule(Some(&cb))?;
    let report = validate_schedule(&schedule, &cb, mode, settings.horizon);
    let mut lemma = Vec::new();
    for &p in &cfg.validate.lemma_powers {
        for &t in &cfg.validate.lemma_steps {
            let r = step_lemma_check(&schedule, cb.mu_tilde, p, t)?;
            lemma.push(json!({"p": p, "t": t, "lhs": r.lhs, "rhs": r.rhs, "holds": r.holds,
                              "first_step_ok": r.first_step_ok, "ratio_ok": r.ratio_ok}));
        }
    }
    let grid: Vec<f64> = (-100..=100).map(f64::from).collect();
    let two_client_ok = grid.iter().all(|&t| {
        let e = two_client_closed_forms(t);
        e.varsigma_ok && e.theta_ps == 0.0 && e.g == t
    });
    let doc = json!({
        "problem_constants": pc,
        "constants": cb,
        "schedule": schedule,
        "schedule_report": report,
        "schedule_all_pass": report.all_pass(),
        "step_lemma": lemma,
        "two_client": {"grid": [-100, 100], "all_pass": two_client_ok, "at_theta_8": two_client_closed_forms(8.0)},
    });
    create_dir(out)?;
    write_json(&out.join("constants.json"), &doc)?;
    emit(&serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn default_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match (stem.as_str(), path.parent().and_then(|p| p.file_name())) {
        ("summary" | "trace", Some(dir)) => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn cmd_plot(inputs: &[PathBuf], labels: &[String], title: Option<&str>, band: bool, out: &Path) -> CmdResult {
    if inputs.is_empty() {
        return Err(Failure::usage(anyhow!("no inputs to plot")));
    }
    let series = inputs
        .iter()
        .enumerate()
        .map(|(i, p)| plot::read_series(p, labels.get(i).cloned().unwrap_or_else(|| default_label(p))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let svg = plot::render_svg(&series, title, band)?;
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
