//! Named recipes that regenerate the experiment figures end to end.

use std::path::{Path, PathBuf};

use perfed_core::experiments::{
    AxisValue, CreditExperimentSpec, GaussianExperimentSpec, Problem, RunSettings, Scenario, ScheduleChoice,
    SchemeKind, SweepAxis,
};

use crate::config::{CliConfig, SweepDecl};
use crate::{cell_dir_name, cmd_plot, cmd_run, cmd_sweep, CmdResult};

/// Shared diminishing schedule for the Gaussian recipes: the full-participation
/// theorem schedule for `E = 1` on the homogeneous setup.
pub const GAUSSIAN_BETA: f64 = 40.0;
pub const GAUSSIAN_GAMMA: f64 = 1600.0;
pub const GAUSSIAN_HORIZON: u64 = 200_000;
pub const GAUSSIAN_SEEDS: u64 = 20;
/// Start with `(theta0 - theta_ps)^2 = 100` on the homogeneous setup.
pub const GAUSSIAN_THETA0: f64 = 90.0;

pub const CREDIT_BETA: f64 = 5.0;
pub const CREDIT_GAMMA: f64 = 200.0;
pub const CREDIT_HORIZON: u64 = 5_000;
pub const CREDIT_SEEDS: u64 = 5;
pub const CREDIT_PERIOD: u64 = 5;
pub const CREDIT_K: usize = 5;
pub const CREDIT_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Recipe {
    FigConvergence,
    FigImpactE,
    FigImpactK,
    FigHeterogeneity,
    FigCredit,
    FigConstantLr,
}

impl Recipe {
    pub fn slug(self) -> &'static str {
        match self {
            Recipe::FigConvergence => "fig-convergence",
            Recipe::FigImpactE => "fig-impact-e",
            Recipe::FigImpactK => "fig-impact-k",
            Recipe::FigHeterogeneity => "fig-heterogeneity",
            Recipe::FigCredit => "fig-credit",
            Recipe::FigConstantLr => "fig-constant-lr",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Scale {
    quick: bool,
}

impl Scale {
    fn horizon(self, t: u64) -> u64 {
        if self.quick { (t / 100).max(200) } else { t }
    }

    fn seeds(self, n: u64) -> u64 {
        if self.quick { n.min(2) } else { n }
    }
}

/// The Gaussian setup with the given heterogeneity and the shared schedule.
pub fn gaussian_scenario(var_m: f64, var_eps: f64, horizon: u64) -> Scenario {
    let problem = GaussianExperimentSpec { var_m, var_eps, ..GaussianExperimentSpec::homogeneous() };
    let mut settings = RunSettings::new(horizon);
    settings.schedule = ScheduleChoice::Diminishing { beta: GAUSSIAN_BETA, gamma: GAUSSIAN_GAMMA };
    settings.theta0 = Some(vec![GAUSSIAN_THETA0]);
    Scenario { problem: Problem::Gaussian(problem), settings }
}

/// Synthetic credit scoring with `E = 5`, minibatches of 4 and a diminishing step.
pub fn credit_scenario(scheme: SchemeKind, horizon: u64) -> Scenario {
    let mut settings = RunSettings::new(horizon);
    settings.period = CREDIT_PERIOD;
    settings.scheme = scheme;
    settings.k = Some(CREDIT_K);
    settings.batch_size = CREDIT_BATCH;
    settings.schedule = ScheduleChoice::Diminishing { beta: CREDIT_BETA, gamma: CREDIT_GAMMA };
    Scenario { problem: Problem::Credit(CreditExperimentSpec::synthetic(0)), settings }
}

fn write_config(dir: &Path, cfg: &CliConfig) -> CmdResult {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn run_sweep(dir: &Path, scenario: Scenario, axis: SweepAxis, values: Vec<AxisValue>, seed: u64, reps: u64, title: &str) -> CmdResult {
    let mut cfg = CliConfig::from_scenario(scenario);
    cfg.seed = seed;
    cfg.replicates = reps;
    cfg.sweep = Some(SweepDecl { axis, values: values.clone() });
    write_config(dir, &cfg)?;
    cmd_sweep(&cfg, dir)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let p = dir.join(cell_dir_name(axis.name(), i, &v.to_string())).join("summary.csv");
        if p.exists() {
            inputs.push(p);
            labels.push(format!("{}={v}", axis.name()));
        }
    }
    cmd_plot(&inputs, &labels, Some(title), true, &dir.join("plot.svg"))
}

fn run_single(dir: &Path, scenario: Scenario, seed: u64, reps: u64) -> CmdResult<PathBuf> {
    let mut cfg = CliConfig::from_scenario(scenario);
    cfg.seed = seed;
    cfg.replicates = reps;
    write_config(dir, &cfg)?;
    cmd_run(&cfg, dir)?;
    Ok(dir.join("summary.csv"))
}

fn nums(v: &[f64]) -> Vec<AxisValue> {
    v.iter().map(|&x| AxisValue::Number(x)).collect()
}

fn schemes() -> Vec<AxisValue> {
    [SchemeKind::Full, SchemeKind::Scheme1, SchemeKind::Scheme2].into_iter().map(AxisValue::Scheme).collect()
}

pub fn run_recipe(recipe: Recipe, out: &Path, seed: u64, quick: bool) -> CmdResult {
    let sc = Scale { quick };
    let t = sc.horizon(GAUSSIAN_HORIZON);
    let reps = sc.seeds(GAUSSIAN_SEEDS);
    match recipe {
        Recipe::FigConvergence => {
            let mut s = gaussian_scenario(0.6, 0.1, t);
            s.settings.k = Some(20);
            run_sweep(out, s, SweepAxis::Scheme, schemes(), seed, reps, "Participation schemes")
        }
        Recipe::FigImpactE => {
            for scheme in [SchemeKind::Scheme1, SchemeKind::Scheme2] {
                let mut s = gaussian_scenario(0.6, 0.1, t);
                s.settings.scheme = scheme;
                s.settings.k = Some(20);
                let name = AxisValue::Scheme(scheme).to_string();
                let title = format!("Impact of E ({name}, K=20)");
                run_sweep(&out.join(&name), s, SweepAxis::Period, nums(&[1.0, 5.0, 10.0, 50.0]), seed, reps, &title)?;
            }
            Ok(())
        }
        Recipe::FigImpactK => {
            for scheme in [SchemeKind::Scheme1, SchemeKind::Scheme2] {
                let mut s = gaussian_scenario(0.6, 0.1, t);
                s.settings.scheme = scheme;
                s.settings.period = 5;
                let name = AxisValue::Scheme(scheme).to_string();
                let title = format!("Impact of K ({name}, E=5)");
                run_sweep(&out.join(&name), s, SweepAxis::K, nums(&[5.0, 10.0, 20.0, 25.0]), seed, reps, &title)?;
            }
            Ok(())
        }
        Recipe::FigHeterogeneity => {
            for scheme in [SchemeKind::Scheme1, SchemeKind::Scheme2] {
                let name = AxisValue::Scheme(scheme).to_string();
                let mut s = gaussian_scenario(0.6, 0.1, t);
                s.settings.scheme = scheme;
                s.settings.k = Some(20);
                let dir = out.join(&name);
                run_sweep(&dir.join("var_m"), s.clone(), SweepAxis::VarM, nums(&[0.0, 0.6, 6.0]), seed, reps, &format!("Data heterogeneity ({name})"))?;
                run_sweep(&dir.join("var_eps"), s, SweepAxis::VarEps, nums(&[0.1, 0.6]), seed, reps, &format!("Shift heterogeneity ({name})"))?;
            }
            Ok(())
        }
        Recipe::FigCredit => {
            let t = sc.horizon(CREDIT_HORIZON);
            let reps = sc.seeds(CREDIT_SEEDS);
            let s = credit_scenario(SchemeKind::Full, t);
            run_sweep(&out.join("schemes"), s, SweepAxis::Scheme, schemes(), seed, reps, "Credit scoring")?;
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for b in [1usize, 16] {
                let mut s = credit_scenario(SchemeKind::Full, t);
                s.settings.batch_size = b;
                s.settings.start_at_stable = true;
                inputs.push(run_single(&out.join(format!("batch-{b}")), s, seed, reps)?);
                labels.push(format!("batch {b}"));
            }
            cmd_plot(&inputs, &labels, Some("Credit scoring from the stable point"), true, &out.join("batch.svg"))
        }
        Recipe::FigConstantLr => {
            let mut inputs = Vec::new();
            let mut s = gaussian_scenario(0.0, 0.0, t);
            s.settings.period = 10;
            s.settings.schedule = ScheduleChoice::Constant { eta: 0.02 };
            inputs.push(run_single(&out.join("constant"), s.clone(), seed, reps)?);
            s.settings.schedule = ScheduleChoice::Diminishing { beta: GAUSSIAN_BETA, gamma: GAUSSIAN_GAMMA };
            inputs.push(run_single(&out.join("diminishing"), s, seed, reps)?);
            let labels = vec!["constant 0.02".to_string(), format!("{GAUSSIAN_BETA}/(t+{GAUSSIAN_GAMMA})")];
            cmd_plot(&inputs, &labels, Some("Constant vs diminishing step size (E=10)"), true, &out.join("plot.svg"))
        }
    }
}
