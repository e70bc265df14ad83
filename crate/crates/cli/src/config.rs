//! Strict JSON configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use perfed_core::experiments::{AxisValue, Problem, Scenario, SweepAxis};
use perfed_core::theory::ProblemConstants;
use serde::{Deserialize, Serialize};

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDecl {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveDecl {
    /// Search box for the optimum; one pair is broadcast to every coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub po_box: Option<Vec<(f64, f64)>>,
}

fn default_powers() -> Vec<u32> {
    vec![1, 2, 3]
}

fn default_steps() -> Vec<u64> {
    vec![10, 100, 1_000, 10_000]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateDecl {
    /// Overrides the constants derived from the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ProblemConstants>,
    #[serde(default = "default_powers")]
    pub lemma_powers: Vec<u32>,
    #[serde(default = "default_steps")]
    pub lemma_steps: Vec<u64>,
}

impl Default for ValidateDecl {
    fn default() -> Self {
        ValidateDecl { constants: None, lemma_powers: default_powers(), lemma_steps: default_steps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotDecl {
    pub inputs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default = "default_band")]
    pub band: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

fn default_band() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    /// First run seed; replicates use `seed, seed + 1, ...`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepDecl>,
    #[serde(default)]
    pub solve: SolveDecl,
    #[serde(default)]
    pub validate: ValidateDecl,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn from_scenario(scenario: Scenario) -> Self {
        CliConfig {
            scenario: Some(scenario),
            seed: 0,
            replicates: 1,
            sweep: None,
            solve: SolveDecl::default(),
            validate: ValidateDecl::default(),
            plot: None,
            out_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(Scenario { problem: Problem::Credit(c), .. }) = &mut self.scenario {
            if let Some(p) = &mut c.csv_path {
                fix(p);
            }
        }
        if let Some(plot) = &mut self.plot {
            plot.inputs.iter_mut().for_each(fix);
        }
        if let Some(p) = &mut self.out_dir {
            fix(p);
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates.max(1)).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn scenario(&self) -> Result<&Scenario> {
        self.scenario.as_ref().context("the config has no \"scenario\" section")
    }
}
