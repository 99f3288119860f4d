use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::builtin::{BirthDeath, TwoSexLogistic};
use crate::model::{AgeFn, InitialBand, InitialCondition, ModelSpec, PairTestFunction, RateModel, TestFunction};
use crate::monogamy::{CoupleBand, MonogamyInitial, MonogamyLogistic, MonogamyModel, MonogamySpec, SingleBand};

/// Model section: a named family with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    BirthDeath(BirthDeath),
    TwoSexLogistic(TwoSexLogistic),
    Custom(ModelSpec),
    MonogamyLogistic(MonogamyLogistic),
    Monogamy(MonogamySpec),
}

/// A model ready to run, of either state space.
#[derive(Clone, Debug)]
pub enum BuiltModel {
    Single(RateModel),
    Monogamy(MonogamyModel),
}

impl ModelConfig {
    pub fn is_monogamy(&self) -> bool {
        matches!(self, ModelConfig::MonogamyLogistic(_) | ModelConfig::Monogamy(_))
    }

    pub fn spec(&self) -> Option<ModelSpec> {
        match self {
            ModelConfig::BirthDeath(m) => Some(m.spec()),
            ModelConfig::TwoSexLogistic(m) => Some(m.spec()),
            ModelConfig::Custom(s) => Some(s.clone()),
            _ => None,
        }
    }

    pub fn monogamy_spec(&self) -> Option<MonogamySpec> {
        match self {
            ModelConfig::MonogamyLogistic(m) => Some(m.spec()),
            ModelConfig::Monogamy(s) => Some(s.clone()),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<BuiltModel> {
        match (self.spec(), self.monogamy_spec()) {
            (Some(s), _) => Ok(BuiltModel::Single(RateModel::new(s)?)),
            (None, Some(s)) => Ok(BuiltModel::Monogamy(MonogamyModel::new(s)?)),
            (None, None) => unreachable!("every family has a spec"),
        }
    }
}

/// Initial population per unit of K: `bands` for single-age models,
/// `females`/`males`/`couples` for the monogamy model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub bands: Vec<InitialBand>,
    #[serde(default)]
    pub females: Vec<SingleBand>,
    #[serde(default)]
    pub males: Vec<SingleBand>,
    #[serde(default)]
    pub couples: Vec<CoupleBand>,
}

impl InitialConfig {
    pub fn single(&self) -> InitialCondition {
        InitialCondition::new(self.bands.clone())
    }

    pub fn monogamy(&self) -> MonogamyInitial {
        MonogamyInitial {
            females: self.females.clone(),
            males: self.males.clone(),
            couples: self.couples.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub t_end: f64,
    pub k_list: Vec<u64>,
    pub replicates: usize,
    pub master_seed: u64,
    /// Number of intervals of the uniform checkpoint grid on `[0, T]`.
    #[serde(default = "default_grid_intervals")]
    pub grid_intervals: usize,
    /// Time step of the limit solvers.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Age step of grid-based solvers and the Lyapunov moments.
    #[serde(default)]
    pub da: Option<f64>,
    /// Cohorts per initial band for the cohort solver.
    #[serde(default = "default_atoms")]
    pub atoms_per_band: usize,
    /// Worker threads for replicate batches; `None` uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_grid_intervals() -> usize {
    20
}

fn default_atoms() -> usize {
    400
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Martingale,
    SolveLimit,
    SolverCheck,
    Lln,
    EstimateZ,
    LyapunovMoments,
    CltReport,
    Immigration,
    MonogamySimulate,
    MonogamyLimit,
    MonogamyLln,
    Accounting,
    MonogamyFluct,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Martingale => "martingale",
            Stage::SolveLimit => "solve_limit",
            Stage::SolverCheck => "solver_check",
            Stage::Lln => "lln",
            Stage::EstimateZ => "estimate_z",
            Stage::LyapunovMoments => "lyapunov_moments",
            Stage::CltReport => "clt_report",
            Stage::Immigration => "immigration",
            Stage::MonogamySimulate => "monogamy_simulate",
            Stage::MonogamyLimit => "monogamy_limit",
            Stage::MonogamyLln => "monogamy_lln",
            Stage::Accounting => "accounting",
            Stage::MonogamyFluct => "monogamy_fluct",
        }
    }

    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::EstimateZ | Stage::LyapunovMoments => &[Stage::SolveLimit],
            Stage::CltReport => &[Stage::SolveLimit, Stage::EstimateZ, Stage::LyapunovMoments],
            _ => &[],
        }
    }

    pub fn is_monogamy(self) -> bool {
        matches!(
            self,
            Stage::MonogamySimulate
                | Stage::MonogamyLimit
                | Stage::MonogamyLln
                | Stage::Accounting
                | Stage::MonogamyFluct
        )
    }
}

/// Test function reference: a built-in name or a full definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FunctionSpec {
    Named(String),
    Single(TestFunction),
    Couple(PairTestFunction),
}

impl FunctionSpec {
    /// Built-ins: `total`, `count<k>`, `female`, `male`, `age_sum`,
    /// `window:<lo>:<hi>:<ramp>`.
    pub fn single(&self) -> Result<TestFunction> {
        match self {
            FunctionSpec::Single(f) => Ok(f.clone()),
            FunctionSpec::Couple(f) => Err(Error::contract(format!(
                "couple test function {} used with a single-age model",
                f.name
            ))),
            FunctionSpec::Named(n) => match n.as_str() {
                "total" => Ok(TestFunction::total()),
                "female" => Ok(TestFunction::indicator(0)),
                "male" => Ok(TestFunction::indicator(1)),
                "age_sum" | "age" => Ok(TestFunction::age()),
                _ => {
                    if let Some(k) = n.strip_prefix("count") {
                        if let Ok(k) = k.parse() {
                            return Ok(TestFunction::indicator(k));
                        }
                    }
                    if let Some(rest) = n.strip_prefix("window:") {
                        let p: Vec<f64> = rest.split(':').filter_map(|x| x.parse().ok()).collect();
                        if p.len() == 3 {
                            return Ok(TestFunction::window(p[0], p[1], p[2]));
                        }
                    }
                    Err(Error::contract(format!("unknown test function {n:?}")))
                }
            },
        }
    }

    /// Built-ins: `head_count`, `couples`, `single_females`, `single_males`,
    /// `units`, `age_sum`.
    pub fn couple(&self) -> Result<PairTestFunction> {
        match self {
            FunctionSpec::Couple(f) => Ok(f.clone()),
            FunctionSpec::Single(f) => Err(Error::contract(format!(
                "single-age test function {} used with the monogamy model",
                f.name
            ))),
            FunctionSpec::Named(n) => match n.as_str() {
                "head_count" => Ok(PairTestFunction::head_count()),
                "couples" => Ok(PairTestFunction::couple_count()),
                "single_females" => Ok(PairTestFunction::single_females()),
                "single_males" => Ok(PairTestFunction::single_males()),
                "units" => Ok(PairTestFunction::units()),
                "age_sum" | "age" => Ok(PairTestFunction::marriage_neutral(
                    "age_sum",
                    AgeFn::linear(0.0, 1.0),
                    AgeFn::linear(0.0, 1.0),
                )),
                _ => Err(Error::contract(format!("unknown couple test function {n:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory, relative to the output root.
    pub dir: PathBuf,
    pub functions: Vec<FunctionSpec>,
    pub stages: Vec<Stage>,
    /// Also dump the event log of replicate 0 at the smallest K.
    #[serde(default)]
    pub event_log: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceReference {
    /// Variance from the Lyapunov moment solver.
    Lyapunov,
    /// Scalar closed form of the constant-rate birth-death model.
    ClosedForm,
}

/// Tolerances of the verdict-producing stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Replicate means must lie within this many standard errors.
    pub standard_errors: f64,
    /// Relative tolerance of the bracket against the closed-form compensator.
    pub qv_closed_form: f64,
    pub lln_ratio_min: f64,
    pub solver_relative: f64,
    pub frozen_relative: f64,
    pub variance_tolerance: f64,
    pub variance_reference: VarianceReference,
    pub flatness_max: f64,
    pub min_replicates: usize,
    pub bootstrap_resamples: usize,
    pub immigration_ratio: [f64; 2],
    pub symmetry: Option<f64>,
    pub min_events: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            standard_errors: 3.0,
            qv_closed_form: 0.05,
            lln_ratio_min: 3.0,
            solver_relative: 1e-3,
            frozen_relative: 1e-6,
            variance_tolerance: 0.15,
            variance_reference: VarianceReference::Lyapunov,
            flatness_max: 1.5,
            min_replicates: 200,
            bootstrap_resamples: 2000,
            immigration_ratio: [2.5, 6.0],
            symmetry: None,
            min_events: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    pub run: RunConfig,
    pub outputs: OutputConfig,
    #[serde(default)]
    pub checks: CheckConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.check_schema().map_err(|message| Error::Config {
            path: path.to_path_buf(),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((ExperimentConfig::from_toml(&text, path)?, text))
    }

    fn check_schema(&self) -> std::result::Result<(), String> {
        let r = &self.run;
        if !(r.t_end > 0.0) {
            return Err("run.t_end must be positive".into());
        }
        if r.k_list.is_empty() || r.k_list[0] == 0 || r.k_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err("run.k_list must be non-empty, positive and strictly increasing".into());
        }
        if r.replicates == 0 {
            return Err("run.replicates must be positive".into());
        }
        if r.grid_intervals == 0 {
            return Err("run.grid_intervals must be positive".into());
        }
        for (name, v) in [("run.dt", r.dt), ("run.da", r.da)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(format!("{name} must be positive"));
                }
            }
        }
        if r.workers == Some(0) {
            return Err("run.workers must be positive".into());
        }
        if self.outputs.stages.is_empty() {
            return Err("outputs.stages must name at least one stage".into());
        }
        let mono = self.model.is_monogamy();
        for s in &self.outputs.stages {
            if s.is_monogamy() != mono {
                return Err(format!(
                    "stage {} does not apply to the {} model",
                    s.name(),
                    if mono { "monogamy" } else { "single-age" }
                ));
            }
        }
        if mono {
            if !self.initial.bands.is_empty() {
                return Err("initial.bands is for single-age models; use females/males/couples".into());
            }
        } else if !(self.initial.females.is_empty() && self.initial.males.is_empty() && self.initial.couples.is_empty()) {
            return Err("initial.females/males/couples are for the monogamy model; use bands".into());
        }
        for f in &self.outputs.functions {
            let ok = if mono { f.couple().map(|_| ()) } else { f.single().map(|_| ()) };
            ok.map_err(|e| format!("outputs.functions: {e}"))?;
        }
        if self.outputs.functions.is_empty() {
            return Err("outputs.functions must name at least one test function".into());
        }
        Ok(())
    }

    /// Requested stages plus their prerequisites, in execution order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut set: BTreeSet<Stage> = BTreeSet::new();
        for s in &self.outputs.stages {
            set.insert(*s);
            set.extend(s.requires());
        }
        if self.checks.variance_reference == VarianceReference::ClosedForm
            && !self.outputs.stages.contains(&Stage::LyapunovMoments)
        {
            set.remove(&Stage::LyapunovMoments);
        }
        set.into_iter().collect()
    }

    pub fn single_functions(&self) -> Result<Vec<TestFunction>> {
        self.outputs.functions.iter().map(FunctionSpec::single).collect()
    }

    pub fn couple_functions(&self) -> Result<Vec<PairTestFunction>> {
        self.outputs.functions.iter().map(FunctionSpec::couple).collect()
    }

    pub fn grid(&self) -> Vec<f64> {
        crate::simulator::uniform_grid(self.run.t_end, self.run.grid_intervals)
    }

    pub fn output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) => r.join(&self.outputs.dir),
            None => self.outputs.dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
family = "two_sex_logistic"
beta = 2.0
fertile_from = 0.5
fertile_to = 2.5
ramp = 0.5
capacity = 3.0
death0 = 0.2
death1 = 0.1
female_prob = 0.5
max_age = 10.0

[[initial.bands]]
kind = 0
age_lo = 0.0
age_hi = 2.0
mass = 1.0

[run]
t_end = 1.0
k_list = [100]
replicates = 2
master_seed = 1
dt = 0.01

[outputs]
dir = "out"
functions = ["total", "female", "window:0.5:2.5:0.5"]
stages = ["clt_report"]
"#;

    #[test]
    fn parses_and_closes_stage_dependencies() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("x.toml")).unwrap();
        assert_eq!(
            cfg.stages(),
            vec![Stage::SolveLimit, Stage::EstimateZ, Stage::LyapunovMoments, Stage::CltReport]
        );
        let fs = cfg.single_functions().unwrap();
        assert_eq!(fs[1], TestFunction::indicator(0));
        assert_eq!(fs[2], TestFunction::window(0.5, 2.5, 0.5));
        assert_eq!(cfg.checks, CheckConfig::default());
    }

    #[test]
    fn unknown_key_reports_location() {
        let bad = MINIMAL.replace("replicates = 2", "replicates = 2\nreplicas = 3");
        let err = ExperimentConfig::from_toml(&bad, Path::new("x.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("replicas") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn decreasing_k_list_rejected() {
        let bad = MINIMAL.replace("k_list = [100]", "k_list = [100, 10]");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad, Path::new("x.toml")),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn monogamy_stage_needs_monogamy_model() {
        let bad = MINIMAL.replace(r#"stages = ["clt_report"]"#, r#"stages = ["accounting"]"#);
        assert!(ExperimentConfig::from_toml(&bad, Path::new("x.toml")).is_err());
    }
}
