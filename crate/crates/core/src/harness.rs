//! Seeded benchmark runs comparing the VI optimizer with the PG baseline.
//!
//! Outputs, all under the run's output directory:
//! - `<solver>_seed<seed>.csv`: per-epoch history
//! - `<solver>_seed<seed>_policy.json`: final policy checkpoint
//! - `occupancy_initial.csv`, `occupancy_<solver>.csv`: mean population of
//!   every location per step, averaged over seeds and evaluation rollouts
//! - `summary.json`: per-solver TRPE, epochs to converge and wall time
//!
//! CSVs depend only on the configuration; wall time appears in the summary
//! and, when `record_time` is set, in the `wall_ms` column.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::pg::{pg_optimize, PgConfig, PgMode, PgOptimizer};
use crate::policy::{Architecture, Policy};
use crate::scenario::{Scenario, ScenarioConfig, ScenarioSummary};
use crate::simulator::{default_horizon, mean_occupancy, RolloutConfig};
use crate::vi::{
    optimize, Acceptance, Coupling, EpochRecord, EvalConfig, ImprovementConfig, OptimizeConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Vi,
    Pg,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Vi => "vi",
            Solver::Pg => "pg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(Solver::Vi),
            "pg" => Ok(Solver::Pg),
            other => Err(DedpError::InvalidConfig(format!(
                "unknown solver {other:?}"
            ))),
        }
    }
}

/// Scenario given inline or as a path relative to the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Path(PathBuf),
    Inline(ScenarioConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViSettings {
    pub step: f64,
    pub line_search: bool,
    pub max_backtracks: usize,
    pub acceptance: Acceptance,
    pub coupling: Coupling,
    pub max_step: f64,
    pub improvement_tol: f64,
    pub eval_tol: f64,
    pub max_iters: usize,
}

impl Default for ViSettings {
    fn default() -> Self {
        ViSettings {
            step: 1.0,
            line_search: true,
            max_backtracks: 30,
            acceptance: Acceptance::Elbo,
            coupling: Coupling::LinearResponse,
            max_step: 1e6,
            improvement_tol: 0.0,
            eval_tol: 1e-10,
            max_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgSettings {
    pub rollouts: usize,
    pub perturbations: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub mode: PgMode,
    pub optimizer: PgOptimizer,
}

impl Default for PgSettings {
    fn default() -> Self {
        PgSettings {
            rollouts: 10,
            perturbations: 8,
            sigma: 0.1,
            learning_rate: 0.05,
            mode: PgMode::Smoothed,
            optimizer: PgOptimizer::Adam,
        }
    }
}

fn default_architecture() -> Architecture {
    Architecture::LinearSigmoid
}
fn default_mc_rollouts() -> usize {
    100
}
fn default_occupancy_rollouts() -> usize {
    10
}
fn default_solvers() -> Vec<Solver> {
    vec![Solver::Vi, Solver::Pg]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioRef,
    #[serde(default = "default_solvers")]
    pub solvers: Vec<Solver>,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default = "default_mc_rollouts")]
    pub mc_rollouts: usize,
    #[serde(default = "default_occupancy_rollouts")]
    pub occupancy_rollouts: usize,
    #[serde(default)]
    pub vi: ViSettings,
    #[serde(default)]
    pub pg: PgSettings,
    #[serde(default)]
    pub record_time: bool,
}

impl RunConfig {
    /// Reads a config file; a relative scenario path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| DedpError::InvalidConfig(format!("run config: {e}")))?;
        if let ScenarioRef::Path(p) = &cfg.scenario {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.scenario = ScenarioRef::Path(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DedpError::InvalidConfig(
                "at least one seed required".into(),
            ));
        }
        if self.solvers.is_empty() {
            return Err(DedpError::InvalidConfig(
                "at least one solver required".into(),
            ));
        }
        if self.mc_rollouts == 0 || self.occupancy_rollouts == 0 {
            return Err(DedpError::InvalidConfig(
                "rollout counts must be >= 1".into(),
            ));
        }
        if self.horizon == Some(0) {
            return Err(DedpError::InvalidConfig("horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        match &self.scenario {
            ScenarioRef::Inline(c) => Ok(c.clone()),
            ScenarioRef::Path(p) => ScenarioConfig::from_json(&fs::read_to_string(p)?),
        }
    }

    pub fn resolve_horizon(&self, scenario: &Scenario) -> usize {
        self.horizon
            .unwrap_or_else(|| default_horizon(scenario.model.gamma, 1e-6))
    }
}

/// Seed-derived streams: policy initialization and solver noise use the
/// seed itself; Monte Carlo evaluation uses a disjoint fixed stream so all
/// solvers are scored on common random numbers.
pub fn mc_seed(seed: u64) -> u64 {
    seed ^ 0x00E7_A1F0_0000_0000
}

const OCCUPANCY_SEED: u64 = 0x0CC0_9A7C;

pub fn initial_policy(config: &RunConfig, scenario: &Scenario, seed: u64) -> Policy {
    Policy::new(
        config.architecture.clone(),
        scenario.features.clone(),
        scenario.model.num_actions(),
        seed,
    )
}

/// First epoch whose value lies within 1% of the mean of the final ten.
pub fn epochs_to_converge(values: &[f64]) -> usize {
    if values.is_empty() {
        return 0;
    }
    let tail = &values[values.len().saturating_sub(10)..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    values
        .iter()
        .position(|v| (v - plateau).abs() <= 0.01 * plateau.abs())
        .unwrap_or(values.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub solver: Solver,
    pub seed: u64,
    pub policy: Policy,
    pub history: Vec<EpochRecord>,
    pub wall_ms: u64,
}

pub fn run_seed(
    config: &RunConfig,
    scenario: &Scenario,
    solver: Solver,
    seed: u64,
) -> Result<SeedRun> {
    let horizon = config.resolve_horizon(scenario);
    let init = initial_policy(config, scenario, seed);
    let start = Instant::now();
    let (policy, history) = match solver {
        Solver::Vi => {
            let eval = EvalConfig {
                horizon,
                tol: config.vi.eval_tol,
                max_iters: config.vi.max_iters,
                coupling: config.vi.coupling,
            };
            let mut oc = OptimizeConfig::new(config.epochs, eval);
            oc.improvement = ImprovementConfig {
                step: config.vi.step,
                line_search: config.vi.line_search,
                max_backtracks: config.vi.max_backtracks,
                acceptance: config.vi.acceptance,
            };
            oc.improvement_tol = config.vi.improvement_tol;
            oc.max_step = config.vi.max_step;
            oc.mc_rollouts = config.mc_rollouts;
            oc.mc_seed = mc_seed(seed);
            oc.mc_horizon = horizon;
            oc.record_time = config.record_time;
            let r = optimize(&scenario.model, &init, &scenario.initial, &oc)?;
            (r.policy, r.history)
        }
        Solver::Pg => {
            let s = &config.pg;
            let pc = PgConfig {
                epochs: config.epochs,
                horizon,
                rollouts: s.rollouts,
                perturbations: s.perturbations,
                sigma: s.sigma,
                learning_rate: s.learning_rate,
                mode: s.mode,
                optimizer: s.optimizer,
                seed,
                mc_rollouts: config.mc_rollouts,
                mc_seed: mc_seed(seed),
                record_time: config.record_time,
            };
            let r = pg_optimize(&scenario.model, &init, &scenario.initial, &pc)?;
            (r.policy, r.history)
        }
    };
    Ok(SeedRun {
        solver,
        seed,
        policy,
        history,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: Solver,
    pub seeds: Vec<u64>,
    /// Final-epoch Monte Carlo value per seed.
    pub trpe: Vec<f64>,
    pub trpe_mean: f64,
    pub trpe_stderr: f64,
    pub epochs_to_converge: Vec<usize>,
    pub ec_mean: f64,
    pub epochs_run: Vec<usize>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkSummary {
    pub scenario: ScenarioSummary,
    pub horizon: usize,
    pub epochs: usize,
    pub solvers: Vec<SolverSummary>,
    /// Mean over seeds of the initial policies' Monte Carlo value.
    pub initial_value_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub summary: BenchmarkSummary,
    pub runs: Vec<SeedRun>,
    /// Per solver, then the initial policies: `(label, (H+1) x locations)`.
    pub occupancy: Vec<(String, Vec<Vec<f64>>)>,
    pub location_names: Vec<String>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn average_occupancy(
    scenario: &Scenario,
    policies: &[&Policy],
    horizon: usize,
    rollouts: usize,
) -> Result<Vec<Vec<f64>>> {
    let cfg = RolloutConfig::new(horizon, OCCUPANCY_SEED, rollouts);
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for p in policies {
        let occ = mean_occupancy(&scenario.model, p, &scenario.initial, &cfg)?;
        match acc.as_mut() {
            None => acc = Some(occ),
            Some(a) => a
                .iter_mut()
                .flatten()
                .zip(occ.iter().flatten())
                .for_each(|(a, b)| *a += b),
        }
    }
    let mut acc = acc.expect("at least one policy");
    let n = policies.len() as f64;
    acc.iter_mut().flatten().for_each(|a| *a /= n);
    Ok(acc)
}

/// Runs every solver on every seed; nothing is written.
pub fn run_benchmark_in_memory(config: &RunConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let sc_cfg = config.scenario_config()?;
    let scenario = sc_cfg.build()?;
    let horizon = config.resolve_horizon(&scenario);
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    let mut occupancy = Vec::new();
    for &solver in &config.solvers {
        let mut solver_runs = Vec::new();
        for &seed in &config.seeds {
            solver_runs.push(run_seed(config, &scenario, solver, seed)?);
        }
        let trpe: Vec<f64> = solver_runs
            .iter()
            .map(|r| r.history.last().expect("epoch 0").mc_value_mean)
            .collect();
        let (trpe_mean, trpe_stderr) = mean_stderr(&trpe);
        let ec: Vec<usize> = solver_runs
            .iter()
            .map(|r| {
                epochs_to_converge(
                    &r.history
                        .iter()
                        .map(|h| h.mc_value_mean)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let ec_mean = ec.iter().sum::<usize>() as f64 / ec.len() as f64;
        let policies: Vec<&Policy> = solver_runs.iter().map(|r| &r.policy).collect();
        occupancy.push((
            solver.name().to_string(),
            average_occupancy(&scenario, &policies, horizon, config.occupancy_rollouts)?,
        ));
        summaries.push(SolverSummary {
            solver,
            seeds: config.seeds.clone(),
            trpe,
            trpe_mean,
            trpe_stderr,
            epochs_to_converge: ec,
            ec_mean,
            epochs_run: solver_runs.iter().map(|r| r.history.len() - 1).collect(),
            wall_ms: solver_runs.iter().map(|r| r.wall_ms).sum(),
        });
        runs.extend(solver_runs);
    }
    let inits: Vec<Policy> = config
        .seeds
        .iter()
        .map(|&s| initial_policy(config, &scenario, s))
        .collect();
    let init_refs: Vec<&Policy> = inits.iter().collect();
    occupancy.push((
        "initial".to_string(),
        average_occupancy(&scenario, &init_refs, horizon, config.occupancy_rollouts)?,
    ));
    let initial_value_mean = runs
        .iter()
        .filter(|r| r.solver == config.solvers[0])
        .map(|r| r.history[0].mc_value_mean)
        .sum::<f64>()
        / config.seeds.len() as f64;
    let summary = BenchmarkSummary {
        scenario: sc_cfg.summary()?,
        horizon,
        epochs: config.epochs,
        solvers: summaries,
        initial_value_mean,
    };
    let location_names = scenario
        .model
        .components
        .iter()
        .map(|c| c.name.clone())
        .collect();
    Ok(BenchmarkReport {
        summary,
        runs,
        occupancy,
        location_names,
    })
}

#[derive(Serialize)]
struct CsvRow {
    epoch: usize,
    elbo: Option<f64>,
    mc_value_mean: f64,
    mc_value_stderr: f64,
    grad_norm: f64,
    wall_ms: u64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_history(fs::File::create(path)?, history)
}

/// Per-epoch history as CSV into any writer.
pub fn write_history<W: std::io::Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(CsvRow {
            epoch: r.epoch,
            elbo: r.elbo,
            mc_value_mean: r.mc_value_mean,
            mc_value_stderr: r.mc_value_stderr,
            grad_norm: r.grad_norm,
            wall_ms: r.wall_ms,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_occupancy_csv(path: &Path, names: &[String], occupancy: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (t, row) in occupancy.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the benchmark and writes every report file into `out_dir`.
pub fn run_benchmark(config: &RunConfig, out_dir: &Path) -> Result<BenchmarkReport> {
    let report = run_benchmark_in_memory(config)?;
    fs::create_dir_all(out_dir)?;
    for run in &report.runs {
        let stem = format!("{}_seed{}", run.solver.name(), run.seed);
        write_history_csv(&out_dir.join(format!("{stem}.csv")), &run.history)?;
        fs::write(
            out_dir.join(format!("{stem}_policy.json")),
            run.policy.to_json(),
        )?;
    }
    for (label, occ) in &report.occupancy {
        write_occupancy_csv(
            &out_dir.join(format!("occupancy_{label}.csv")),
            &report.location_names,
            occ,
        )?;
    }
    let json =
        serde_json::to_string_pretty(&report.summary).map_err(|e| DedpError::Io(e.to_string()))?;
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ec_definition() {
        let v: Vec<f64> = (0..30)
            .map(|i| if i < 5 { i as f64 } else { 10.0 })
            .collect();
        assert_eq!(epochs_to_converge(&v), 5);
        assert_eq!(epochs_to_converge(&[3.0]), 0);
        let rising: Vec<f64> = (0..20).map(|i| i as f64).collect();
        // Plateau is the mean of 10..=19, i.e. 14.5; nothing lies within 1%.
        assert_eq!(epochs_to_converge(&rising), 19);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"scenario":{"kind":"commute_chain","n_locations":2,"n_individuals":1},"epochs":2,"seeds":[1]}"#,
        )
        .unwrap();
        assert_eq!(cfg.solvers, vec![Solver::Vi, Solver::Pg]);
        assert!(cfg.validate().is_ok());
        let bad = RunConfig {
            seeds: vec![],
            ..cfg
        };
        assert!(bad.validate().is_err());
        assert!(Solver::parse("ac").is_err());
    }
}
