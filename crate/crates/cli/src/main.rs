//! `dedp`: simulate, solve and benchmark discrete event decision processes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dedp_core::harness::{initial_policy, run_seed, write_history, ScenarioRef};
use dedp_core::oracle::DEFAULT_CAP;
use dedp_core::{
    exact_value, policy_evaluation, run_benchmark, simulate, DedpError, EvalConfig, Event, Policy,
    RolloutConfig, RunConfig, Scenario, ScenarioConfig, Solver,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "dedp",
    version,
    about = "Discrete event decision processes: simulation, exact oracles and solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one trajectory and print it as CSV.
    Simulate(Common),
    /// Exact expected discounted reward by enumeration.
    Oracle(Common),
    /// Mean-field policy evaluation; prints the ELBO report as JSON.
    Evaluate(Common),
    /// Optimize a policy with one solver; prints the epoch history as CSV.
    Optimize(Common),
    /// Run every solver on every seed and write the report files.
    Benchmark(Common),
    /// Scenario utilities.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Build a scenario and print its size and worst-case rate bound.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Run config, or a bare scenario config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; stdout when omitted, except for `benchmark`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    solver: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Policy checkpoint to use instead of the seed's initial policy.
    #[arg(long)]
    policy: Option<PathBuf>,
}

/// Config plus the scenario it names, with command-line overrides applied.
struct Loaded {
    config: RunConfig,
    scenario: Scenario,
}

impl Loaded {
    fn seed(&self) -> u64 {
        self.config.seeds[0]
    }

    fn horizon(&self) -> usize {
        self.config.resolve_horizon(&self.scenario)
    }

    fn policy(&self, path: Option<&Path>) -> Result<Policy> {
        let policy = match path {
            Some(p) => Policy::from_json(&read(p)?)?,
            None => initial_policy(&self.config, &self.scenario, self.seed()),
        };
        policy.validate_for(&self.scenario.model)?;
        Ok(policy)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DedpError::Io(format!("{}: {e}", path.display())).into())
}

fn load(args: &Common) -> Result<Loaded> {
    let text = read(&args.config)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| DedpError::InvalidConfig(format!("{}: {e}", args.config.display())))?;
    let mut config = if value.get("scenario").is_some() {
        RunConfig::load(&args.config)?
    } else {
        let scenario = ScenarioConfig::from_json(&text)?;
        serde_json::from_value(json!({ "scenario": scenario, "epochs": 0, "seeds": [0] }))?
    };
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if args.horizon.is_some() {
        config.horizon = args.horizon;
    }
    if let Some(name) = &args.solver {
        config.solvers = vec![Solver::parse(name)?];
    }
    if args.out.is_some() {
        config.out_dir = args.out.clone();
    }
    config.validate()?;
    let scenario = config.scenario_config()?.build()?;
    Ok(Loaded { config, scenario })
}

/// `path` when given, else stdout.
fn output(dir: Option<&Path>, file: &str) -> Result<Box<dyn Write>> {
    match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(DedpError::from)?;
            let f = fs::File::create(d.join(file)).map_err(DedpError::from)?;
            Ok(Box::new(io::BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn cmd_simulate(args: &Common) -> Result<()> {
    let l = load(args)?;
    let policy = l.policy(args.policy.as_deref())?;
    let model = &l.scenario.model;
    let traj = simulate(
        model,
        &policy,
        &l.scenario.initial,
        &RolloutConfig::new(l.horizon(), l.seed(), 1),
    )?;
    let mut out = csv::Writer::from_writer(output(
        args.out.as_deref(),
        &format!("trajectory_seed{}.csv", l.seed()),
    )?);
    let mut header = vec![
        "t".to_string(),
        "clock".into(),
        "event".into(),
        "reward".into(),
    ];
    header.extend(model.components.iter().map(|c| c.name.clone()));
    out.write_record(&header)?;
    for (t, s) in traj.states.iter().enumerate() {
        // The event column names the event fired after state t.
        let event = match traj.events.get(t) {
            Some(Event::Fire(v)) => model.events[*v].name.clone(),
            Some(Event::Null) => "null".into(),
            None => String::new(),
        };
        let mut rec = vec![
            t.to_string(),
            s.clock.to_string(),
            event,
            model.reward(s).to_string(),
        ];
        rec.extend(s.populations.iter().map(|x| x.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(DedpError::from)?;
    Ok(())
}

fn cmd_oracle(args: &Common) -> Result<()> {
    let l = load(args)?;
    let policy = l.policy(args.policy.as_deref())?;
    let v = exact_value(
        &l.scenario.model,
        &policy,
        &l.scenario.initial,
        l.horizon(),
        DEFAULT_CAP,
    )?;
    print_json(&json!({
        "value": v.value,
        "truncation_bound": v.truncation_bound,
        "num_states": v.num_states,
        "horizon": l.horizon(),
    }))
}

fn cmd_evaluate(args: &Common) -> Result<()> {
    let l = load(args)?;
    let policy = l.policy(args.policy.as_deref())?;
    let vi = &l.config.vi;
    let cfg = EvalConfig {
        horizon: l.horizon(),
        tol: vi.eval_tol,
        max_iters: vi.max_iters,
        coupling: vi.coupling,
    };
    let ev = policy_evaluation(&l.scenario.model, &policy, &l.scenario.initial, &cfg)?
        .into_converged()?;
    let r = ev.report;
    print_json(&json!({
        "elbo": r.elbo,
        "exp_elbo": r.value,
        "iterations": r.iterations,
        "residual": r.residual,
    }))
}

fn cmd_optimize(args: &Common) -> Result<()> {
    let l = load(args)?;
    let solver = l.config.solvers[0];
    let run = run_seed(&l.config, &l.scenario, solver, l.seed())?;
    let stem = format!("{}_seed{}", solver.name(), run.seed);
    write_history(
        output(args.out.as_deref(), &format!("{stem}.csv"))?,
        &run.history,
    )?;
    if let Some(dir) = &args.out {
        fs::write(
            dir.join(format!("{stem}_policy.json")),
            run.policy.to_json(),
        )
        .map_err(DedpError::from)?;
    }
    Ok(())
}

fn cmd_benchmark(args: &Common) -> Result<()> {
    let l = load(args)?;
    let dir = match (&args.out, &l.config.out_dir) {
        (Some(d), _) | (None, Some(d)) => d.clone(),
        (None, None) => {
            return Err(DedpError::InvalidConfig("benchmark needs --out or out_dir".into()).into())
        }
    };
    let report = run_benchmark(&l.config, &dir)?;
    for row in &report.summary.solvers {
        eprintln!(
            "{}: TRPE {:.4} +- {:.4}, EC {:.1}, {} ms",
            row.solver.name(),
            row.trpe_mean,
            row.trpe_stderr,
            row.ec_mean,
            row.wall_ms
        );
    }
    Ok(())
}

fn cmd_validate(config: &Path) -> Result<()> {
    let text = read(config)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| DedpError::InvalidConfig(format!("{}: {e}", config.display())))?;
    let scenario = if value.get("scenario").is_some() {
        let cfg = RunConfig::load(config)?;
        match &cfg.scenario {
            ScenarioRef::Path(p) => ScenarioConfig::from_json(&read(p)?)?,
            ScenarioRef::Inline(c) => c.clone(),
        }
    } else {
        ScenarioConfig::from_json(&text)?
    };
    print_json(&serde_json::to_value(scenario.summary()?)?)
}

/// 2 for configuration errors, 3 for numerical failures, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DedpError>() {
            return match e {
                DedpError::Io(_) => 4,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { 4 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Scenario(ScenarioCommand::Validate { config }) => cmd_validate(config),
    };
    match result.context("dedp") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.root_cause());
            ExitCode::from(exit_code(&e))
        }
    }
}
