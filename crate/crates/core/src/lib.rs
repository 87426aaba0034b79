//! Discrete event decision processes (DEDPs) and their solution by
//! variational policy iteration.
//!
//! A DEDP describes a controlled Markov jump process through elementary
//! events with product-form rates. Policy evaluation runs mean-field
//! forward/backward message passing over per-component marginals; policy
//! improvement follows the analytic gradient assembled from those messages.
//! Exact enumeration and Monte Carlo oracles check the approximation on
//! small instances, and a Monte Carlo policy-gradient baseline plus a
//! transportation scenario provide the benchmark.

pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod pg;
pub mod policy;
pub mod scenario;
pub mod simulator;
pub mod vi;

pub use error::{DedpError, Result};
pub use harness::{run_benchmark, RunConfig, Solver};
pub use model::{
    ActionMap, ClockSpec, CoeffExpr, Component, DedpModel, Event, EventDistribution, EventSpec,
    FactorKind, FactorSpec, RewardSpec, RewardTerm, RewardWindow, SplitSpec, StateVec, Trajectory,
};
pub use oracle::{
    duality_gap, enumerate_states, exact_mixture, exact_value, EnumeratedSpace, MixturePosterior,
};
pub use pg::{pg_optimize, PgConfig, PgMode};
pub use policy::{Architecture, ClockBins, FeatureSpec, Policy};
pub use scenario::{
    build_commute_chain, build_synthtown, RoadNetwork, Scenario, ScenarioConfig, ScheduleSpec,
};
pub use simulator::{monte_carlo_value, rollout_return, simulate, RolloutConfig, ValueEstimate};
pub use vi::{
    backward_pass, forward_pass, length_prior, optimize, policy_evaluation, policy_gradient,
    policy_improvement, projected_kernel, Acceptance, Coupling, ElboReport, EpochRecord,
    EvalConfig, Evaluation, LengthPrior, MessageSet, OptimizeConfig, ProjectedKernel,
};
