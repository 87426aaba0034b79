//! Fixtures shared by the solver benchmarks.

use dedp_core::{Architecture, Policy, Scenario, ScenarioConfig, ScheduleSpec};

/// Desk-scale SynthTown with the benchmark reward schedule.
pub fn synthtown(n_individuals: u32) -> Scenario {
    let schedule = ScheduleSpec {
        steps_per_day: 144,
        work_start: 54,
        work_end: 102,
        beta_work: 10.0,
        ..Default::default()
    };
    ScenarioConfig::Synthtown {
        n_individuals,
        network: None,
        schedule,
        gamma: 0.999,
        clock_bins: 24,
    }
    .build()
    .expect("valid scenario")
}

/// Seeded linear-sigmoid policy over the scenario's features.
pub fn initial_policy(scenario: &Scenario, seed: u64) -> Policy {
    Policy::new(
        Architecture::LinearSigmoid,
        scenario.features.clone(),
        scenario.model.num_actions(),
        seed,
    )
}
