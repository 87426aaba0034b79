#![allow(dead_code)]

use dedp_core::model::{
    ActionMap, ClockSpec, CoeffExpr, Component, DedpModel, EventSpec, FactorSpec, RewardSpec,
    RewardTerm,
};
use dedp_core::scenario::{Edge, Location, LocationKind};
use dedp_core::{build_commute_chain, FeatureSpec, Policy, RoadNetwork};

/// One component on `0..=4`: arrivals at rate `0.4 c0`, departures at
/// `0.1 c1 x`. Reward `x + 0.1`.
pub fn queue() -> DedpModel {
    DedpModel {
        components: vec![Component::new("q", 4)],
        events: vec![
            EventSpec {
                name: "arrive".into(),
                delta: vec![1],
                coeff_index: 0,
                factors: vec![FactorSpec::constant(0, 0.4)],
            },
            EventSpec {
                name: "leave".into(),
                delta: vec![-1],
                coeff_index: 1,
                factors: vec![FactorSpec::linear(0, 0.1)],
            },
        ],
        action_map: ActionMap::Identity { dim: 2 },
        reward: RewardSpec {
            components: vec![RewardTerm {
                coef: 1.0,
                offset: 0.1,
                windows: vec![],
            }],
        },
        gamma: 0.9,
        clock: Some(ClockSpec { steps_per_day: 12 }),
        initial: vec![1],
    }
}

/// Two independent queues; every factor reads only its own component.
pub fn independent_pair() -> DedpModel {
    let mut events = Vec::new();
    for c in 0..2usize {
        let mut up = vec![0, 0];
        up[c] = 1;
        let mut down = vec![0, 0];
        down[c] = -1;
        events.push(EventSpec {
            name: format!("up{c}"),
            delta: up,
            coeff_index: 2 * c,
            factors: vec![FactorSpec::constant(c, 0.2)],
        });
        events.push(EventSpec {
            name: format!("down{c}"),
            delta: down,
            coeff_index: 2 * c + 1,
            factors: vec![FactorSpec::linear(c, 0.05)],
        });
    }
    DedpModel {
        components: vec![Component::new("a", 4), Component::new("b", 3)],
        events,
        action_map: ActionMap::Identity { dim: 4 },
        reward: RewardSpec {
            components: vec![
                RewardTerm {
                    coef: 1.0,
                    offset: 0.2,
                    windows: vec![],
                },
                RewardTerm {
                    coef: 0.5,
                    offset: 0.0,
                    windows: vec![],
                },
            ],
        },
        gamma: 0.85,
        clock: Some(ClockSpec { steps_per_day: 10 }),
        initial: vec![2, 0],
    }
}

/// The first queue of [`independent_pair`] alone.
pub fn independent_single(c: usize) -> DedpModel {
    let pair = independent_pair();
    let mut events: Vec<EventSpec> = pair.events[2 * c..2 * c + 2].to_vec();
    for (i, ev) in events.iter_mut().enumerate() {
        ev.delta = vec![ev.delta[c]];
        ev.coeff_index = i;
        for f in ev.factors.iter_mut() {
            f.component = 0;
        }
    }
    DedpModel {
        components: vec![pair.components[c].clone()],
        events,
        action_map: ActionMap::Identity { dim: 2 },
        reward: RewardSpec {
            components: vec![pair.reward.components[c].clone()],
        },
        gamma: pair.gamma,
        clock: pair.clock,
        initial: vec![pair.initial[c]],
    }
}

/// Prey `x` grows when predators `y` are few; predators grow with prey.
pub fn predator_prey() -> DedpModel {
    DedpModel {
        components: vec![Component::new("prey", 5), Component::new("pred", 4)],
        events: vec![
            EventSpec {
                name: "birth".into(),
                delta: vec![1, 0],
                coeff_index: 0,
                factors: vec![FactorSpec::linear(0, 0.05), FactorSpec::congestion(1, 6.0)],
            },
            EventSpec {
                name: "eat".into(),
                delta: vec![-1, 1],
                coeff_index: 1,
                factors: vec![FactorSpec::linear(0, 0.04), FactorSpec::linear(1, 0.5)],
            },
            EventSpec {
                name: "die".into(),
                delta: vec![0, -1],
                coeff_index: 2,
                factors: vec![FactorSpec::linear(1, 0.05)],
            },
        ],
        action_map: ActionMap::Identity { dim: 3 },
        reward: RewardSpec {
            components: vec![
                RewardTerm {
                    coef: 1.0,
                    offset: 0.0,
                    windows: vec![],
                },
                RewardTerm {
                    coef: 0.3,
                    offset: 0.5,
                    windows: vec![],
                },
            ],
        },
        gamma: 0.9,
        clock: Some(ClockSpec { steps_per_day: 8 }),
        initial: vec![3, 1],
    }
}

/// Commute chain over three locations with two individuals.
pub fn chain3() -> DedpModel {
    build_commute_chain(3, 2)
}

/// Two queues and a single action that feeds the first. A full first queue
/// blocks arrivals to the second, which pays more per occupant, so the best
/// constant action is interior.
pub fn tradeoff_queue() -> DedpModel {
    DedpModel {
        components: vec![Component::new("a", 3), Component::new("b", 3)],
        events: vec![
            EventSpec {
                name: "arrive_a".into(),
                delta: vec![1, 0],
                coeff_index: 0,
                factors: vec![],
            },
            EventSpec {
                name: "leave_a".into(),
                delta: vec![-1, 0],
                coeff_index: 1,
                factors: vec![FactorSpec::linear(0, 0.05)],
            },
            EventSpec {
                name: "arrive_b".into(),
                delta: vec![0, 1],
                coeff_index: 1,
                factors: vec![FactorSpec::congestion(0, 3.0), FactorSpec::constant(1, 0.3)],
            },
            EventSpec {
                name: "leave_b".into(),
                delta: vec![0, -1],
                coeff_index: 1,
                factors: vec![FactorSpec::linear(1, 0.05)],
            },
        ],
        action_map: ActionMap::Expressions {
            num_actions: 1,
            coefficients: vec![
                CoeffExpr {
                    scale: 0.3,
                    rate_action: Some(0),
                    split: None,
                },
                CoeffExpr {
                    scale: 1.0,
                    rate_action: None,
                    split: None,
                },
            ],
        },
        reward: RewardSpec {
            components: vec![
                RewardTerm::constant_coef(0.3),
                RewardTerm::constant_coef(1.0),
            ],
        },
        gamma: 0.9,
        clock: Some(ClockSpec { steps_per_day: 8 }),
        initial: vec![0, 0],
    }
}

/// Linear-sigmoid policy reading scaled populations, clock bins and a bias,
/// with weights drawn uniformly from `[-scale, scale]`.
pub fn population_policy(model: &DedpModel, seed: u64, scale: f64) -> Policy {
    let spd = model.clock.map_or(1, |c| c.steps_per_day);
    let features = FeatureSpec {
        population_scale: Some(
            model
                .components
                .iter()
                .map(|c| 1.0 / c.domain_max.max(1) as f64)
                .collect(),
        ),
        clock_bins: Some(dedp_core::ClockBins {
            steps_per_day: spd,
            bins: 2,
        }),
        bias: true,
    };
    let mut p = Policy::new(
        dedp_core::Architecture::LinearSigmoid,
        features,
        model.num_actions(),
        seed,
    );
    p.theta.iter_mut().for_each(|t| *t *= scale / 0.01);
    p
}

/// Clock-binned linear-sigmoid policy, which ignores populations.
pub fn clock_policy(model: &DedpModel, bins: u32, seed: u64, scale: f64) -> Policy {
    let spd = model.clock.map_or(1, |c| c.steps_per_day);
    let mut p = Policy::new(
        dedp_core::Architecture::LinearSigmoid,
        FeatureSpec::clock_only(spd, bins),
        model.num_actions(),
        seed,
    );
    p.theta.iter_mut().for_each(|t| *t *= scale / 0.01);
    p
}

/// Home, work and one road: home -> road -> work -> home.
pub fn small_town() -> RoadNetwork {
    RoadNetwork {
        locations: vec![
            Location {
                name: "home".into(),
                kind: LocationKind::Home,
                capacity: None,
            },
            Location {
                name: "work".into(),
                kind: LocationKind::Work,
                capacity: None,
            },
            Location {
                name: "road".into(),
                kind: LocationKind::Link,
                capacity: Some(4),
            },
        ],
        edges: vec![
            Edge {
                from: 0,
                to: 2,
                free_flow: 0.9,
            },
            Edge {
                from: 2,
                to: 1,
                free_flow: 0.9,
            },
            Edge {
                from: 1,
                to: 0,
                free_flow: 0.9,
            },
        ],
        split_sharpness: 8.0,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
