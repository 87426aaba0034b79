//! Randomized invariants over states, actions and policy parameters.

mod common;

use common::*;
use dedp_core::oracle::{enumerate_states, exact_mixture, exact_value, DEFAULT_CAP};
use dedp_core::vi::point_mass;
use dedp_core::{
    build_commute_chain, build_synthtown, forward_pass, policy_evaluation, projected_kernel,
    simulate, Architecture, DedpModel, EvalConfig, FeatureSpec, Policy, RolloutConfig,
    ScheduleSpec, StateVec,
};
use proptest::prelude::*;

fn models() -> Vec<DedpModel> {
    vec![
        queue(),
        independent_pair(),
        predator_prey(),
        chain3(),
        tradeoff_queue(),
    ]
}

fn town() -> DedpModel {
    build_synthtown(3, &small_town(), &ScheduleSpec::default(), 0.99, 4)
        .unwrap()
        .model
}

/// Some state of `model` chosen by `pick`, respecting each domain.
fn state_of(model: &DedpModel, pick: &[u32], clock: u32) -> StateVec {
    let pops = model
        .components
        .iter()
        .zip(pick.iter().cycle())
        .map(|(c, p)| p % (c.domain_max + 1))
        .collect();
    StateVec::new(pops, clock)
}

fn random_policy(model: &DedpModel, seed: u64, scale: f64, perceptron: bool) -> Policy {
    if perceptron {
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
                bins: 3,
            }),
            bias: true,
        };
        let mut p = Policy::new(
            Architecture::Perceptron { hidden: 4 },
            features,
            model.num_actions(),
            seed,
        );
        p.theta.iter_mut().for_each(|t| *t *= scale / 0.01);
        p
    } else {
        population_policy(model, seed, scale)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn event_probabilities_sum_to_one(
        which in 0usize..5,
        pick in prop::collection::vec(0u32..20, 5),
        clock in 0u32..50,
        actions in prop::collection::vec(0.0f64..=1.0, 4),
    ) {
        let model = &models()[which];
        let s = state_of(model, &pick, clock);
        let a: Vec<f64> = actions.iter().cycle().take(model.num_actions()).copied().collect();
        let dist = model.event_distribution(&s, &a).unwrap();
        prop_assert!(dist.rates.iter().all(|r| *r >= 0.0));
        prop_assert!(dist.null >= 0.0);
        prop_assert!((dist.total() - 1.0).abs() <= 1e-12);
        for (next, p) in model.marginalize_events(&s, &a).unwrap() {
            prop_assert!(p >= 0.0);
            for (x, c) in next.populations.iter().zip(&model.components) {
                prop_assert!(*x <= c.domain_max);
            }
        }
    }

    #[test]
    fn duality_gap_is_nonnegative(
        which in 0usize..3,
        seed in 0u64..1000,
        raw in prop::collection::vec(0.0f64..1.0, 1..4000),
    ) {
        let model = [queue(), predator_prey(), independent_pair()][which].clone();
        let policy = population_policy(&model, seed, 1.0);
        let mix = exact_mixture(&model, &policy, &model.initial_state(), 4, DEFAULT_CAP).unwrap();
        let n = mix.entries.len();
        let mut q: Vec<f64> = raw.iter().cycle().take(n).map(|v| v + 1e-6).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= s);
        let gap = mix.gap(&q).unwrap();
        prop_assert!(gap >= -1e-12, "gap {}", gap);
    }

    #[test]
    fn projected_kernel_rows_are_stochastic(which in 0usize..5, seed in 0u64..1000, t in 0usize..12) {
        let model = &models()[which];
        let policy = population_policy(model, seed, 2.0);
        let fwd = forward_pass(model, &policy, &point_mass(model, &model.initial_state()), 0, 12).unwrap();
        let marginals = &fwd.alpha[t];
        let kernel = projected_kernel(model, &policy, marginals, t as u32).unwrap();
        for (m, c) in model.components.iter().enumerate() {
            for x in 0..c.domain_size() {
                prop_assert!((kernel.row_sum(m, x) - 1.0).abs() <= 1e-12);
                prop_assert!(kernel.rows[m][x].iter().all(|(_, _, p)| *p >= 0.0));
            }
        }
    }

    #[test]
    fn messages_are_normalized_and_nonnegative(which in 0usize..5, seed in 0u64..1000, h in 1usize..25) {
        let model = &models()[which];
        let policy = population_policy(model, seed, 1.0);
        let ev = policy_evaluation(model, &policy, &model.initial_state(), &EvalConfig::with_horizon(h)).unwrap();
        for alpha_t in ev.messages.alpha() {
            for a in alpha_t {
                prop_assert!(a.iter().all(|v| *v >= 0.0));
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        for beta_t in &ev.messages.beta {
            for b in beta_t {
                prop_assert!(b.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
        prop_assert!(ev.report.elbo.is_finite());
    }

    #[test]
    fn policy_jacobian_matches_finite_differences(
        which in 0usize..5,
        seed in 0u64..1000,
        perceptron in any::<bool>(),
        pick in prop::collection::vec(0u32..20, 5),
        clock in 0u32..40,
    ) {
        let model = &models()[which];
        let policy = random_policy(model, seed, 1.0, perceptron);
        let s = state_of(model, &pick, clock);
        let pops = s.as_f64();
        let jac = policy.action_jacobian(&pops, clock);
        let coeff_jac = policy.rate_coefficient_jacobian(model, &s);
        let p = policy.num_params();
        let k = model.action_map.num_coeffs();
        let eps = 1e-6;
        for j in 0..p {
            let (mut up, mut down) = (policy.theta.clone(), policy.theta.clone());
            up[j] += eps;
            down[j] -= eps;
            let (pu, pd) = (policy.with_theta(up), policy.with_theta(down));
            let (au, ad) = (pu.act(&pops, clock), pd.act(&pops, clock));
            for a in 0..policy.num_actions {
                let fd = (au[a] - ad[a]) / (2.0 * eps);
                prop_assert!((jac[a * p + j] - fd).abs() <= 1e-6, "action {} param {}", a, j);
            }
            let (cu, cd) = (model.action_map.coefficients(&au), model.action_map.coefficients(&ad));
            for i in 0..k {
                let fd = (cu[i] - cd[i]) / (2.0 * eps);
                prop_assert!((coeff_jac[i * p + j] - fd).abs() <= 1e-6, "coefficient {} param {}", i, j);
            }
        }
    }

    #[test]
    fn actions_are_deterministic_and_bounded(
        seed in 0u64..1000,
        perceptron in any::<bool>(),
        pick in prop::collection::vec(0u32..20, 5),
        clock in 0u32..200,
    ) {
        let model = predator_prey();
        let policy = random_policy(&model, seed, 5.0, perceptron);
        let s = state_of(&model, &pick, clock);
        let a = policy.act_state(&s);
        prop_assert_eq!(&a, &policy.act_state(&s));
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let restored = Policy::from_json(&policy.to_json()).unwrap();
        prop_assert_eq!(a, restored.act_state(&s));
    }

    #[test]
    fn trajectories_conserve_the_population(seed in 0u64..10_000, chain in any::<bool>()) {
        let (model, total) = if chain { (build_commute_chain(3, 2), 2) } else { (town(), 3) };
        let policy = random_policy(&model, seed, 2.0, false);
        let traj = simulate(&model, &policy, &model.initial_state(), &RolloutConfig::new(80, seed, 1)).unwrap();
        for s in &traj.states {
            prop_assert_eq!(s.populations.iter().sum::<u32>(), total);
        }
    }

    #[test]
    fn built_scenarios_never_overflow_the_rate_budget(
        pick in 0usize..1000,
        clock in 0u32..500,
        actions in prop::collection::vec(0.0f64..=1.0, 64),
    ) {
        for model in [town(), build_commute_chain(3, 2)] {
            let space = enumerate_states(&model, DEFAULT_CAP).unwrap();
            let s = StateVec::new(space.states[pick % space.len()].clone(), clock);
            let a: Vec<f64> = actions.iter().cycle().take(model.num_actions()).copied().collect();
            let dist = model.event_distribution(&s, &a).unwrap();
            prop_assert!(dist.rates.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn exact_value_grows_with_horizon(which in 0usize..5, seed in 0u64..1000, h in 0usize..12) {
        let model = &models()[which];
        let policy = population_policy(model, seed, 1.0);
        let s0 = model.initial_state();
        let v0 = exact_value(model, &policy, &s0, h, DEFAULT_CAP).unwrap().value;
        let v1 = exact_value(model, &policy, &s0, h + 1, DEFAULT_CAP).unwrap().value;
        prop_assert!(v1 >= v0);
    }
}
