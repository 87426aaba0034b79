//! The Monte Carlo policy-gradient baseline against exact values.

mod common;

use common::*;
use dedp_core::oracle::{exact_value, DEFAULT_CAP};
use dedp_core::pg::{estimate_gradient, pg_optimize, PgConfig, PgMode};
use dedp_core::{DedpModel, Policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value(model: &DedpModel, policy: &Policy, h: usize) -> f64 {
    exact_value(model, policy, &model.initial_state(), h, DEFAULT_CAP)
        .unwrap()
        .value
}

#[test]
fn one_parameter_run_reaches_the_grid_optimum() {
    let model = tradeoff_queue();
    let init = Policy::constant_actions(&[0.5]);
    let h = 60;
    let (best_theta, best_value) = (-160..=80)
        .map(|i| i as f64 * 0.025)
        .map(|t| (t, value(&model, &init.with_theta(vec![t]), h)))
        .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    assert!(
        best_theta > -4.0 && best_theta < 2.0,
        "optimum {best_theta} is not interior"
    );

    let mut cfg = PgConfig::new(60, h, 5);
    cfg.mode = PgMode::Coordinate;
    cfg.rollouts = 1000;
    cfg.sigma = 0.2;
    cfg.learning_rate = 0.1;
    cfg.mc_rollouts = 10;
    let res = pg_optimize(&model, &init, &model.initial_state(), &cfg).unwrap();
    let theta = res.policy.theta[0];
    assert!(
        (theta - best_theta).abs() <= 0.4,
        "theta {theta} vs grid optimum {best_theta}"
    );
    assert!(value(&model, &res.policy, h) >= best_value - 0.01);
}

#[test]
fn gradient_estimate_aligns_with_exact_value_gradient() {
    let h = 30;
    let models = [chain3(), queue(), predator_prey()];
    for (i, model) in models.iter().enumerate() {
        for seed in 0..3 {
            let policy = clock_policy(model, 2, seed, 1.0);
            let exact: Vec<f64> = (0..policy.num_params())
                .map(|j| {
                    let (mut up, mut down) = (policy.theta.clone(), policy.theta.clone());
                    up[j] += 1e-5;
                    down[j] -= 1e-5;
                    (value(model, &policy.with_theta(up), h)
                        - value(model, &policy.with_theta(down), h))
                        / 2e-5
                })
                .collect();
            let mut cfg = PgConfig::new(1, h, seed);
            cfg.rollouts = 2000;
            cfg.perturbations = 16;
            let mut noise = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate_gradient(
                model,
                &policy,
                &model.initial_state(),
                &cfg,
                &mut noise,
                1000 + seed,
            )
            .unwrap();
            let dot: f64 = est.iter().zip(&exact).map(|(a, b)| a * b).sum();
            assert!(dot > 0.0, "model {i} seed {seed}: inner product {dot}");
        }
    }
}
