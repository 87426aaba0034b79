//! Monte Carlo policy-gradient baseline for deterministic policies.
//!
//! The likelihood-ratio estimator needs action noise, which deterministic
//! policies lack, so the gradient of the expected return is estimated from
//! rollouts at perturbed parameters instead: antithetic Gaussian smoothing
//! by default, or central differences along every coordinate. Each `+`/`-`
//! pair shares rollout streams, so the difference only carries the effect
//! of the perturbation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::model::{DedpModel, StateVec};
use crate::policy::Policy;
use crate::simulator::{monte_carlo_value, rollout_returns, RolloutConfig};
use crate::vi::{gradient_norm, EpochRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgMode {
    /// Antithetic Gaussian perturbations of all parameters at once.
    Smoothed,
    /// Central differences along each parameter.
    Coordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgConfig {
    pub epochs: usize,
    pub horizon: usize,
    /// Rollouts per perturbed evaluation.
    pub rollouts: usize,
    /// Antithetic pairs per epoch in smoothed mode.
    pub perturbations: usize,
    /// Perturbation scale: smoothing width or difference step.
    pub sigma: f64,
    pub learning_rate: f64,
    pub mode: PgMode,
    pub optimizer: PgOptimizer,
    pub seed: u64,
    pub mc_rollouts: usize,
    pub mc_seed: u64,
    pub record_time: bool,
}

impl PgConfig {
    pub fn new(epochs: usize, horizon: usize, seed: u64) -> Self {
        PgConfig {
            epochs,
            horizon,
            rollouts: 10,
            perturbations: 8,
            sigma: 0.1,
            learning_rate: 0.05,
            mode: PgMode::Smoothed,
            optimizer: PgOptimizer::Adam,
            seed,
            mc_rollouts: 100,
            mc_seed: 0,
            record_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.rollouts == 0 || self.mc_rollouts == 0 {
            return Err(DedpError::InvalidConfig(
                "horizon and rollout counts must be >= 1".into(),
            ));
        }
        if self.mode == PgMode::Smoothed && self.perturbations == 0 {
            return Err(DedpError::InvalidConfig(
                "need at least one perturbation".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.learning_rate > 0.0) {
            return Err(DedpError::InvalidConfig(
                "sigma and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgResult {
    pub policy: Policy,
    pub history: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), &g)| {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + 1e-8)
            })
            .collect()
    }
}

fn mean_return(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    cfg: &RolloutConfig,
) -> Result<f64> {
    let r = rollout_returns(model, policy, s0, cfg)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Gradient estimate of the expected discounted return at `policy`.
/// `rollout_seed` fixes the common rollout streams of every evaluation.
pub fn estimate_gradient(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &PgConfig,
    noise: &mut ChaCha8Rng,
    rollout_seed: u64,
) -> Result<Vec<f64>> {
    let p = policy.num_params();
    let cfg = RolloutConfig::new(config.horizon, rollout_seed, config.rollouts);
    let shifted = |dir: &[f64], h: f64| {
        policy.with_theta(
            policy
                .theta
                .iter()
                .zip(dir)
                .map(|(t, d)| t + h * d)
                .collect(),
        )
    };
    let mut grad = vec![0.0; p];
    match config.mode {
        PgMode::Smoothed => {
            for _ in 0..config.perturbations {
                let eps: Vec<f64> = (0..p).map(|_| StandardNormal.sample(noise)).collect();
                let up = mean_return(model, &shifted(&eps, config.sigma), s0, &cfg)?;
                let down = mean_return(model, &shifted(&eps, -config.sigma), s0, &cfg)?;
                let w = (up - down) / (2.0 * config.sigma * config.perturbations as f64);
                for (g, e) in grad.iter_mut().zip(&eps) {
                    *g += w * e;
                }
            }
        }
        PgMode::Coordinate => {
            let mut dir = vec![0.0; p];
            for j in 0..p {
                dir[j] = 1.0;
                let up = mean_return(model, &shifted(&dir, config.sigma), s0, &cfg)?;
                let down = mean_return(model, &shifted(&dir, -config.sigma), s0, &cfg)?;
                grad[j] = (up - down) / (2.0 * config.sigma);
                dir[j] = 0.0;
            }
        }
    }
    Ok(grad)
}

/// Gradient ascent on Monte Carlo returns; the history matches the VI
/// optimizer's rows with an empty `elbo`.
pub fn pg_optimize(
    model: &DedpModel,
    init: &Policy,
    s0: &StateVec,
    config: &PgConfig,
) -> Result<PgResult> {
    config.validate()?;
    init.validate_for(model)?;
    let start = std::time::Instant::now();
    let elapsed = || {
        if config.record_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let mc_cfg = RolloutConfig::new(config.horizon, config.mc_seed, config.mc_rollouts);
    let mut noise = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(init.num_params());
    let mut policy = init.clone();
    let mc = monte_carlo_value(model, &policy, s0, &mc_cfg)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        elbo: None,
        mc_value_mean: mc.mean,
        mc_value_stderr: mc.std_error,
        grad_norm: 0.0,
        wall_ms: elapsed(),
    }];
    for epoch in 1..=config.epochs {
        // Rollout streams differ per epoch but never coincide with the
        // evaluation streams.
        let rollout_seed = config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64)
            ^ 0x5EED;
        let grad = estimate_gradient(model, &policy, s0, config, &mut noise, rollout_seed)?;
        let dir = match config.optimizer {
            PgOptimizer::Sgd => grad.clone(),
            PgOptimizer::Adam => adam.direction(&grad),
        };
        let theta = policy
            .theta
            .iter()
            .zip(&dir)
            .map(|(t, d)| t + config.learning_rate * d)
            .collect();
        policy = policy.with_theta(theta);
        let mc = monte_carlo_value(model, &policy, s0, &mc_cfg)?;
        history.push(EpochRecord {
            epoch,
            elbo: None,
            mc_value_mean: mc.mean,
            mc_value_stderr: mc.std_error,
            grad_norm: gradient_norm(&grad),
            wall_ms: elapsed(),
        });
    }
    Ok(PgResult { policy, history })
}
