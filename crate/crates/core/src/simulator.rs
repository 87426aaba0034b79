//! Seeded rollouts and Monte Carlo value estimates.
//!
//! Rollout `i` of a batch draws from ChaCha stream `i` of the base seed,
//! so batches evaluated in parallel reproduce the serial result bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::model::{DedpModel, Event, StateVec, Trajectory};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub seed: u64,
    pub num_rollouts: usize,
}

impl RolloutConfig {
    pub fn new(horizon: usize, seed: u64, num_rollouts: usize) -> Self {
        RolloutConfig {
            horizon,
            seed,
            num_rollouts,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.num_rollouts == 0 {
            return Err(DedpError::InvalidConfig(
                "horizon and num_rollouts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    /// Zero when `num_samples == 1`.
    pub std_error: f64,
    pub num_samples: usize,
}

impl ValueEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        ValueEstimate {
            mean,
            std_error,
            num_samples: n,
        }
    }
}

/// Smallest `H` with `gamma^H <= tol`.
pub fn default_horizon(gamma: f64, tol: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    ((tol.ln() / gamma.ln()).ceil() as usize).max(1)
}

/// RNG for rollout `stream` of a batch seeded by `seed`.
pub fn rollout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws one event from the categorical distribution at `state`.
pub fn sample_event<R: Rng>(
    model: &DedpModel,
    state: &StateVec,
    action: &[f64],
    rng: &mut R,
) -> Result<Event> {
    let dist = model.event_distribution(state, action)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (v, &p) in dist.rates.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(Event::Fire(v));
        }
    }
    Ok(Event::Null)
}

/// Runs `horizon` steps, calling `visit(t, state)` on every state `s_0..s_H`.
pub fn rollout_visit<R: Rng, F: FnMut(usize, &StateVec, Option<(Event, &[f64])>)>(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    rng: &mut R,
    mut visit: F,
) -> Result<()> {
    let mut state = s0.clone();
    for t in 0..horizon {
        let action = policy.act_state(&state);
        let ev = sample_event(model, &state, &action, rng)?;
        visit(t, &state, Some((ev, &action)));
        state = model.apply_event(&state, ev)?;
    }
    visit(horizon, &state, None);
    Ok(())
}

/// One trajectory of length `config.horizon` from stream 0 of `config.seed`.
pub fn simulate(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &RolloutConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let mut rng = rollout_rng(config.seed, 0);
    let mut traj = Trajectory::default();
    rollout_visit(model, policy, s0, config.horizon, &mut rng, |_, s, step| {
        traj.states.push(s.clone());
        if let Some((ev, a)) = step {
            traj.events.push(ev);
            traj.actions.push(a.to_vec());
        }
    })?;
    Ok(traj)
}

fn discounted_return<R: Rng>(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    let mut discount = 1.0;
    rollout_visit(model, policy, s0, horizon, rng, |_, s, _| {
        total += discount * model.reward(s);
        discount *= model.gamma;
    })?;
    Ok(total)
}

/// `sum_{t=0}^{H} gamma^t R(s_t)` for one sampled trajectory.
pub fn rollout_return(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &RolloutConfig,
) -> Result<f64> {
    config.validate()?;
    discounted_return(
        model,
        policy,
        s0,
        config.horizon,
        &mut rollout_rng(config.seed, 0),
    )
}

/// Returns of rollouts `0..num_rollouts`, in stream order.
pub fn rollout_returns(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &RolloutConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    (0..config.num_rollouts as u64)
        .into_par_iter()
        .map(|i| {
            discounted_return(
                model,
                policy,
                s0,
                config.horizon,
                &mut rollout_rng(config.seed, i),
            )
        })
        .collect()
}

pub fn monte_carlo_value(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &RolloutConfig,
) -> Result<ValueEstimate> {
    let samples = rollout_returns(model, policy, s0, config)?;
    Ok(ValueEstimate::from_samples(&samples))
}

/// Mean population of every component at every step, `(H + 1) x M`.
pub fn mean_occupancy(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &RolloutConfig,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let m = model.num_populations();
    let per_rollout: Vec<Vec<Vec<f64>>> = (0..config.num_rollouts as u64)
        .into_par_iter()
        .map(|i| {
            let mut occ = vec![vec![0.0; m]; config.horizon + 1];
            rollout_visit(
                model,
                policy,
                s0,
                config.horizon,
                &mut rollout_rng(config.seed, i),
                |t, s, _| {
                    for (o, &x) in occ[t].iter_mut().zip(&s.populations) {
                        *o = x as f64;
                    }
                },
            )?;
            Ok(occ)
        })
        .collect::<Result<_>>()?;
    let n = config.num_rollouts as f64;
    let mut mean = vec![vec![0.0; m]; config.horizon + 1];
    for occ in &per_rollout {
        for (row, r) in mean.iter_mut().zip(occ) {
            for (a, b) in row.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    for row in mean.iter_mut() {
        for a in row.iter_mut() {
            *a /= n;
        }
    }
    Ok(mean)
}
