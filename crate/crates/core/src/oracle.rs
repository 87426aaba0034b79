//! Brute-force references for small instances: exact discounted value by
//! backward dynamic programming, exact joint marginals, and the full
//! trajectory mixture `r(T, m, xi) = gamma^T P(xi) R_T^m(s_T^m)`.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use crate::error::{DedpError, Result};
use crate::model::{DedpModel, Event, StateVec};
use crate::policy::Policy;

pub const DEFAULT_CAP: usize = 1_000_000;

/// Population vectors reachable from a start state, in BFS order.
#[derive(Debug, Clone)]
pub struct EnumeratedSpace {
    pub states: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    /// `successors[i][v]`: index of the state reached when event `v` fires
    /// from state `i`, or `None` when `v` has zero propensity there.
    successors: Vec<Vec<Option<usize>>>,
}

impl EnumeratedSpace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, populations: &[u32]) -> Option<usize> {
        self.index.get(populations).copied()
    }

    pub fn successor(&self, i: usize, v: usize) -> Option<usize> {
        self.successors[i][v]
    }
}

/// States structurally reachable from `model.initial`.
pub fn enumerate_states(model: &DedpModel, cap: usize) -> Result<EnumeratedSpace> {
    enumerate_from(model, &model.initial, cap)
}

/// States reachable from `start` through events with positive propensity.
/// The cap applies to the number of reachable states.
pub fn enumerate_from(model: &DedpModel, start: &[u32], cap: usize) -> Result<EnumeratedSpace> {
    model.validate()?;
    let ceilings = model.action_map.coefficient_ceilings();
    let mut states = vec![start.to_vec()];
    let mut index = HashMap::from([(start.to_vec(), 0usize)]);
    let mut successors = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let s = states[i].clone();
        let mut row = Vec::with_capacity(model.num_events());
        for (v, ev) in model.events.iter().enumerate() {
            if ceilings[ev.coeff_index] <= 0.0 || model.event_propensity(&s, v) <= 0.0 {
                row.push(None);
                continue;
            }
            let next: Vec<u32> = s
                .iter()
                .zip(&ev.delta)
                .map(|(&x, &d)| (x as i64 + d as i64) as u32)
                .collect();
            let j = match index.get(&next) {
                Some(&j) => j,
                None => {
                    if states.len() == cap {
                        return Err(DedpError::SpaceTooLarge { size: cap + 1, cap });
                    }
                    let j = states.len();
                    index.insert(next.clone(), j);
                    states.push(next);
                    queue.push_back(j);
                    j
                }
            };
            row.push(Some(j));
        }
        successors.push(row);
    }
    Ok(EnumeratedSpace {
        states,
        index,
        successors,
    })
}

/// Event probabilities from every enumerated state at `clock`, with the
/// null probability last.
fn step_probabilities(
    model: &DedpModel,
    policy: &Policy,
    space: &EnumeratedSpace,
    clock: u32,
) -> Result<Vec<Vec<f64>>> {
    space
        .states
        .iter()
        .map(|s| {
            let state = StateVec::new(s.clone(), clock);
            let dist = model.event_distribution(&state, &policy.act_state(&state))?;
            let mut row = dist.rates;
            row.push(dist.null);
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactValue {
    pub value: f64,
    /// `gamma^H * R_max / (1 - gamma)`, bounding the omitted tail.
    pub truncation_bound: f64,
    pub num_states: usize,
}

/// `E[sum_{t=0}^{H} gamma^t R(s_t)]` by backward induction over reachable states.
pub fn exact_value(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    cap: usize,
) -> Result<ExactValue> {
    let space = enumerate_from(model, &s0.populations, cap)?;
    let n = space.len();
    let reward_at = |i: usize, t: usize| {
        model.reward(&StateVec::new(space.states[i].clone(), s0.clock + t as u32))
    };
    let mut r_max: f64 = 0.0;
    let mut value: Vec<f64> = (0..n).map(|i| reward_at(i, horizon)).collect();
    for t in (0..horizon).rev() {
        let probs = step_probabilities(model, policy, &space, s0.clock + t as u32)?;
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let row = &probs[i];
                let mut ev = row[model.num_events()] * value[i];
                for (v, &p) in row[..model.num_events()].iter().enumerate() {
                    if p > 0.0 {
                        ev += p * value[space
                            .successor(i, v)
                            .expect("positive rate implies successor")];
                    }
                }
                let r = reward_at(i, t);
                r_max = r_max.max(r.abs());
                r + model.gamma * ev
            })
            .collect();
        value = next;
    }
    for i in 0..n {
        r_max = r_max.max(reward_at(i, horizon).abs());
    }
    let truncation_bound = if model.gamma > 0.0 {
        model.gamma.powi(horizon as i32) * r_max / (1.0 - model.gamma)
    } else {
        0.0
    };
    Ok(ExactValue {
        value: value[0],
        truncation_bound,
        num_states: n,
    })
}

/// Exact joint state distributions for `t = 0..=H`, indexed by `space`.
pub fn exact_forward(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    cap: usize,
) -> Result<(EnumeratedSpace, Vec<Vec<f64>>)> {
    let space = enumerate_from(model, &s0.populations, cap)?;
    let mut p = vec![0.0; space.len()];
    p[0] = 1.0;
    let mut out = vec![p.clone()];
    for t in 0..horizon {
        let probs = step_probabilities(model, policy, &space, s0.clock + t as u32)?;
        let mut next = vec![0.0; space.len()];
        for (i, &pi) in p.iter().enumerate() {
            if pi == 0.0 {
                continue;
            }
            next[i] += pi * probs[i][model.num_events()];
            for v in 0..model.num_events() {
                if let Some(j) = space.successor(i, v) {
                    next[j] += pi * probs[i][v];
                }
            }
        }
        p = next;
        out.push(p.clone());
    }
    Ok((space, out))
}

/// Per-component marginals of a joint distribution over `space`.
pub fn component_marginals(
    model: &DedpModel,
    space: &EnumeratedSpace,
    joint: &[f64],
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = model
        .components
        .iter()
        .map(|c| vec![0.0; c.domain_size()])
        .collect();
    for (s, &p) in space.states.iter().zip(joint) {
        for (m, &x) in s.iter().enumerate() {
            out[m][x as usize] += p;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureEntry {
    pub length: usize,
    pub component: usize,
    pub events: Vec<Event>,
    pub r: f64,
}

/// The exact posterior over (length, component, trajectory) triples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixturePosterior {
    pub entries: Vec<MixtureEntry>,
    pub weights: Vec<f64>,
    /// `Z = sum r`.
    pub normalizer: f64,
    /// `sum_T gamma^T sum_m shift[T][m]`; zero for unshifted rewards.
    pub shift_value: f64,
}

impl MixturePosterior {
    /// Value of the original rewards: `Z - shift_value`.
    pub fn unshifted_value(&self) -> f64 {
        self.normalizer - self.shift_value
    }

    /// `log sum r - [sum q log r + H(q)]`; zero-weight terms contribute nothing.
    pub fn gap(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.entries.len() {
            return Err(DedpError::InvalidConfig(format!(
                "q has {} entries, mixture has {}",
                q.len(),
                self.entries.len()
            )));
        }
        let mut bound = 0.0;
        for (qi, e) in q.iter().zip(&self.entries) {
            if *qi > 0.0 {
                bound += qi * (e.r.ln() - qi.ln());
            }
        }
        Ok(self.normalizer.ln() - bound)
    }
}

fn mixture_impl(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    cap: usize,
    shifts: Option<&[Vec<f64>]>,
) -> Result<MixturePosterior> {
    model.validate()?;
    let m = model.num_populations();
    let mut entries = Vec::new();
    let mut stack: Vec<(StateVec, Vec<Event>, f64)> = vec![(s0.clone(), Vec::new(), 1.0)];
    while let Some((state, events, prob)) = stack.pop() {
        let t = events.len();
        let discount = model.gamma.powi(t as i32);
        if entries.len() + m > cap {
            return Err(DedpError::SpaceTooLarge {
                size: entries.len() + m,
                cap,
            });
        }
        for c in 0..m {
            let mut r = model.component_reward(c, state.populations[c] as f64, state.clock);
            if let Some(sh) = shifts {
                r += sh[t][c];
            }
            if r < 0.0 {
                return Err(DedpError::NegativeReward {
                    value: r,
                    step: t,
                    component: c,
                });
            }
            entries.push(MixtureEntry {
                length: t,
                component: c,
                events: events.clone(),
                r: discount * prob * r,
            });
        }
        if t == horizon {
            continue;
        }
        let dist = model.event_distribution(&state, &policy.act_state(&state))?;
        let mut push = |ev: Event, p: f64| -> Result<()> {
            if p > 0.0 {
                let mut evs = events.clone();
                evs.push(ev);
                stack.push((model.apply_event(&state, ev)?, evs, prob * p));
            }
            Ok(())
        };
        // Pushed in reverse so entries come out in lexicographic event order.
        for v in (0..model.num_events()).rev() {
            push(Event::Fire(v), dist.rates[v])?;
        }
        push(Event::Null, dist.null)?;
    }
    let normalizer: f64 = entries.iter().map(|e| e.r).sum();
    let weights = entries
        .iter()
        .map(|e| {
            if normalizer > 0.0 {
                e.r / normalizer
            } else {
                0.0
            }
        })
        .collect();
    let shift_value = match shifts {
        Some(sh) => (0..=horizon)
            .map(|t| model.gamma.powi(t as i32) * sh[t].iter().sum::<f64>())
            .sum(),
        None => 0.0,
    };
    Ok(MixturePosterior {
        entries,
        weights,
        normalizer,
        shift_value,
    })
}

/// Every positive-probability event sequence of length `0..=H`, times every
/// component. Requires non-negative rewards.
pub fn exact_mixture(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    cap: usize,
) -> Result<MixturePosterior> {
    mixture_impl(model, policy, s0, horizon, cap, None)
}

/// As [`exact_mixture`], with each reward term raised by `reward_shifts`
/// so negative scoring terms become admissible.
pub fn exact_mixture_shifted(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    cap: usize,
) -> Result<MixturePosterior> {
    let shifts = model.reward_shifts(s0.clock, horizon);
    mixture_impl(model, policy, s0, horizon, cap, Some(&shifts))
}

/// Jensen gap of `q` against the exact mixture: `>= 0`, and zero at `q*`.
pub fn duality_gap(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    horizon: usize,
    q: &[f64],
    cap: usize,
) -> Result<f64> {
    exact_mixture(model, policy, s0, horizon, cap)?.gap(q)
}
