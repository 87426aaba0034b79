//! Variational policy iteration.
//!
//! Evaluation runs mean-field forward/backward messages over per-component
//! marginals. Each step projects the joint event kernel onto one component
//! by replacing the other components' rate factors with their expectations
//! under the current forward marginals, and evaluates the deterministic
//! policy at the expected state. Backward messages are gathered over the
//! length prior, so one backward sweep covers every `(T, m)` at once.
//!
//! Backward messages optionally include the linear response of the
//! projection (see [`Coupling`]); without it a component's message only
//! sees its own reward.
//!
//! Rewards are shifted per `(t, m)` to be non-negative before they enter the
//! messages (see [`DedpModel::reward_shifts`]); reported values undo the shift.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::model::{DedpModel, Event, StateVec};
use crate::policy::Policy;
use crate::simulator::{default_horizon, monte_carlo_value, RolloutConfig};

/// `q(T, m) = gamma^T (1 - gamma) / M` for `T = 0..=H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    pub gamma: f64,
    pub num_components: usize,
    pub horizon: usize,
    /// `q(T, m)` per `T`; identical across `m`.
    pub values: Vec<f64>,
}

impl LengthPrior {
    pub fn q(&self, t: usize) -> f64 {
        self.values[t]
    }

    /// `1 - gamma^(H+1)`.
    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.num_components as f64
    }
}

pub fn length_prior(gamma: f64, num_components: usize, horizon: usize) -> LengthPrior {
    let scale = (1.0 - gamma) / num_components as f64;
    let values = (0..=horizon)
        .map(|t| gamma.powi(t as i32) * scale)
        .collect();
    LengthPrior {
        gamma,
        num_components,
        horizon,
        values,
    }
}

/// Per-event factor tables, precomputed once per model.
#[derive(Debug, Clone)]
struct Topology {
    domain: Vec<usize>,
    involved: Vec<Vec<usize>>,
    /// `g[v][j][x]` for component `involved[v][j]`, guard included.
    g: Vec<Vec<Vec<f64>>>,
    /// For each component, the `(v, j)` pairs with `involved[v][j] == m`.
    by_component: Vec<Vec<(usize, usize)>>,
    involves: Vec<Vec<bool>>,
}

impl Topology {
    fn new(model: &DedpModel) -> Self {
        let m = model.num_populations();
        let domain: Vec<usize> = model.components.iter().map(|c| c.domain_size()).collect();
        let involved: Vec<Vec<usize>> = model
            .events
            .iter()
            .map(|e| e.involved_components())
            .collect();
        let g = model
            .events
            .iter()
            .zip(&involved)
            .map(|(ev, inv)| {
                inv.iter()
                    .map(|&c| {
                        let max = model.components[c].domain_max;
                        (0..=max).map(|x| ev.component_factor(c, x, max)).collect()
                    })
                    .collect()
            })
            .collect();
        let mut by_component = vec![Vec::new(); m];
        let mut involves = vec![vec![false; model.num_events()]; m];
        for (v, inv) in involved.iter().enumerate() {
            for (j, &c) in inv.iter().enumerate() {
                by_component[c].push((v, j));
                involves[c][v] = true;
            }
        }
        Topology {
            domain,
            involved,
            g,
            by_component,
            involves,
        }
    }
}

/// Everything needed to rebuild the projected kernel of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    pub clock: u32,
    /// Mean-field expected state `E[s_t^m]`.
    pub mean_state: Vec<f64>,
    pub action: Vec<f64>,
    pub coeffs: Vec<f64>,
    /// `E[g_v^m]` per event, aligned with the event's involved components.
    pub expected_factors: Vec<Vec<f64>>,
    /// Per component: total rate of events that do not involve it.
    pub background: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Move {
    event: usize,
    target: usize,
    prob: f64,
    /// Rate per unit coefficient.
    propensity: f64,
}

fn build_context(
    model: &DedpModel,
    topo: &Topology,
    policy: &Policy,
    alpha: &[Vec<f64>],
    clock: u32,
) -> StepContext {
    let mean_state: Vec<f64> = alpha
        .iter()
        .map(|a| a.iter().enumerate().map(|(x, p)| x as f64 * p).sum())
        .collect();
    let action = policy.act(&mean_state, clock);
    let coeffs = model.action_map.coefficients(&action);
    let expected_factors: Vec<Vec<f64>> = topo
        .involved
        .iter()
        .zip(&topo.g)
        .map(|(inv, gv)| {
            inv.iter()
                .zip(gv)
                .map(|(&c, g)| alpha[c].iter().zip(g).map(|(a, g)| a * g).sum())
                .collect()
        })
        .collect();
    let full: Vec<f64> = model
        .events
        .iter()
        .zip(&expected_factors)
        .map(|(ev, e)| coeffs[ev.coeff_index] * e.iter().product::<f64>())
        .collect();
    let background = topo
        .involves
        .iter()
        .map(|inv| {
            full.iter()
                .zip(inv)
                .filter(|(_, &i)| !i)
                .map(|(r, _)| r)
                .sum()
        })
        .collect();
    StepContext {
        clock,
        mean_state,
        action,
        coeffs,
        expected_factors,
        background,
    }
}

/// Fills `moves` with the transitions out of `x` for component `m` that
/// involve `m`; returns the null probability. A rate total above one is an
/// error only for `strict` rows: values without forward mass can pair their
/// own factor with background rates no reachable joint state combines.
fn row_into(
    model: &DedpModel,
    topo: &Topology,
    ctx: &StepContext,
    m: usize,
    x: usize,
    moves: &mut Vec<Move>,
    strict: bool,
) -> Result<f64> {
    moves.clear();
    let mut total = ctx.background[m];
    for &(v, j) in &topo.by_component[m] {
        let mut a = topo.g[v][j][x];
        if a == 0.0 {
            continue;
        }
        for (jj, e) in ctx.expected_factors[v].iter().enumerate() {
            if jj != j {
                a *= e;
            }
        }
        let prob = ctx.coeffs[model.events[v].coeff_index] * a;
        if prob == 0.0 {
            continue;
        }
        total += prob;
        let target = (x as i64 + model.events[v].delta[m] as i64) as usize;
        moves.push(Move {
            event: v,
            target,
            prob,
            propensity: a,
        });
    }
    if strict && total > 1.0 + 1e-12 {
        return Err(DedpError::RateOverflow {
            total,
            clock: ctx.clock,
        });
    }
    Ok((1.0 - total).max(0.0))
}

/// Per-component transition tables at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedKernel {
    /// `rows[m][x]`: `(event, next value, probability)` entries, null last.
    pub rows: Vec<Vec<Vec<(Event, usize, f64)>>>,
}

impl ProjectedKernel {
    pub fn row_sum(&self, m: usize, x: usize) -> f64 {
        self.rows[m][x].iter().map(|e| e.2).sum()
    }
}

/// Mean-field projection of the event kernel under `marginals` at `clock`.
pub fn projected_kernel(
    model: &DedpModel,
    policy: &Policy,
    marginals: &[Vec<f64>],
    clock: u32,
) -> Result<ProjectedKernel> {
    let topo = Topology::new(model);
    let ctx = build_context(model, &topo, policy, marginals, clock);
    let mut moves = Vec::new();
    let mut rows = Vec::with_capacity(topo.domain.len());
    for m in 0..topo.domain.len() {
        let mut comp = Vec::with_capacity(topo.domain[m]);
        for x in 0..topo.domain[m] {
            let null = row_into(model, &topo, &ctx, m, x, &mut moves, marginals[m][x] > 0.0)?;
            let mut row: Vec<(Event, usize, f64)> = moves
                .iter()
                .map(|mv| (Event::Fire(mv.event), mv.target, mv.prob))
                .collect();
            for (v, ev) in model.events.iter().enumerate() {
                if !topo.involves[m][v] {
                    let p = ctx.coeffs[ev.coeff_index]
                        * ctx.expected_factors[v].iter().product::<f64>();
                    if p > 0.0 {
                        row.push((Event::Fire(v), x, p));
                    }
                }
            }
            row.sort_by_key(|e| match e.0 {
                Event::Fire(v) => v,
                Event::Null => usize::MAX,
            });
            row.push((Event::Null, x, null));
            comp.push(row);
        }
        rows.push(comp);
    }
    Ok(ProjectedKernel { rows })
}

/// Factorized point mass at `s0`.
pub fn point_mass(model: &DedpModel, s0: &StateVec) -> Vec<Vec<f64>> {
    model
        .components
        .iter()
        .zip(&s0.populations)
        .map(|(c, &x)| {
            let mut p = vec![0.0; c.domain_size()];
            p[x as usize] = 1.0;
            p
        })
        .collect()
}

/// Forward messages and the step contexts their kernels were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMessages {
    pub clock0: u32,
    /// `alpha[t][m][x]` for `t = 0..=H`.
    pub alpha: Vec<Vec<Vec<f64>>>,
    /// `steps[t]` built from `alpha[t]`, for `t = 0..H`.
    pub steps: Vec<StepContext>,
    /// `log Z_t^m` of each forward update; zero up to rounding since the
    /// projected kernels are stochastic.
    pub log_normalizers: Vec<Vec<f64>>,
}

impl ForwardMessages {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

fn forward_with(
    model: &DedpModel,
    topo: &Topology,
    policy: &Policy,
    prior: &[Vec<f64>],
    clock0: u32,
    horizon: usize,
) -> Result<ForwardMessages> {
    let mut alpha = vec![prior.to_vec()];
    let mut steps = Vec::with_capacity(horizon);
    let mut log_normalizers = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let cur = &alpha[t];
        let ctx = build_context(model, topo, policy, cur, clock0 + t as u32);
        let next: Vec<(Vec<f64>, f64)> = (0..topo.domain.len())
            .into_par_iter()
            .map(|m| {
                let mut out = vec![0.0; topo.domain[m]];
                let mut moves = Vec::new();
                for (x, &a) in cur[m].iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let null = row_into(model, topo, &ctx, m, x, &mut moves, true)?;
                    let mut stay = null + ctx.background[m];
                    for mv in &moves {
                        if mv.target == x {
                            stay += mv.prob;
                        } else {
                            out[mv.target] += a * mv.prob;
                        }
                    }
                    out[x] += a * stay;
                }
                let z: f64 = out.iter().sum();
                for o in out.iter_mut() {
                    *o /= z;
                }
                Ok((out, z.ln()))
            })
            .collect::<Result<_>>()?;
        let (a, z): (Vec<_>, Vec<_>) = next.into_iter().unzip();
        alpha.push(a);
        log_normalizers.push(z);
        steps.push(ctx);
    }
    Ok(ForwardMessages {
        clock0,
        alpha,
        steps,
        log_normalizers,
    })
}

/// Forward filter over the projected kernels, starting from a factorized prior.
pub fn forward_pass(
    model: &DedpModel,
    policy: &Policy,
    prior: &[Vec<f64>],
    clock0: u32,
    horizon: usize,
) -> Result<ForwardMessages> {
    model.validate()?;
    forward_with(model, &Topology::new(model), policy, prior, clock0, horizon)
}

/// Shifted rewards `R'_t^m(x)` for every component value.
fn shifted_rewards(
    model: &DedpModel,
    topo: &Topology,
    shifts: &[Vec<f64>],
    clock: u32,
    t: usize,
) -> Vec<Vec<f64>> {
    (0..topo.domain.len())
        .map(|m| {
            (0..topo.domain[m])
                .map(|x| model.component_reward(m, x as f64, clock) + shifts[t][m])
                .collect()
        })
        .collect()
}

/// `out[x] = sum_{x'} K_t(x -> x') next[x']` for every component.
fn apply_kernel(
    model: &DedpModel,
    topo: &Topology,
    ctx: &StepContext,
    alpha: &[Vec<f64>],
    next: &[Vec<f64>],
    mut base: Vec<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    base.par_iter_mut().enumerate().try_for_each(|(m, out)| {
        let mut moves = Vec::new();
        for (x, o) in out.iter_mut().enumerate() {
            let null = row_into(model, topo, ctx, m, x, &mut moves, alpha[m][x] > 0.0)?;
            let mut acc = (null + ctx.background[m]) * next[m][x];
            for mv in &moves {
                acc += mv.prob * next[m][mv.target];
            }
            *o += acc;
        }
        Ok::<(), DedpError>(())
    })?;
    Ok(base)
}

/// How backward messages account for the other components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Each component's message also carries the linear response of the
    /// other components' kernels, which read its marginal through expected
    /// factors and through the policy's expected-state input. The messages
    /// are then the adjoint of the forward pass and the gradient is the
    /// exact gradient of the ELBO.
    #[default]
    LinearResponse,
    /// Messages propagate through the component's own projected kernel
    /// only; reward at one component never reaches another.
    None,
}

/// Adds the linear-response terms of step `t` to `out`, given the next
/// messages `next`.
fn add_coupling(
    model: &DedpModel,
    topo: &Topology,
    policy: &Policy,
    ctx: &StepContext,
    alpha: &[Vec<f64>],
    next: &[Vec<f64>],
    out: &mut [Vec<f64>],
) {
    // Expected change of each involved component's message when the event
    // fires, per unit coefficient and with the other factors left out.
    let gain: Vec<Vec<f64>> = topo
        .involved
        .iter()
        .enumerate()
        .map(|(v, inv)| {
            inv.iter()
                .enumerate()
                .map(|(j, &c)| {
                    let delta = model.events[v].delta[c] as i64;
                    alpha[c]
                        .iter()
                        .zip(&topo.g[v][j])
                        .enumerate()
                        .filter(|(_, (&a, &g))| a > 0.0 && g > 0.0)
                        .map(|(y, (a, g))| {
                            a * g * (next[c][(y as i64 + delta) as usize] - next[c][y])
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    let others = |v: usize, skip: &[usize]| -> f64 {
        ctx.expected_factors[v]
            .iter()
            .enumerate()
            .filter(|(i, _)| !skip.contains(i))
            .map(|(_, e)| e)
            .product()
    };
    let mut grad_c = vec![0.0; ctx.coeffs.len()];
    for (v, inv) in topo.involved.iter().enumerate() {
        let cv = ctx.coeffs[model.events[v].coeff_index];
        for j in 0..inv.len() {
            grad_c[model.events[v].coeff_index] += gain[v][j] * others(v, &[j]);
            if cv == 0.0 {
                continue;
            }
            let cross: f64 = (0..inv.len())
                .filter(|&jj| jj != j)
                .map(|jj| gain[v][jj] * others(v, &[j, jj]))
                .sum();
            if cross != 0.0 {
                for (o, g) in out[inv[j]].iter_mut().zip(&topo.g[v][j]) {
                    *o += cv * g * cross;
                }
            }
        }
    }
    if policy.feature_spec.population_scale.is_some() && grad_c.iter().any(|g| *g != 0.0) {
        let grad_a = model.action_map.vjp(&ctx.action, &grad_c);
        let grad_s = policy.state_vjp(&ctx.mean_state, ctx.clock, &grad_a);
        for (o, gs) in out.iter_mut().zip(grad_s) {
            for (x, v) in o.iter_mut().enumerate() {
                *v += x as f64 * gs;
            }
        }
    }
}

/// One backward step: `base + K_t next`, plus the coupling terms.
#[allow(clippy::too_many_arguments)]
fn backward_step(
    model: &DedpModel,
    topo: &Topology,
    policy: &Policy,
    forward: &ForwardMessages,
    t: usize,
    next: &[Vec<f64>],
    base: Vec<Vec<f64>>,
    coupling: Coupling,
) -> Result<Vec<Vec<f64>>> {
    let mut out = apply_kernel(
        model,
        topo,
        &forward.steps[t],
        &forward.alpha[t],
        next,
        base,
    )?;
    if coupling == Coupling::LinearResponse {
        add_coupling(
            model,
            topo,
            policy,
            &forward.steps[t],
            &forward.alpha[t],
            next,
            &mut out,
        );
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn backward_with(
    model: &DedpModel,
    topo: &Topology,
    policy: &Policy,
    prior: &LengthPrior,
    forward: &ForwardMessages,
    shifts: &[Vec<f64>],
    coupling: Coupling,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let h = forward.horizon();
    let m_total = topo.domain.len() as f64;
    let base = |t: usize| -> Vec<Vec<f64>> {
        let q = prior.q(t);
        shifted_rewards(model, topo, shifts, forward.clock0 + t as u32, t)
            .into_iter()
            .map(|r| r.into_iter().map(|r| q * (r + m_total - 1.0)).collect())
            .collect()
    };
    let mut beta = vec![Vec::new(); h + 1];
    beta[h] = base(h);
    for t in (0..h).rev() {
        beta[t] = backward_step(
            model,
            topo,
            policy,
            forward,
            t,
            &beta[t + 1],
            base(t),
            coupling,
        )?;
    }
    Ok(beta)
}

/// Gathered backward messages `beta_t^m` for `t = 0..=H`.
///
/// The base term at step `t` is `q(t, m) R'_t^m(x) + sum_{m' != m} q(t, m')`:
/// the reward enters for the component's own mixture term and one for every
/// other component.
pub fn backward_pass(
    model: &DedpModel,
    policy: &Policy,
    prior: &LengthPrior,
    forward: &ForwardMessages,
    shifts: &[Vec<f64>],
    coupling: Coupling,
) -> Result<Vec<Vec<Vec<f64>>>> {
    backward_with(
        model,
        &Topology::new(model),
        policy,
        prior,
        forward,
        shifts,
        coupling,
    )
}

/// Backward messages of the single mixture term `(T, m)`, for `t = 0..=T`.
pub fn backward_conditional(
    model: &DedpModel,
    policy: &Policy,
    forward: &ForwardMessages,
    shifts: &[Vec<f64>],
    length: usize,
    component: usize,
    coupling: Coupling,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let topo = Topology::new(model);
    let reward = shifted_rewards(model, &topo, shifts, forward.clock0 + length as u32, length);
    let terminal: Vec<Vec<f64>> = (0..topo.domain.len())
        .map(|m| {
            if m == component {
                reward[m].clone()
            } else {
                vec![1.0; topo.domain[m]]
            }
        })
        .collect();
    let mut beta = vec![Vec::new(); length + 1];
    beta[length] = terminal;
    for t in (0..length).rev() {
        let zeros = topo.domain.iter().map(|&d| vec![0.0; d]).collect();
        beta[t] = backward_step(
            model,
            &topo,
            policy,
            forward,
            t,
            &beta[t + 1],
            zeros,
            coupling,
        )?;
    }
    Ok(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizon: usize,
    pub tol: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub coupling: Coupling,
}

impl EvalConfig {
    /// Horizon with `gamma^H <= 1e-6`.
    pub fn for_model(model: &DedpModel) -> Self {
        Self::with_horizon(default_horizon(model.gamma, 1e-6))
    }

    pub fn with_horizon(horizon: usize) -> Self {
        EvalConfig {
            horizon,
            tol: 1e-10,
            max_iters: 10,
            coupling: Coupling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageSet {
    pub forward: ForwardMessages,
    /// `beta[t][m][x]` for `t = 0..=H`.
    pub beta: Vec<Vec<Vec<f64>>>,
    pub prior: LengthPrior,
    pub shifts: Vec<Vec<f64>>,
}

impl MessageSet {
    pub fn alpha(&self) -> &[Vec<Vec<f64>>] {
        &self.forward.alpha
    }

    /// `sum_{T, m} q(T, m) E[R'_T^m]` under the forward marginals.
    pub fn mixture_mass(&self, model: &DedpModel) -> f64 {
        let topo = Topology::new(model);
        (0..=self.prior.horizon)
            .map(|t| self.prior.q(t) * self.expected_reward(model, &topo, t))
            .sum()
    }

    fn expected_reward(&self, model: &DedpModel, topo: &Topology, t: usize) -> f64 {
        shifted_rewards(model, topo, &self.shifts, self.forward.clock0 + t as u32, t)
            .iter()
            .zip(&self.forward.alpha[t])
            .map(|(r, a)| r.iter().zip(a).map(|(r, a)| r * a).sum::<f64>())
            .sum()
    }

    /// `sum_T gamma^T sum_m shift[T][m]`.
    pub fn shift_value(&self) -> f64 {
        self.shifts
            .iter()
            .enumerate()
            .map(|(t, s)| self.prior.gamma.powi(t as i32) * s.iter().sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// `log sum_T gamma^T sum_m E[R'_T^m]` under the mean-field marginals.
    pub elbo: f64,
    /// `exp(elbo)` with the reward shift removed.
    pub value: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub messages: MessageSet,
    pub report: ElboReport,
}

impl Evaluation {
    /// Turns a non-converged evaluation into `NonConvergence`.
    pub fn into_converged(self) -> Result<Self> {
        if self.report.converged {
            Ok(self)
        } else {
            Err(DedpError::NonConvergence {
                residual: self.report.residual,
                iterations: self.report.iterations,
            })
        }
    }
}

fn max_abs_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn assemble_elbo(model: &DedpModel, topo: &Topology, messages: &MessageSet) -> f64 {
    let ln_gamma = model.gamma.ln();
    let terms: Vec<f64> = (0..=messages.prior.horizon)
        .map(|t| {
            let r = messages.expected_reward(model, topo, t);
            if t == 0 {
                r.ln()
            } else {
                t as f64 * ln_gamma + r.ln()
            }
        })
        .collect();
    log_sum_exp(&terms)
}

/// Alternates forward and backward sweeps until no message entry moves by
/// more than `tol`.
pub fn policy_evaluation(
    model: &DedpModel,
    policy: &Policy,
    s0: &StateVec,
    config: &EvalConfig,
) -> Result<Evaluation> {
    model.validate()?;
    policy.validate_for(model)?;
    if config.max_iters == 0 {
        return Err(DedpError::InvalidConfig("max_iters must be >= 1".into()));
    }
    let topo = Topology::new(model);
    let h = config.horizon;
    let prior = length_prior(model.gamma, model.num_populations(), h);
    let shifts = model.reward_shifts(s0.clock, h);
    let init = point_mass(model, s0);
    let mut previous: Option<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> = None;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut current = None;
    while iterations < config.max_iters {
        iterations += 1;
        let forward = forward_with(model, &topo, policy, &init, s0.clock, h)?;
        let beta = backward_with(
            model,
            &topo,
            policy,
            &prior,
            &forward,
            &shifts,
            config.coupling,
        )?;
        if let Some((pa, pb)) = &previous {
            residual = max_abs_diff(pa, &forward.alpha).max(max_abs_diff(pb, &beta));
        }
        previous = Some((forward.alpha.clone(), beta.clone()));
        current = Some((forward, beta));
        if residual <= config.tol {
            break;
        }
    }
    let (forward, beta) = current.expect("at least one sweep");
    let messages = MessageSet {
        forward,
        beta,
        prior,
        shifts,
    };
    let elbo = assemble_elbo(model, &topo, &messages);
    let value = elbo.exp() - messages.shift_value();
    let report = ElboReport {
        elbo,
        value,
        iterations,
        residual,
        converged: residual <= config.tol,
    };
    Ok(Evaluation { messages, report })
}

/// Analytic gradient of the improvement objective at the policy the
/// messages were computed under, scaled by the inverse mixture mass.
///
/// Per step and component, event `v` from `x` contributes
/// `alpha(x) a_v(x) [beta_{t+1}(x + delta_v) - beta_{t+1}(x)] dc_v/dtheta`,
/// the event term of the gradient minus its share of the null term. This is
/// always the gradient of [`surrogate_objective`]; with
/// [`Coupling::LinearResponse`] messages it is also the gradient of the ELBO.
pub fn policy_gradient(
    model: &DedpModel,
    policy: &Policy,
    messages: &MessageSet,
) -> Result<Vec<f64>> {
    let topo = Topology::new(model);
    let mut grad = vec![0.0; policy.num_params()];
    let z = messages.mixture_mass(model);
    if z <= 0.0 {
        return Ok(grad);
    }
    let fwd = &messages.forward;
    for (t, ctx) in fwd.steps.iter().enumerate() {
        let beta_next = &messages.beta[t + 1];
        let per_component: Vec<Vec<f64>> = (0..topo.domain.len())
            .into_par_iter()
            .map(|m| {
                let mut gc = vec![0.0; ctx.coeffs.len()];
                let mut moves = Vec::new();
                for (x, &a) in fwd.alpha[t][m].iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let null = row_into(model, &topo, ctx, m, x, &mut moves, true)?;
                    if moves.is_empty() {
                        continue;
                    }
                    if null == 0.0 && a * beta_next[m][x] > 0.0 {
                        return Err(DedpError::DivisionDomain { step: t });
                    }
                    for mv in &moves {
                        let k = model.events[mv.event].coeff_index;
                        gc[k] += a * mv.propensity * (beta_next[m][mv.target] - beta_next[m][x]);
                    }
                }
                Ok(gc)
            })
            .collect::<Result<_>>()?;
        let mut grad_c = vec![0.0; ctx.coeffs.len()];
        for gc in &per_component {
            for (g, v) in grad_c.iter_mut().zip(gc) {
                *g += v / z;
            }
        }
        if grad_c.iter().all(|g| *g == 0.0) {
            continue;
        }
        let grad_a = model.action_map.vjp(&ctx.action, &grad_c);
        for (g, v) in grad
            .iter_mut()
            .zip(policy.vjp(&ctx.mean_state, ctx.clock, &grad_a))
        {
            *g += v;
        }
    }
    Ok(grad)
}

/// The surrogate `L(theta)` whose gradient at the evaluation policy is
/// [`policy_gradient`]: posterior event weights, expected states and
/// expected factors are frozen at the messages; only the coefficients move.
pub fn surrogate_objective(
    model: &DedpModel,
    policy: &Policy,
    messages: &MessageSet,
) -> Result<f64> {
    let topo = Topology::new(model);
    let z = messages.mixture_mass(model);
    if z <= 0.0 {
        return Ok(0.0);
    }
    let fwd = &messages.forward;
    let mut total = 0.0;
    for (t, ctx) in fwd.steps.iter().enumerate() {
        let coeffs = model
            .action_map
            .coefficients(&policy.act(&ctx.mean_state, ctx.clock));
        let beta_next = &messages.beta[t + 1];
        for m in 0..topo.domain.len() {
            for (x, &a) in fwd.alpha[t][m].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let mut new_total = 0.0;
                let mut old_total = 0.0;
                for (v, ev) in model.events.iter().enumerate() {
                    let (prop, target) = if topo.involves[m][v] {
                        let j = topo.involved[v]
                            .iter()
                            .position(|&c| c == m)
                            .expect("involved");
                        let mut p = topo.g[v][j][x];
                        for (jj, e) in ctx.expected_factors[v].iter().enumerate() {
                            if jj != j {
                                p *= e;
                            }
                        }
                        (p, (x as i64 + ev.delta[m] as i64) as usize)
                    } else {
                        (ctx.expected_factors[v].iter().product::<f64>(), x)
                    };
                    if prop == 0.0 {
                        continue;
                    }
                    let k = ev.coeff_index;
                    let old = ctx.coeffs[k] * prop;
                    old_total += old;
                    new_total += coeffs[k] * prop;
                    let w = a * old * beta_next[m][target];
                    if w > 0.0 {
                        total += w * (coeffs[k] * prop).ln();
                    }
                }
                let w_null = a * (1.0 - old_total).max(0.0) * beta_next[m][x];
                if w_null > 0.0 {
                    total += w_null * (1.0 - new_total).ln();
                }
            }
        }
    }
    Ok(total / z)
}

pub fn gradient_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Plain ascent step `theta + eps * grad`.
pub fn ascent_step(policy: &Policy, gradient: &[f64], step: f64) -> Policy {
    let theta = policy
        .theta
        .iter()
        .zip(gradient)
        .map(|(t, g)| t + step * g)
        .collect();
    policy.with_theta(theta)
}

/// Objective the line search must not decrease.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceptance {
    /// The ELBO, recomputed by a full evaluation of every candidate.
    Elbo,
    /// The improvement objective `L(theta)` with the posterior frozen at the
    /// current messages, as in an EM M-step.
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementConfig {
    pub step: f64,
    /// Backtrack on `acceptance`; otherwise take the plain step.
    pub line_search: bool,
    pub max_backtracks: usize,
    pub acceptance: Acceptance,
}

impl Default for ImprovementConfig {
    fn default() -> Self {
        ImprovementConfig {
            step: 1.0,
            line_search: true,
            max_backtracks: 20,
            acceptance: Acceptance::Elbo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Improvement {
    pub policy: Policy,
    pub step: f64,
    pub evaluation: Evaluation,
    /// Change of the acceptance objective over the step.
    pub gain: f64,
}

/// One improvement step from `current`, whose evaluation is `evaluation`.
/// With line search the step starts at `config.step` and halves until the
/// acceptance objective does not decrease.
pub fn policy_improvement(
    model: &DedpModel,
    s0: &StateVec,
    current: &Policy,
    evaluation: &Evaluation,
    gradient: &[f64],
    eval: &EvalConfig,
    config: &ImprovementConfig,
) -> Result<Improvement> {
    if config.step == 0.0 || gradient.iter().all(|g| *g == 0.0) {
        return Ok(Improvement {
            policy: current.clone(),
            step: 0.0,
            evaluation: evaluation.clone(),
            gain: 0.0,
        });
    }
    if !gradient.iter().all(|g| g.is_finite()) {
        return Err(DedpError::InvalidConfig("non-finite gradient".into()));
    }
    let messages = &evaluation.messages;
    let old_surrogate = match config.acceptance {
        Acceptance::Surrogate => surrogate_objective(model, current, messages)?,
        Acceptance::Elbo => 0.0,
    };
    let mut step = config.step;
    for _ in 0..=config.max_backtracks {
        let candidate = ascent_step(current, gradient, step);
        let gain = match config.acceptance {
            Acceptance::Elbo => match policy_evaluation(model, &candidate, s0, eval) {
                Ok(next) => {
                    let gain = next.report.elbo - evaluation.report.elbo;
                    if !config.line_search || gain >= 0.0 {
                        return Ok(Improvement {
                            policy: candidate,
                            step,
                            evaluation: next,
                            gain,
                        });
                    }
                    None
                }
                Err(e) if e.is_numerical() && config.line_search => None,
                Err(e) => return Err(e),
            },
            Acceptance::Surrogate => match surrogate_objective(model, &candidate, messages) {
                Ok(v) if v.is_finite() => Some(v - old_surrogate),
                Ok(_) => None,
                Err(e) if e.is_numerical() && config.line_search => None,
                Err(e) => return Err(e),
            },
        };
        if let Some(gain) = gain {
            if !config.line_search || gain >= 0.0 {
                match policy_evaluation(model, &candidate, s0, eval) {
                    Ok(next) => {
                        return Ok(Improvement {
                            policy: candidate,
                            step,
                            evaluation: next,
                            gain,
                        })
                    }
                    Err(e) if e.is_numerical() && config.line_search => {}
                    Err(e) => return Err(e),
                }
            }
        }
        step *= 0.5;
    }
    Err(DedpError::LineSearchFailed {
        attempts: config.max_backtracks + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub epochs: usize,
    pub eval: EvalConfig,
    pub improvement: ImprovementConfig,
    /// Stop once the relative gain in `exp(elbo)` falls below this.
    pub improvement_tol: f64,
    pub grad_tol: f64,
    /// Upper bound on the line-search starting step, which otherwise
    /// doubles after every accepted step.
    pub max_step: f64,
    pub mc_rollouts: usize,
    pub mc_seed: u64,
    pub mc_horizon: usize,
    /// Record wall time per epoch; off keeps histories byte-reproducible.
    pub record_time: bool,
}

impl OptimizeConfig {
    pub fn new(epochs: usize, eval: EvalConfig) -> Self {
        OptimizeConfig {
            epochs,
            eval,
            improvement: ImprovementConfig::default(),
            improvement_tol: 1e-9,
            grad_tol: 1e-12,
            max_step: 1e6,
            mc_rollouts: 100,
            mc_seed: 0,
            mc_horizon: eval.horizon,
            record_time: false,
        }
    }
}

/// One row of an optimization history; shared with the PG baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: Option<f64>,
    pub mc_value_mean: f64,
    pub mc_value_stderr: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub policy: Policy,
    /// Epoch 0 is the initial policy.
    pub history: Vec<EpochRecord>,
    pub converged: bool,
}

/// Policy iteration: evaluate, step along the analytic gradient, repeat.
pub fn optimize(
    model: &DedpModel,
    init: &Policy,
    s0: &StateVec,
    config: &OptimizeConfig,
) -> Result<OptimizeResult> {
    let start = std::time::Instant::now();
    let elapsed = || {
        if config.record_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let mc_cfg = RolloutConfig::new(config.mc_horizon, config.mc_seed, config.mc_rollouts);
    let mut policy = init.clone();
    let mut evaluation = policy_evaluation(model, &policy, s0, &config.eval)?;
    let mut grad = policy_gradient(model, &policy, &evaluation.messages)?;
    let mc = monte_carlo_value(model, &policy, s0, &mc_cfg)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        elbo: Some(evaluation.report.elbo),
        mc_value_mean: mc.mean,
        mc_value_stderr: mc.std_error,
        grad_norm: gradient_norm(&grad),
        wall_ms: elapsed(),
    }];
    let mut step = config.improvement.step;
    let mut converged = false;
    for epoch in 1..=config.epochs {
        if gradient_norm(&grad) <= config.grad_tol {
            converged = true;
            break;
        }
        let imp_cfg = ImprovementConfig {
            step,
            ..config.improvement
        };
        let improvement = match policy_improvement(
            model,
            s0,
            &policy,
            &evaluation,
            &grad,
            &config.eval,
            &imp_cfg,
        ) {
            Ok(i) => i,
            Err(DedpError::LineSearchFailed { .. }) => {
                converged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if improvement.step > 0.0 {
            step = (2.0 * improvement.step).min(config.max_step);
        }
        let gain = improvement.gain;
        policy = improvement.policy;
        evaluation = improvement.evaluation;
        grad = policy_gradient(model, &policy, &evaluation.messages)?;
        let mc = monte_carlo_value(model, &policy, s0, &mc_cfg)?;
        history.push(EpochRecord {
            epoch,
            elbo: Some(evaluation.report.elbo),
            mc_value_mean: mc.mean,
            mc_value_stderr: mc.std_error,
            grad_norm: gradient_norm(&grad),
            wall_ms: elapsed(),
        });
        if !(gain.exp_m1() >= config.improvement_tol) {
            converged = true;
            break;
        }
    }
    Ok(OptimizeResult {
        policy,
        history,
        converged,
    })
}
