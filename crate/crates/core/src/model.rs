//! Discrete event decision process: components, events, the action map
//! and additively separable rewards.
//!
//! Time is discrete with unit steps and at most one event fires per step.
//! The rate of event `v` at state `s` under coefficient vector `c` is
//!
//! ```text
//! h_v(s) = c[k(v)] * prod_m g_v^m(s^m)
//! ```
//!
//! and the null event takes the remaining mass `1 - sum_v h_v(s)`.
//! Every `g_v^m` carries an implicit domain guard that is zero whenever
//! applying the event would push component `m` outside `0..=domain_max`,
//! so no positive-probability event can leave the state space.

use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::policy::Policy;

/// One population component with domain `0..=domain_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub domain_max: u32,
}

impl Component {
    pub fn new(name: impl Into<String>, domain_max: u32) -> Self {
        Component {
            name: name.into(),
            domain_max,
        }
    }

    pub fn domain_size(&self) -> usize {
        self.domain_max as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// `params[0] * x`
    Linear,
    /// `1` if `x >= params[0]`, else `0`
    Indicator,
    /// `params[0]`
    Constant,
    /// `max(0, 1 - x / params[0])`, a capacity-limited inflow factor
    Congestion,
}

/// A per-component rate factor `g_v^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub component: usize,
    pub kind: FactorKind,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl FactorSpec {
    pub fn linear(component: usize, scale: f64) -> Self {
        FactorSpec {
            component,
            kind: FactorKind::Linear,
            params: vec![scale],
        }
    }

    pub fn indicator(component: usize, min: f64) -> Self {
        FactorSpec {
            component,
            kind: FactorKind::Indicator,
            params: vec![min],
        }
    }

    pub fn constant(component: usize, value: f64) -> Self {
        FactorSpec {
            component,
            kind: FactorKind::Constant,
            params: vec![value],
        }
    }

    pub fn congestion(component: usize, capacity: f64) -> Self {
        FactorSpec {
            component,
            kind: FactorKind::Congestion,
            params: vec![capacity],
        }
    }

    fn param(&self) -> f64 {
        self.params.first().copied().unwrap_or(1.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = self.param();
        match self.kind {
            FactorKind::Linear => p * x,
            FactorKind::Indicator => {
                if x >= p {
                    1.0
                } else {
                    0.0
                }
            }
            FactorKind::Constant => p,
            FactorKind::Congestion => (1.0 - x / p).max(0.0),
        }
    }

    /// Largest value the factor takes on `0..=domain_max`.
    pub fn max_on(&self, domain_max: u32) -> f64 {
        (0..=domain_max)
            .map(|x| self.eval(x as f64))
            .fold(0.0, f64::max)
    }

    fn validate(&self, num_components: usize) -> Result<()> {
        if self.component >= num_components {
            return Err(DedpError::InvalidModel(format!(
                "factor references component {} of {}",
                self.component, num_components
            )));
        }
        if self.params.len() > 1 {
            return Err(DedpError::InvalidModel(
                "factor takes at most one parameter".into(),
            ));
        }
        let p = self.param();
        if !p.is_finite() {
            return Err(DedpError::InvalidModel(
                "factor parameter must be finite".into(),
            ));
        }
        match self.kind {
            FactorKind::Linear | FactorKind::Constant if p < 0.0 => {
                Err(DedpError::InvalidModel(format!(
                    "factor {:?} needs a non-negative parameter, got {p}",
                    self.kind
                )))
            }
            FactorKind::Congestion if p <= 0.0 => Err(DedpError::InvalidModel(format!(
                "congestion capacity must be positive, got {p}"
            ))),
            _ => Ok(()),
        }
    }
}

/// An elementary event: a fixed population change and a product-form rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub name: String,
    pub delta: Vec<i32>,
    pub coeff_index: usize,
    #[serde(default)]
    pub factors: Vec<FactorSpec>,
}

impl EventSpec {
    /// `g_v^m(x)` including the domain guard.
    pub fn component_factor(&self, m: usize, x: u32, domain_max: u32) -> f64 {
        let next = x as i64 + self.delta[m] as i64;
        if next < 0 || next > domain_max as i64 {
            return 0.0;
        }
        self.factors
            .iter()
            .filter(|f| f.component == m)
            .map(|f| f.eval(x as f64))
            .product()
    }

    /// Components whose factor is not identically one: those with a
    /// declared factor or a nonzero delta.
    pub fn involved_components(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .delta
            .iter()
            .enumerate()
            .filter(|(_, &d)| d != 0)
            .map(|(m, _)| m)
            .chain(self.factors.iter().map(|f| f.component))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Optional softmax split applied to a coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub actions: Vec<usize>,
    pub member: usize,
    pub sharpness: f64,
}

/// `c = scale * a[rate_action] * softmax(sharpness * a[split.actions])[member]`,
/// with missing parts taken as one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffExpr {
    pub scale: f64,
    #[serde(default)]
    pub rate_action: Option<usize>,
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

/// Map `C` from actions to rate coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ActionMap {
    /// `c = a`
    Identity { dim: usize },
    /// `c` fixed, independent of the action.
    Constant {
        values: Vec<f64>,
        num_actions: usize,
    },
    Expressions {
        num_actions: usize,
        coefficients: Vec<CoeffExpr>,
    },
}

fn softmax_member(a: &[f64], split: &SplitSpec) -> (f64, Vec<f64>) {
    let z: Vec<f64> = split
        .actions
        .iter()
        .map(|&d| split.sharpness * a[d])
        .collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let total: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / total).collect();
    (p[split.member], p)
}

impl ActionMap {
    pub fn num_actions(&self) -> usize {
        match self {
            ActionMap::Identity { dim } => *dim,
            ActionMap::Constant { num_actions, .. } => *num_actions,
            ActionMap::Expressions { num_actions, .. } => *num_actions,
        }
    }

    pub fn num_coeffs(&self) -> usize {
        match self {
            ActionMap::Identity { dim } => *dim,
            ActionMap::Constant { values, .. } => values.len(),
            ActionMap::Expressions { coefficients, .. } => coefficients.len(),
        }
    }

    pub fn coefficients(&self, action: &[f64]) -> Vec<f64> {
        match self {
            ActionMap::Identity { .. } => action.to_vec(),
            ActionMap::Constant { values, .. } => values.clone(),
            ActionMap::Expressions { coefficients, .. } => coefficients
                .iter()
                .map(|e| {
                    let rate = e.rate_action.map_or(1.0, |d| action[d]);
                    let split = e
                        .split
                        .as_ref()
                        .map_or(1.0, |s| softmax_member(action, s).0);
                    e.scale * rate * split
                })
                .collect(),
        }
    }

    /// Dense `num_coeffs x num_actions` Jacobian, row-major.
    pub fn jacobian(&self, action: &[f64]) -> Vec<f64> {
        let (k, d) = (self.num_coeffs(), self.num_actions());
        let mut jac = vec![0.0; k * d];
        for i in 0..k {
            let mut row = vec![0.0; k];
            row[i] = 1.0;
            let g = self.vjp(action, &row);
            jac[i * d..(i + 1) * d].copy_from_slice(&g);
        }
        jac
    }

    /// Vector-Jacobian product `(dc/da)^T grad_c`.
    pub fn vjp(&self, action: &[f64], grad_c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions()];
        match self {
            ActionMap::Identity { .. } => out.copy_from_slice(grad_c),
            ActionMap::Constant { .. } => {}
            ActionMap::Expressions { coefficients, .. } => {
                for (e, &g) in coefficients.iter().zip(grad_c) {
                    if g == 0.0 {
                        continue;
                    }
                    let rate = e.rate_action.map_or(1.0, |d| action[d]);
                    let (split, probs) = match &e.split {
                        Some(s) => {
                            let (pm, p) = softmax_member(action, s);
                            (pm, Some(p))
                        }
                        None => (1.0, None),
                    };
                    if let Some(d) = e.rate_action {
                        out[d] += g * e.scale * split;
                    }
                    if let (Some(s), Some(p)) = (&e.split, probs) {
                        // d softmax_j / d z_i = p_j (delta_ij - p_i)
                        let pm = p[s.member];
                        for (i, &d) in s.actions.iter().enumerate() {
                            let delta = if i == s.member { 1.0 } else { 0.0 };
                            out[d] += g * e.scale * rate * s.sharpness * pm * (delta - p[i]);
                        }
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        match self {
            ActionMap::Identity { dim } if *dim == 0 => Err(DedpError::InvalidModel(
                "identity action map needs dim >= 1".into(),
            )),
            ActionMap::Constant { values, .. }
                if values.iter().any(|v| *v < 0.0 || !v.is_finite()) =>
            {
                Err(DedpError::InvalidModel(
                    "constant coefficients must be finite and >= 0".into(),
                ))
            }
            ActionMap::Expressions {
                num_actions,
                coefficients,
            } => {
                for e in coefficients {
                    if !(e.scale >= 0.0 && e.scale.is_finite()) {
                        return Err(DedpError::InvalidModel(
                            "coefficient scale must be >= 0".into(),
                        ));
                    }
                    if e.rate_action.is_some_and(|d| d >= *num_actions) {
                        return Err(DedpError::InvalidModel("rate action out of range".into()));
                    }
                    if let Some(s) = &e.split {
                        if s.actions.is_empty()
                            || s.member >= s.actions.len()
                            || s.actions.iter().any(|&d| d >= *num_actions)
                        {
                            return Err(DedpError::InvalidModel("malformed softmax split".into()));
                        }
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Actions feeding the softmax split of coefficient `k`, if any.
    pub fn split_group(&self, k: usize) -> Option<&[usize]> {
        match self {
            ActionMap::Expressions { coefficients, .. } => {
                coefficients[k].split.as_ref().map(|s| s.actions.as_slice())
            }
            _ => None,
        }
    }

    /// Upper bound of each coefficient over actions in `[0, 1]^D`.
    pub fn coefficient_ceilings(&self) -> Vec<f64> {
        match self {
            ActionMap::Identity { dim } => vec![1.0; *dim],
            ActionMap::Constant { values, .. } => values.clone(),
            ActionMap::Expressions { coefficients, .. } => {
                coefficients.iter().map(|e| e.scale).collect()
            }
        }
    }
}

/// Reward coefficient override on a half-open window of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWindow {
    pub start: u32,
    pub end: u32,
    pub coef: f64,
    #[serde(default)]
    pub offset: f64,
}

/// `R_t^m(x) = coef(t) * x + offset(t)` with piecewise-constant schedules.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerm {
    #[serde(default)]
    pub coef: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub windows: Vec<RewardWindow>,
}

impl RewardTerm {
    pub fn constant_coef(coef: f64) -> Self {
        RewardTerm {
            coef,
            offset: 0.0,
            windows: Vec::new(),
        }
    }

    fn active(&self, time_of_day: u32) -> (f64, f64) {
        self.windows
            .iter()
            .find(|w| w.start <= time_of_day && time_of_day < w.end)
            .map_or((self.coef, self.offset), |w| (w.coef, w.offset))
    }

    pub fn eval(&self, x: f64, time_of_day: u32) -> f64 {
        let (c, o) = self.active(time_of_day);
        c * x + o
    }

    /// Minimum over `0..=domain_max` at the given time.
    pub fn min_on(&self, domain_max: u32, time_of_day: u32) -> f64 {
        let (c, o) = self.active(time_of_day);
        (c * 0.0).min(c * domain_max as f64) + o
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSpec {
    pub components: Vec<RewardTerm>,
}

/// The clock component: reward schedules and policy features read the
/// step index modulo `steps_per_day`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockSpec {
    pub steps_per_day: u32,
}

/// Full system state: populations plus the step clock.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateVec {
    pub populations: Vec<u32>,
    pub clock: u32,
}

impl StateVec {
    pub fn new(populations: Vec<u32>, clock: u32) -> Self {
        StateVec { populations, clock }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.populations.iter().map(|&x| x as f64).collect()
    }
}

/// An event outcome; `Null` leaves the populations unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    Null,
    Fire(usize),
}

/// Categorical distribution over `{null, 1..V}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDistribution {
    pub rates: Vec<f64>,
    pub null: f64,
}

impl EventDistribution {
    pub fn prob(&self, event: Event) -> f64 {
        match event {
            Event::Null => self.null,
            Event::Fire(v) => self.rates[v],
        }
    }

    pub fn total(&self) -> f64 {
        self.null + self.rates.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    pub actions: Vec<Vec<f64>>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// A discrete event decision process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedpModel {
    pub components: Vec<Component>,
    pub events: Vec<EventSpec>,
    pub action_map: ActionMap,
    pub reward: RewardSpec,
    pub gamma: f64,
    #[serde(default)]
    pub clock: Option<ClockSpec>,
    /// Point-mass initial populations.
    pub initial: Vec<u32>,
}

impl DedpModel {
    pub fn validate(&self) -> Result<()> {
        let m = self.components.len();
        if m == 0 {
            return Err(DedpError::InvalidModel(
                "model needs at least one component".into(),
            ));
        }
        if self.events.is_empty() {
            return Err(DedpError::InvalidModel(
                "model needs at least one event".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(DedpError::InvalidModel(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        self.action_map.validate()?;
        let k = self.action_map.num_coeffs();
        for ev in &self.events {
            if ev.delta.len() != m {
                return Err(DedpError::InvalidModel(format!(
                    "event {} has delta of length {}, expected {m}",
                    ev.name,
                    ev.delta.len()
                )));
            }
            if ev.coeff_index >= k {
                return Err(DedpError::InvalidModel(format!(
                    "event {} uses coefficient {} of {k}",
                    ev.name, ev.coeff_index
                )));
            }
            for f in &ev.factors {
                f.validate(m)?;
            }
        }
        if self.reward.components.len() != m {
            return Err(DedpError::InvalidModel(
                "one reward term per component required".into(),
            ));
        }
        if self.initial.len() != m {
            return Err(DedpError::InvalidModel(
                "initial state has wrong length".into(),
            ));
        }
        for (i, (&x, c)) in self.initial.iter().zip(&self.components).enumerate() {
            if x > c.domain_max {
                return Err(DedpError::DomainViolation {
                    component: i,
                    value: x as i64,
                    max: c.domain_max,
                });
            }
        }
        if matches!(self.clock, Some(ClockSpec { steps_per_day: 0 })) {
            return Err(DedpError::InvalidModel(
                "clock needs steps_per_day >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn num_populations(&self) -> usize {
        self.components.len()
    }

    /// Component count including the clock when the model has one.
    pub fn num_components(&self) -> usize {
        self.components.len() + usize::from(self.clock.is_some())
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_map.num_actions()
    }

    pub fn initial_state(&self) -> StateVec {
        StateVec::new(self.initial.clone(), 0)
    }

    pub fn time_of_day(&self, clock: u32) -> u32 {
        match self.clock {
            Some(c) => clock % c.steps_per_day,
            None => clock,
        }
    }

    pub fn event_index(&self, name: &str) -> Option<usize> {
        self.events.iter().position(|e| e.name == name)
    }

    pub fn component_index(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }

    /// `prod_m g_v^m(s^m)`, the rate of `v` per unit coefficient.
    pub fn event_propensity(&self, state: &[u32], v: usize) -> f64 {
        let ev = &self.events[v];
        let mut out = 1.0;
        for (m, &d) in ev.delta.iter().enumerate() {
            if d != 0 {
                let next = state[m] as i64 + d as i64;
                if next < 0 || next > self.components[m].domain_max as i64 {
                    return 0.0;
                }
            }
        }
        for f in &ev.factors {
            out *= f.eval(state[f.component] as f64);
            if out == 0.0 {
                return 0.0;
            }
        }
        out
    }

    /// `h_v = c_v * prod_m g_v^m(s^m)`.
    pub fn event_rate(&self, state: &StateVec, coeffs: &[f64], v: usize) -> f64 {
        let c = coeffs[self.events[v].coeff_index];
        if c == 0.0 {
            return 0.0;
        }
        c * self.event_propensity(&state.populations, v)
    }

    pub fn event_distribution_from_coeffs(
        &self,
        state: &StateVec,
        coeffs: &[f64],
    ) -> Result<EventDistribution> {
        let rates: Vec<f64> = (0..self.events.len())
            .map(|v| self.event_rate(state, coeffs, v))
            .collect();
        let total: f64 = rates.iter().sum();
        if total > 1.0 {
            return Err(DedpError::RateOverflow {
                total,
                clock: state.clock,
            });
        }
        Ok(EventDistribution {
            rates,
            null: 1.0 - total,
        })
    }

    /// Event distribution under the coefficients `C(action)`.
    pub fn event_distribution(
        &self,
        state: &StateVec,
        action: &[f64],
    ) -> Result<EventDistribution> {
        let coeffs = self.action_map.coefficients(action);
        self.event_distribution_from_coeffs(state, &coeffs)
    }

    /// `s + delta_v`; the clock always advances by one.
    pub fn apply_event(&self, state: &StateVec, event: Event) -> Result<StateVec> {
        let mut next = state.clone();
        next.clock += 1;
        if let Event::Fire(v) = event {
            for (m, &d) in self.events[v].delta.iter().enumerate() {
                let value = state.populations[m] as i64 + d as i64;
                let max = self.components[m].domain_max;
                if value < 0 || value > max as i64 {
                    return Err(DedpError::DomainViolation {
                        component: m,
                        value,
                        max,
                    });
                }
                next.populations[m] = value as u32;
            }
        }
        Ok(next)
    }

    /// Next-state distribution with events summed out, sorted by state.
    pub fn marginalize_events(
        &self,
        state: &StateVec,
        action: &[f64],
    ) -> Result<Vec<(StateVec, f64)>> {
        let dist = self.event_distribution(state, action)?;
        let mut out: Vec<(StateVec, f64)> = Vec::with_capacity(dist.rates.len() + 1);
        let mut push = |s: StateVec, p: f64| match out.iter_mut().find(|(t, _)| *t == s) {
            Some((_, q)) => *q += p,
            None => out.push((s, p)),
        };
        push(self.apply_event(state, Event::Null)?, dist.null);
        for (v, &p) in dist.rates.iter().enumerate() {
            if p > 0.0 {
                push(self.apply_event(state, Event::Fire(v))?, p);
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn component_reward(&self, m: usize, x: f64, clock: u32) -> f64 {
        self.reward.components[m].eval(x, self.time_of_day(clock))
    }

    /// `R(s) = sum_m R_t^m(s^m)`.
    pub fn reward(&self, state: &StateVec) -> f64 {
        (0..self.components.len())
            .map(|m| self.component_reward(m, state.populations[m] as f64, state.clock))
            .sum()
    }

    /// Log-probability of a trajectory given its first state, with the
    /// deterministic policy supplying the action at each step.
    pub fn trajectory_log_prob(&self, policy: &Policy, traj: &Trajectory) -> Result<f64> {
        if traj.states.len() != traj.events.len() + 1 {
            return Ok(f64::NEG_INFINITY);
        }
        let mut logp = 0.0;
        for (t, &ev) in traj.events.iter().enumerate() {
            let s = &traj.states[t];
            let action = policy.act_state(s);
            if traj.actions.get(t).is_some_and(|a| *a != action) {
                return Ok(f64::NEG_INFINITY);
            }
            let p = self.event_distribution(s, &action)?.prob(ev);
            match self.apply_event(s, ev) {
                Ok(next) if next == traj.states[t + 1] && p > 0.0 => logp += p.ln(),
                _ => return Ok(f64::NEG_INFINITY),
            }
        }
        Ok(logp)
    }

    /// Per-(step, component) constants that make every reward term
    /// non-negative: `shift[t][m] = -min(0, min_x R_t^m(x))`.
    pub fn reward_shifts(&self, clock0: u32, horizon: usize) -> Vec<Vec<f64>> {
        (0..=horizon)
            .map(|t| {
                let tod = self.time_of_day(clock0 + t as u32);
                self.reward
                    .components
                    .iter()
                    .zip(&self.components)
                    .map(|(r, c)| (-r.min_on(c.domain_max, tod)).max(0.0))
                    .collect()
            })
            .collect()
    }

    /// Worst-case total event rate over all mass-conserving states with the
    /// initial population total, at coefficient ceilings.
    ///
    /// Bound: each event's propensity is maximized over its origin
    /// population separately, so the result is an upper bound whenever
    /// the per-event maxima are attained at distinct states. Events of one
    /// origin whose coefficients share a softmax split contribute their
    /// largest member only, since the split weights sum to one.
    pub fn worst_case_rate_bound(&self) -> f64 {
        let ceil = self.action_map.coefficient_ceilings();
        // Group events by their single decreasing component (origin).
        let total: u32 = self.initial.iter().sum();
        let mut per_origin: Vec<f64> = vec![0.0; self.components.len()];
        let mut split_max: std::collections::BTreeMap<(usize, Vec<usize>), f64> =
            Default::default();
        let mut other = 0.0;
        for ev in &self.events {
            let c = ceil[ev.coeff_index];
            let origins: Vec<usize> = (0..ev.delta.len()).filter(|&m| ev.delta[m] < 0).collect();
            // Per-capita maximum of the propensity along the origin component.
            let per_capita = |m: usize| -> f64 {
                (1..=self.components[m].domain_max.min(total))
                    .map(|x| {
                        let fac: f64 = ev
                            .factors
                            .iter()
                            .map(|f| {
                                if f.component == m {
                                    f.eval(x as f64)
                                } else {
                                    f.max_on(self.components[f.component].domain_max)
                                }
                            })
                            .product();
                        fac / x as f64
                    })
                    .fold(0.0, f64::max)
            };
            match origins.as_slice() {
                [o] => match self.action_map.split_group(ev.coeff_index) {
                    Some(group) => {
                        let e = split_max.entry((*o, group.to_vec())).or_insert(0.0);
                        *e = e.max(c * per_capita(*o));
                    }
                    None => per_origin[*o] += c * per_capita(*o),
                },
                _ => {
                    let fac: f64 = ev
                        .factors
                        .iter()
                        .map(|f| f.max_on(self.components[f.component].domain_max))
                        .product();
                    other += c * fac;
                }
            }
        }
        for ((o, _), r) in split_max {
            per_origin[o] += r;
        }
        // Mass conservation: place the whole population where the
        // per-capita outflow is largest, respecting domain caps.
        let mut order: Vec<usize> = (0..per_origin.len()).collect();
        order.sort_by(|&a, &b| per_origin[b].total_cmp(&per_origin[a]));
        let mut left = total;
        let mut bound = other;
        for m in order {
            if left == 0 {
                break;
            }
            let take = left.min(self.components[m].domain_max);
            bound += per_origin[m] * take as f64;
            left -= take;
        }
        bound
    }
}
