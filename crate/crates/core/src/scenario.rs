//! Transportation scenarios: the SynthTown-style commute network and small
//! line-graph commute chains for oracle checks.
//!
//! Each location is a population component. A move event takes one
//! individual along a directed edge at rate
//! `c * (x_from / n) * max(0, 1 - x_to / capacity)`, the congestion factor
//! applying only when the destination is a capacity-limited link. Departure
//! rates out of facilities and the softmax split over a facility's outgoing
//! edges are policy actions; link exits run at their fixed free-flow rate.

use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::model::{
    ActionMap, ClockSpec, CoeffExpr, Component, DedpModel, EventSpec, FactorSpec, RewardSpec,
    RewardTerm, RewardWindow, SplitSpec, StateVec,
};
use crate::policy::{ClockBins, FeatureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationKind {
    Home,
    Work,
    Link,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub name: String,
    pub kind: LocationKind,
    /// Vehicle capacity; links only.
    #[serde(default)]
    pub capacity: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Per-capita rate ceiling in units of `1 / n`.
    pub free_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub locations: Vec<Location>,
    pub edges: Vec<Edge>,
    #[serde(default = "default_sharpness")]
    pub split_sharpness: f64,
}

fn default_sharpness() -> f64 {
    8.0
}

impl RoadNetwork {
    /// One home, one work facility, 12 parallel morning routes and 11
    /// parallel evening routes, each route a single link.
    pub fn synthtown() -> Self {
        let mut locations = vec![
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
        ];
        let mut edges = Vec::new();
        for k in 0..23usize {
            let morning = k < 12;
            let i = if morning { k } else { k - 12 };
            let id = locations.len();
            let capacity = 3 + ((5 * k + 2) % 8) as u32;
            let free_flow = 0.40 + 0.58 * ((7 * k + 3) % 12) as f64 / 11.0;
            let name = if morning {
                format!("am{i:02}")
            } else {
                format!("pm{i:02}")
            };
            locations.push(Location {
                name,
                kind: LocationKind::Link,
                capacity: Some(capacity),
            });
            let (from, to) = if morning { (0, 1) } else { (1, 0) };
            edges.push(Edge {
                from,
                to: id,
                free_flow: 0.98,
            });
            edges.push(Edge {
                from: id,
                to,
                free_flow,
            });
        }
        RoadNetwork {
            locations,
            edges,
            split_sharpness: default_sharpness(),
        }
    }

    /// Home and work joined directly in both directions.
    pub fn two_location() -> Self {
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
            ],
            edges: vec![
                Edge {
                    from: 0,
                    to: 1,
                    free_flow: 0.9,
                },
                Edge {
                    from: 1,
                    to: 0,
                    free_flow: 0.9,
                },
            ],
            split_sharpness: default_sharpness(),
        }
    }

    fn find(&self, kind: LocationKind) -> Option<usize> {
        self.locations.iter().position(|l| l.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DedpError::InvalidConfig(msg));
        let n = self.locations.len();
        for kind in [LocationKind::Home, LocationKind::Work] {
            if self.locations.iter().filter(|l| l.kind == kind).count() != 1 {
                return bad(format!("network needs exactly one {kind:?} facility"));
            }
        }
        for l in &self.locations {
            match (l.kind, l.capacity) {
                (LocationKind::Link, Some(0)) | (LocationKind::Link, None) => {
                    return bad(format!("link {} needs a positive capacity", l.name))
                }
                (LocationKind::Link, _) => {}
                (_, Some(_)) => return bad(format!("facility {} cannot have a capacity", l.name)),
                _ => {}
            }
        }
        for e in &self.edges {
            if e.from >= n || e.to >= n || e.from == e.to {
                return bad(format!("malformed edge {} -> {}", e.from, e.to));
            }
            if !(e.free_flow > 0.0 && e.free_flow <= 1.0) {
                return bad(format!(
                    "free-flow rate must lie in (0, 1], got {}",
                    e.free_flow
                ));
            }
        }
        if !(self.split_sharpness > 0.0 && self.split_sharpness.is_finite()) {
            return bad("split sharpness must be positive".into());
        }
        let home = self.find(LocationKind::Home).expect("checked");
        let work = self.find(LocationKind::Work).expect("checked");
        if !self.reaches(home, work) || !self.reaches(work, home) {
            return bad("home and work must be mutually reachable".into());
        }
        Ok(())
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.locations.len()];
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(self.edges.iter().filter(|e| e.from == u).map(|e| e.to));
        }
        false
    }
}

/// Daily activity schedule and per-individual score coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps_per_day: u32,
    pub work_start: u32,
    pub work_end: u32,
    /// At work during work hours.
    pub beta_work: f64,
    /// At home outside work hours.
    pub beta_home: f64,
    /// At a facility outside its active window.
    pub beta_inactive: f64,
    /// On a link, any time.
    pub beta_trav: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps_per_day: 144,
            work_start: 54,
            work_end: 102,
            beta_work: 1.0,
            beta_home: 1.0,
            beta_inactive: 0.0,
            beta_trav: -1.0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DedpError::InvalidConfig(msg.into()));
        if self.steps_per_day == 0
            || self.work_start >= self.work_end
            || self.work_end > self.steps_per_day
        {
            return bad("schedule needs 0 <= work_start < work_end <= steps_per_day");
        }
        if self.beta_trav > 0.0 {
            return bad("travel score must be <= 0");
        }
        if self.beta_work < 0.0 || self.beta_home < 0.0 {
            return bad("active facility scores must be >= 0");
        }
        Ok(())
    }

    fn reward_for(&self, kind: LocationKind) -> RewardTerm {
        let window = |coef| {
            vec![RewardWindow {
                start: self.work_start,
                end: self.work_end,
                coef,
                offset: 0.0,
            }]
        };
        match kind {
            LocationKind::Home => RewardTerm {
                coef: self.beta_home,
                offset: 0.0,
                windows: window(self.beta_inactive),
            },
            LocationKind::Work => RewardTerm {
                coef: self.beta_inactive,
                offset: 0.0,
                windows: window(self.beta_work),
            },
            LocationKind::Link => RewardTerm::constant_coef(self.beta_trav),
        }
    }
}

/// A built model with its initial state and policy features.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: DedpModel,
    pub features: FeatureSpec,
    pub initial: StateVec,
}

/// Builds the commute DEDP over `network`; everyone starts at home at
/// clock 0.
pub fn build_synthtown(
    n_individuals: u32,
    network: &RoadNetwork,
    schedule: &ScheduleSpec,
    gamma: f64,
    clock_bins: u32,
) -> Result<Scenario> {
    if n_individuals == 0 {
        return Err(DedpError::InvalidConfig(
            "need at least one individual".into(),
        ));
    }
    network.validate()?;
    schedule.validate()?;
    let n = n_individuals;
    let per_capita = 1.0 / n as f64;
    let components: Vec<Component> = network
        .locations
        .iter()
        .map(|l| Component::new(l.name.clone(), l.capacity.map_or(n, |c| c.min(n))))
        .collect();

    // Departure action per facility, then split logits per branching facility.
    let facilities: Vec<usize> = (0..network.locations.len())
        .filter(|&i| network.locations[i].kind != LocationKind::Link)
        .collect();
    let mut num_actions = facilities.len();
    let mut splits: Vec<Option<Vec<usize>>> = vec![None; network.locations.len()];
    for &f in &facilities {
        let out = network.edges.iter().filter(|e| e.from == f).count();
        if out >= 2 {
            splits[f] = Some((num_actions..num_actions + out).collect());
            num_actions += out;
        }
    }

    let mut events = Vec::with_capacity(network.edges.len());
    let mut coefficients = Vec::with_capacity(network.edges.len());
    let mut member = vec![0usize; network.locations.len()];
    for e in &network.edges {
        let from = &network.locations[e.from];
        let to = &network.locations[e.to];
        let mut delta = vec![0; network.locations.len()];
        delta[e.from] = -1;
        delta[e.to] = 1;
        let mut factors = vec![FactorSpec::linear(e.from, per_capita)];
        if let Some(cap) = to.capacity {
            factors.push(FactorSpec::congestion(e.to, cap as f64));
        }
        let coeff = if from.kind == LocationKind::Link {
            CoeffExpr {
                scale: e.free_flow,
                rate_action: None,
                split: None,
            }
        } else {
            let dep = facilities
                .iter()
                .position(|&f| f == e.from)
                .expect("facility");
            let split = splits[e.from].as_ref().map(|actions| {
                let s = SplitSpec {
                    actions: actions.clone(),
                    member: member[e.from],
                    sharpness: network.split_sharpness,
                };
                member[e.from] += 1;
                s
            });
            CoeffExpr {
                scale: e.free_flow,
                rate_action: Some(dep),
                split,
            }
        };
        events.push(EventSpec {
            name: format!("{}->{}", from.name, to.name),
            delta,
            coeff_index: coefficients.len(),
            factors,
        });
        coefficients.push(coeff);
    }

    let reward = RewardSpec {
        components: network
            .locations
            .iter()
            .map(|l| schedule.reward_for(l.kind))
            .collect(),
    };
    let home = network.find(LocationKind::Home).expect("validated");
    let mut initial = vec![0; network.locations.len()];
    initial[home] = n;
    let model = DedpModel {
        components,
        events,
        action_map: ActionMap::Expressions {
            num_actions,
            coefficients,
        },
        reward,
        gamma,
        clock: Some(ClockSpec {
            steps_per_day: schedule.steps_per_day,
        }),
        initial,
    };
    model.validate()?;
    let bound = model.worst_case_rate_bound();
    if bound > 1.0 {
        return Err(DedpError::InvalidConfig(format!(
            "worst-case total rate {bound} exceeds 1"
        )));
    }
    let features = FeatureSpec {
        population_scale: Some(vec![per_capita; network.locations.len()]),
        clock_bins: (clock_bins > 0).then_some(ClockBins {
            steps_per_day: schedule.steps_per_day,
            bins: clock_bins,
        }),
        bias: true,
    };
    let initial = model.initial_state();
    Ok(Scenario {
        model,
        features,
        initial,
    })
}

/// Line graph `0 - 1 - ... - (L-1)` with everyone starting at location 0.
///
/// Action 0 scales every forward move and action 1 every backward move.
/// Rewards: `1` per individual at the far end, `0.2` per individual at the
/// start, nothing in between.
pub fn build_commute_chain(n_locations: usize, n_individuals: u32) -> DedpModel {
    assert!(
        n_locations >= 2 && n_individuals >= 1,
        "chain needs two locations and one individual"
    );
    let n = n_individuals;
    let per_capita = 1.0 / n as f64;
    let mut events = Vec::new();
    for i in 0..n_locations - 1 {
        for (from, to, k, dir) in [(i, i + 1, 0, "fwd"), (i + 1, i, 1, "bwd")] {
            let mut delta = vec![0; n_locations];
            delta[from] = -1;
            delta[to] = 1;
            events.push(EventSpec {
                name: format!("{dir}{from}->{to}"),
                delta,
                coeff_index: k,
                factors: vec![FactorSpec::linear(from, per_capita)],
            });
        }
    }
    let rewards = (0..n_locations)
        .map(|i| match i {
            0 => RewardTerm::constant_coef(0.2),
            i if i == n_locations - 1 => RewardTerm::constant_coef(1.0),
            _ => RewardTerm::default(),
        })
        .collect();
    let mut initial = vec![0; n_locations];
    initial[0] = n;
    let expr = |d| CoeffExpr {
        scale: 0.45,
        rate_action: Some(d),
        split: None,
    };
    DedpModel {
        components: (0..n_locations)
            .map(|i| Component::new(format!("loc{i}"), n))
            .collect(),
        events,
        action_map: ActionMap::Expressions {
            num_actions: 2,
            coefficients: vec![expr(0), expr(1)],
        },
        reward: RewardSpec {
            components: rewards,
        },
        gamma: 0.9,
        clock: Some(ClockSpec { steps_per_day: 24 }),
        initial,
    }
}

/// Number of ways to place `total` individuals on components with the given
/// capacities, as `f64` (exact below 2^53).
pub fn conserving_state_count(capacities: &[u32], total: u32) -> f64 {
    let t = total as usize;
    let mut ways = vec![0.0f64; t + 1];
    ways[0] = 1.0;
    for &cap in capacities {
        let mut next = vec![0.0; t + 1];
        for (s, w) in ways.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for x in 0..=(cap as usize).min(t - s) {
                next[s + x] += w;
            }
        }
        ways = next;
    }
    ways[t]
}

/// JSON scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Synthtown {
        n_individuals: u32,
        #[serde(default)]
        network: Option<RoadNetwork>,
        #[serde(default)]
        schedule: ScheduleSpec,
        gamma: f64,
        #[serde(default = "default_bins")]
        clock_bins: u32,
    },
    CommuteChain {
        n_locations: usize,
        n_individuals: u32,
        #[serde(default)]
        gamma: Option<f64>,
    },
    /// A model given in full; the policy sees the clock bins and a bias.
    Custom {
        model: DedpModel,
        #[serde(default)]
        features: Option<FeatureSpec>,
    },
}

fn default_bins() -> u32 {
    24
}

/// Output of `scenario validate`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub num_components: usize,
    pub num_events: usize,
    pub num_actions: usize,
    pub worst_case_rate_bound: f64,
    /// Mass-conserving population states, clock excluded.
    pub state_space_estimate: f64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DedpError::InvalidConfig(format!("scenario: {e}")))
    }

    pub fn build(&self) -> Result<Scenario> {
        match self {
            ScenarioConfig::Synthtown {
                n_individuals,
                network,
                schedule,
                gamma,
                clock_bins,
            } => {
                let net = network.clone().unwrap_or_else(RoadNetwork::synthtown);
                build_synthtown(*n_individuals, &net, schedule, *gamma, *clock_bins)
            }
            ScenarioConfig::CommuteChain {
                n_locations,
                n_individuals,
                gamma,
            } => {
                if *n_locations < 2 || *n_individuals == 0 {
                    return Err(DedpError::InvalidConfig(
                        "chain needs two locations and one individual".into(),
                    ));
                }
                let mut model = build_commute_chain(*n_locations, *n_individuals);
                if let Some(g) = gamma {
                    model.gamma = *g;
                }
                model.validate()?;
                let features = FeatureSpec::clock_only(24, 4);
                let initial = model.initial_state();
                Ok(Scenario {
                    model,
                    features,
                    initial,
                })
            }
            ScenarioConfig::Custom { model, features } => {
                model.validate()?;
                let features = features.clone().unwrap_or_else(|| match model.clock {
                    Some(c) => FeatureSpec::clock_only(c.steps_per_day, c.steps_per_day.min(24)),
                    None => FeatureSpec::bias_only(),
                });
                Ok(Scenario {
                    model: model.clone(),
                    features,
                    initial: model.initial_state(),
                })
            }
        }
    }

    pub fn summary(&self) -> Result<ScenarioSummary> {
        let sc = self.build()?;
        let m = &sc.model;
        let caps: Vec<u32> = m.components.iter().map(|c| c.domain_max).collect();
        Ok(ScenarioSummary {
            num_components: m.num_components(),
            num_events: m.num_events(),
            num_actions: m.num_actions(),
            worst_case_rate_bound: m.worst_case_rate_bound(),
            state_space_estimate: conserving_state_count(&caps, m.initial.iter().sum()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Event;

    fn synthtown(n: u32) -> Scenario {
        build_synthtown(
            n,
            &RoadNetwork::synthtown(),
            &ScheduleSpec::default(),
            0.99,
            24,
        )
        .unwrap()
    }

    #[test]
    fn synthtown_shape() {
        let sc = synthtown(50);
        assert_eq!(sc.model.num_components(), 26);
        assert_eq!(sc.model.num_events(), 46);
        assert_eq!(sc.model.num_actions(), 25);
        assert!(sc.model.worst_case_rate_bound() <= 1.0);
        assert_eq!(sc.features.dim(), 25 + 24 + 1);
    }

    #[test]
    fn every_event_conserves_mass() {
        let sc = synthtown(50);
        for ev in &sc.model.events {
            assert_eq!(ev.delta.iter().sum::<i32>(), 0);
        }
        let chain = build_commute_chain(4, 3);
        for ev in &chain.events {
            assert_eq!(ev.delta.iter().sum::<i32>(), 0);
        }
    }

    #[test]
    fn two_location_network_is_the_tiny_chain() {
        let sc = build_synthtown(
            1,
            &RoadNetwork::two_location(),
            &ScheduleSpec::default(),
            0.9,
            0,
        )
        .unwrap();
        assert_eq!(sc.model.num_populations(), 2);
        assert_eq!(sc.model.num_events(), 2);
        assert_eq!(sc.model.num_actions(), 2);
    }

    #[test]
    fn work_hours_reward_exceeds_rest_hours() {
        let sc = synthtown(50);
        let m = &sc.model;
        let mut pops = vec![0; m.num_populations()];
        pops[1] = 50;
        let during = m.reward(&StateVec::new(pops.clone(), 60));
        let rest = m.reward(&StateVec::new(pops, 120));
        assert!(during > rest);
    }

    #[test]
    fn zero_action_chain_stays_put() {
        let m = build_commute_chain(2, 1);
        let dist = m
            .event_distribution(&m.initial_state(), &[0.0, 0.0])
            .unwrap();
        assert_eq!(dist.prob(Event::Null), 1.0);
    }

    #[test]
    fn conserving_count_matches_stars_and_bars() {
        // C(n + k - 1, k - 1) for 3 unbounded components and 2 individuals.
        assert_eq!(conserving_state_count(&[2, 2, 2], 2), 6.0);
        assert_eq!(conserving_state_count(&[1, 1], 1), 2.0);
        assert_eq!(conserving_state_count(&[1, 5], 3), 2.0);
    }

    #[test]
    fn config_round_trip() {
        let cfg = ScenarioConfig::Synthtown {
            n_individuals: 5,
            network: None,
            schedule: ScheduleSpec::default(),
            gamma: 0.99,
            clock_bins: 24,
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        let s = cfg.summary().unwrap();
        assert_eq!(s.num_components, 26);
        assert!(ScenarioConfig::from_json(
            r#"{"kind":"commute_chain","n_locations":2,"n_individuals":1}"#
        )
        .is_ok());
        assert!(ScenarioConfig::from_json(r#"{"kind":"nope"}"#).is_err());
    }
}
