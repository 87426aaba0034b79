//! Deterministic differentiable policies `a = mu(s; theta)`.
//!
//! Every architecture squashes its outputs through a logistic sigmoid, so
//! actions live in `(0, 1)` and the action map's coefficient ceilings
//! bound the resulting rates. Only smooth activations are used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DedpError, Result};
use crate::model::{DedpModel, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockBins {
    pub steps_per_day: u32,
    pub bins: u32,
}

/// Map from `(populations, clock)` to a real feature vector: scaled
/// populations, then a one-hot time-of-day bin, then a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    #[serde(default)]
    pub population_scale: Option<Vec<f64>>,
    #[serde(default)]
    pub clock_bins: Option<ClockBins>,
    pub bias: bool,
}

impl FeatureSpec {
    pub fn bias_only() -> Self {
        FeatureSpec {
            population_scale: None,
            clock_bins: None,
            bias: true,
        }
    }

    pub fn clock_only(steps_per_day: u32, bins: u32) -> Self {
        FeatureSpec {
            population_scale: None,
            clock_bins: Some(ClockBins {
                steps_per_day,
                bins,
            }),
            bias: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.population_scale.as_ref().map_or(0, Vec::len)
            + self.clock_bins.map_or(0, |c| c.bins as usize)
            + usize::from(self.bias)
    }

    pub fn eval(&self, populations: &[f64], clock: u32) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        if let Some(scale) = &self.population_scale {
            out.extend(scale.iter().zip(populations).map(|(s, x)| s * x));
        }
        if let Some(cb) = self.clock_bins {
            let tod = clock % cb.steps_per_day;
            let bin = (tod as u64 * cb.bins as u64 / cb.steps_per_day as u64) as usize;
            out.extend((0..cb.bins as usize).map(|b| if b == bin { 1.0 } else { 0.0 }));
        }
        if self.bias {
            out.push(1.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// One logit per (rounded population state, action); `radix` holds
    /// the component domain sizes.
    Tabular { radix: Vec<u32> },
    /// `a = sigmoid(W phi(s))`
    LinearSigmoid,
    /// `a = sigmoid(W2 [tanh(W1 phi(s)); 1])`
    Perceptron { hidden: usize },
}

/// A deterministic policy; its JSON form is the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub architecture: Architecture,
    pub num_actions: usize,
    pub theta: Vec<f64>,
    pub feature_spec: FeatureSpec,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Policy {
    pub fn param_len(
        architecture: &Architecture,
        features: &FeatureSpec,
        num_actions: usize,
    ) -> usize {
        let f = features.dim();
        match architecture {
            Architecture::Tabular { radix } => {
                radix.iter().map(|&r| r as usize).product::<usize>() * num_actions
            }
            Architecture::LinearSigmoid => num_actions * f,
            Architecture::Perceptron { hidden } => hidden * f + num_actions * (hidden + 1),
        }
    }

    /// Small uniform initialization from a fixed seed; tabular policies start
    /// at the squash midpoint.
    pub fn new(
        architecture: Architecture,
        features: FeatureSpec,
        num_actions: usize,
        seed: u64,
    ) -> Self {
        let len = Self::param_len(&architecture, &features, num_actions);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = match architecture {
            Architecture::Tabular { .. } => 0.0,
            Architecture::LinearSigmoid => 0.01,
            Architecture::Perceptron { .. } => 0.5 / (features.dim() as f64).sqrt(),
        };
        let theta = (0..len)
            .map(|_| {
                if scale == 0.0 {
                    0.0
                } else {
                    rng.random_range(-scale..scale)
                }
            })
            .collect();
        Policy {
            architecture,
            num_actions,
            theta,
            feature_spec: features,
        }
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        Policy {
            theta,
            ..self.clone()
        }
    }

    /// Bias-only linear-sigmoid policy emitting the given actions in `(0, 1)`.
    pub fn constant_actions(actions: &[f64]) -> Self {
        let theta = actions.iter().map(|&a| logit(a)).collect();
        Policy {
            architecture: Architecture::LinearSigmoid,
            num_actions: actions.len(),
            theta,
            feature_spec: FeatureSpec::bias_only(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::param_len(&self.architecture, &self.feature_spec, self.num_actions);
        if self.theta.len() != expected {
            return Err(DedpError::InvalidPolicy(format!(
                "theta has length {}, architecture needs {expected}",
                self.theta.len()
            )));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(DedpError::InvalidPolicy("theta must be finite".into()));
        }
        Ok(())
    }

    /// Checks the policy against a model's action and population layout.
    pub fn validate_for(&self, model: &DedpModel) -> Result<()> {
        self.validate()?;
        if self.num_actions != model.num_actions() {
            return Err(DedpError::InvalidPolicy(format!(
                "policy emits {} actions, model expects {}",
                self.num_actions,
                model.num_actions()
            )));
        }
        if let Some(s) = &self.feature_spec.population_scale {
            if s.len() != model.num_populations() {
                return Err(DedpError::InvalidPolicy(
                    "population feature length mismatch".into(),
                ));
            }
        }
        if let Architecture::Tabular { radix } = &self.architecture {
            if radix.len() != model.num_populations() {
                return Err(DedpError::InvalidPolicy(
                    "tabular radix length mismatch".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn table_index(radix: &[u32], populations: &[f64]) -> usize {
        radix.iter().zip(populations).fold(0usize, |acc, (&r, &x)| {
            let v = (x.round().max(0.0) as u32).min(r - 1);
            acc * r as usize + v as usize
        })
    }

    pub fn act(&self, populations: &[f64], clock: u32) -> Vec<f64> {
        let d = self.num_actions;
        match &self.architecture {
            Architecture::Tabular { radix } => {
                let idx = Self::table_index(radix, populations);
                self.theta[idx * d..(idx + 1) * d]
                    .iter()
                    .map(|&z| sigmoid(z))
                    .collect()
            }
            Architecture::LinearSigmoid => {
                let phi = self.feature_spec.eval(populations, clock);
                let f = phi.len();
                (0..d)
                    .map(|a| {
                        sigmoid(
                            self.theta[a * f..(a + 1) * f]
                                .iter()
                                .zip(&phi)
                                .map(|(w, x)| w * x)
                                .sum(),
                        )
                    })
                    .collect()
            }
            Architecture::Perceptron { hidden } => {
                let phi = self.feature_spec.eval(populations, clock);
                let (h, _) = self.perceptron_hidden(*hidden, &phi);
                let w2 = &self.theta[hidden * phi.len()..];
                (0..d)
                    .map(|a| {
                        let row = &w2[a * (hidden + 1)..(a + 1) * (hidden + 1)];
                        sigmoid(
                            row[..*hidden]
                                .iter()
                                .zip(&h)
                                .map(|(w, x)| w * x)
                                .sum::<f64>()
                                + row[*hidden],
                        )
                    })
                    .collect()
            }
        }
    }

    pub fn act_state(&self, state: &StateVec) -> Vec<f64> {
        self.act(&state.as_f64(), state.clock)
    }

    fn perceptron_hidden(&self, hidden: usize, phi: &[f64]) -> (Vec<f64>, usize) {
        let f = phi.len();
        let h = (0..hidden)
            .map(|j| {
                self.theta[j * f..(j + 1) * f]
                    .iter()
                    .zip(phi)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    .tanh()
            })
            .collect();
        (h, f)
    }

    /// `(da/dtheta)^T grad_a`.
    pub fn vjp(&self, populations: &[f64], clock: u32, grad_a: &[f64]) -> Vec<f64> {
        let d = self.num_actions;
        let mut out = vec![0.0; self.theta.len()];
        let actions = self.act(populations, clock);
        let delta: Vec<f64> = actions
            .iter()
            .zip(grad_a)
            .map(|(a, g)| g * a * (1.0 - a))
            .collect();
        match &self.architecture {
            Architecture::Tabular { radix } => {
                let idx = Self::table_index(radix, populations);
                out[idx * d..(idx + 1) * d].copy_from_slice(&delta);
            }
            Architecture::LinearSigmoid => {
                let phi = self.feature_spec.eval(populations, clock);
                let f = phi.len();
                for (a, &da) in delta.iter().enumerate() {
                    if da != 0.0 {
                        for (o, x) in out[a * f..(a + 1) * f].iter_mut().zip(&phi) {
                            *o = da * x;
                        }
                    }
                }
            }
            Architecture::Perceptron { hidden } => {
                let hidden = *hidden;
                let phi = self.feature_spec.eval(populations, clock);
                let (h, f) = self.perceptron_hidden(hidden, &phi);
                let w2_off = hidden * f;
                let mut dh = vec![0.0; hidden];
                for (a, &da) in delta.iter().enumerate() {
                    let row = w2_off + a * (hidden + 1);
                    for j in 0..hidden {
                        out[row + j] = da * h[j];
                        dh[j] += da * self.theta[row + j];
                    }
                    out[row + hidden] = da;
                }
                for j in 0..hidden {
                    let dz = dh[j] * (1.0 - h[j] * h[j]);
                    for (o, x) in out[j * f..(j + 1) * f].iter_mut().zip(&phi) {
                        *o = dz * x;
                    }
                }
            }
        }
        out
    }

    /// `(da/dpopulations)^T grad_a`. Tabular policies are piecewise
    /// constant in the populations and return zeros.
    pub fn state_vjp(&self, populations: &[f64], clock: u32, grad_a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; populations.len()];
        let Some(scale) = &self.feature_spec.population_scale else {
            return out;
        };
        let actions = self.act(populations, clock);
        let delta: Vec<f64> = actions
            .iter()
            .zip(grad_a)
            .map(|(a, g)| g * a * (1.0 - a))
            .collect();
        let phi = self.feature_spec.eval(populations, clock);
        let f = phi.len();
        let mut grad_phi = vec![0.0; f];
        match &self.architecture {
            Architecture::Tabular { .. } => return out,
            Architecture::LinearSigmoid => {
                for (a, &da) in delta.iter().enumerate() {
                    if da != 0.0 {
                        for (g, w) in grad_phi.iter_mut().zip(&self.theta[a * f..(a + 1) * f]) {
                            *g += da * w;
                        }
                    }
                }
            }
            Architecture::Perceptron { hidden } => {
                let hidden = *hidden;
                let (h, _) = self.perceptron_hidden(hidden, &phi);
                let w2_off = hidden * f;
                for j in 0..hidden {
                    let dh: f64 = delta
                        .iter()
                        .enumerate()
                        .map(|(a, da)| da * self.theta[w2_off + a * (hidden + 1) + j])
                        .sum();
                    let dz = dh * (1.0 - h[j] * h[j]);
                    for (g, w) in grad_phi.iter_mut().zip(&self.theta[j * f..(j + 1) * f]) {
                        *g += dz * w;
                    }
                }
            }
        }
        for ((o, s), g) in out.iter_mut().zip(scale).zip(&grad_phi) {
            *o = s * g;
        }
        out
    }

    /// Dense `num_actions x num_params` Jacobian `da/dtheta`, row-major.
    pub fn action_jacobian(&self, populations: &[f64], clock: u32) -> Vec<f64> {
        let (d, p) = (self.num_actions, self.theta.len());
        let mut jac = vec![0.0; d * p];
        for a in 0..d {
            let mut unit = vec![0.0; d];
            unit[a] = 1.0;
            jac[a * p..(a + 1) * p].copy_from_slice(&self.vjp(populations, clock, &unit));
        }
        jac
    }

    /// Dense `num_coeffs x num_params` Jacobian `dc/dtheta = dc/da * da/dtheta`.
    pub fn rate_coefficient_jacobian(&self, model: &DedpModel, state: &StateVec) -> Vec<f64> {
        let pops = state.as_f64();
        let action = self.act(&pops, state.clock);
        let ca = model.action_map.jacobian(&action);
        let at = self.action_jacobian(&pops, state.clock);
        let (k, d, p) = (
            model.action_map.num_coeffs(),
            self.num_actions,
            self.theta.len(),
        );
        let mut out = vec![0.0; k * p];
        for i in 0..k {
            for a in 0..d {
                let w = ca[i * d + a];
                if w != 0.0 {
                    for j in 0..p {
                        out[i * p + j] += w * at[a * p + j];
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Policy =
            serde_json::from_str(text).map_err(|e| DedpError::InvalidPolicy(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}
