//! Tractable AAI functional, utility and cost families, geometric index.

mod axes;

pub use axes::{axis_value, default_axis_lipschitz, geometric_aai, lipschitz_modulus, AxisConfig, AxisSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::{Axis, Battery};
use crate::canonical::CanonicalRep;

#[derive(Debug, Error, PartialEq)]
pub enum FunctionalError {
    #[error("family `{0}` has no tasks with runs")]
    EmptyFamily(String),
    #[error("{0} must be nonnegative, got {1}")]
    Negative(&'static str, f64),
    #[error("invalid utility: {0}")]
    Utility(String),
    #[error("invalid cost model: {0}")]
    Cost(String),
    #[error("axis {axis}: missing metric keys {keys:?}")]
    MissingMetrics { axis: Axis, keys: Vec<String> },
    #[error("axis {0}: anchor `{1}` must be > 0")]
    Anchor(Axis, &'static str),
    #[error("axis {0} is not configured")]
    MissingAxis(Axis),
    #[error("{0}")]
    Config(String),
    #[error("representation does not match battery: {0}")]
    Mismatch(String),
}

/// Per-task utility on the canonical `(u, tau)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", content = "params", rename_all = "snake_case")]
pub enum UtilityFamily {
    /// `min(u / tau, 1)`, identically 1 when `tau = 0`.
    Ramp,
    /// `(1 - e^{-c u}) / (1 - e^{-c})`.
    ExpSat { c: f64 },
}

impl Default for UtilityFamily {
    fn default() -> Self {
        UtilityFamily::Ramp
    }
}

impl UtilityFamily {
    pub fn validate(&self) -> Result<(), FunctionalError> {
        match *self {
            UtilityFamily::Ramp => Ok(()),
            UtilityFamily::ExpSat { c } if c > 0.0 && c.is_finite() => Ok(()),
            UtilityFamily::ExpSat { c } => Err(FunctionalError::Utility(format!("exp_sat needs c > 0, got {c}"))),
        }
    }

    #[inline]
    pub fn psi(&self, u: f64, tau: f64) -> f64 {
        match *self {
            UtilityFamily::Ramp => {
                if tau <= 0.0 {
                    1.0
                } else {
                    (u / tau).min(1.0)
                }
            }
            UtilityFamily::ExpSat { c } => (1.0 - (-c * u).exp()) / (1.0 - (-c).exp()),
        }
    }

    /// `int_0^x psi(u, tau) du`.
    pub fn antiderivative(&self, x: f64, tau: f64) -> f64 {
        match *self {
            UtilityFamily::Ramp => {
                if tau <= 0.0 {
                    x
                } else if x <= tau {
                    x * x / (2.0 * tau)
                } else {
                    tau / 2.0 + (x - tau)
                }
            }
            UtilityFamily::ExpSat { c } => (x - (1.0 - (-c * x).exp()) / c) / (1.0 - (-c).exp()),
        }
    }

    /// Largest slope in `u` on `[0,1]`.
    pub fn lipschitz(&self, tau: f64) -> f64 {
        match *self {
            UtilityFamily::Ramp => {
                if tau <= 0.0 {
                    0.0
                } else {
                    1.0 / tau
                }
            }
            UtilityFamily::ExpSat { c } => c / (1.0 - (-c).exp()),
        }
    }
}

/// `Cost(r) = min(<c, r>, B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub weights: Vec<f64>,
    pub cap: f64,
}

impl CostModel {
    pub fn zero(d: usize) -> Self {
        Self { weights: vec![0.0; d], cap: 1.0 }
    }

    pub fn validate(&self, d_r: usize) -> Result<(), FunctionalError> {
        if self.weights.len() != d_r {
            return Err(FunctionalError::Cost(format!("{} weights for {d_r} resources", self.weights.len())));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(FunctionalError::Cost("weights must be >= 0".into()));
        }
        if !(self.cap > 0.0) {
            return Err(FunctionalError::Cost("cap must be > 0".into()));
        }
        Ok(())
    }

    pub fn cost(&self, r: &[f64]) -> f64 {
        let dot: f64 = self.weights.iter().zip(r).map(|(c, x)| c * x).sum();
        dot.min(self.cap)
    }
}

/// Parameters of the tractable functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractableConfig {
    #[serde(default)]
    pub psi: UtilityFamily,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub gamma: f64,
    pub cost: CostModel,
}

impl TractableConfig {
    pub fn new(psi: UtilityFamily, lambda: f64, gamma: f64, cost: CostModel) -> Self {
        Self { psi, lambda, gamma, cost }
    }

    pub fn validate(&self, d_r: usize) -> Result<(), FunctionalError> {
        if !(self.lambda >= 0.0) {
            return Err(FunctionalError::Negative("lambda", self.lambda));
        }
        if !(self.gamma >= 0.0) {
            return Err(FunctionalError::Negative("gamma", self.gamma));
        }
        self.psi.validate()?;
        self.cost.validate(d_r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub value: f64,
    pub family_means: BTreeMap<String, f64>,
    pub family_weights: BTreeMap<String, f64>,
    pub dispersion_penalty: f64,
    pub mean_cost: f64,
    pub cost_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_values: Option<BTreeMap<String, f64>>,
    pub n_per_task: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<(f64, f64)>,
}

impl ScoreReport {
    /// Recompute the value from its parts.
    pub fn recompose(&self) -> f64 {
        let mut acc = 0.0;
        for (k, m) in &self.family_means {
            acc += self.family_weights[k] * m;
        }
        acc - self.dispersion_penalty - self.cost_penalty
    }
}

/// Population variance.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Mean cost over runs, or the cost of the mean resource vector when the
/// representation carries no per-run resources.
pub fn mean_cost(canon: &CanonicalRep, cost: &CostModel) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in canon.run_resources() {
        sum += cost.cost(r);
        n += 1;
    }
    if n == 0 {
        cost.cost(&canon.mean_resources)
    } else {
        sum / n as f64
    }
}

/// The tractable functional with the configured utility.
pub fn tractable_phi(
    canon: &CanonicalRep,
    battery: &Battery,
    cfg: &TractableConfig,
) -> Result<ScoreReport, FunctionalError> {
    cfg.validate(battery.d_r())?;
    let psi = cfg.psi;
    tractable_phi_with(canon, battery, |_, u, tau| psi.psi(u, tau), cfg.lambda, cfg.gamma, &cfg.cost)
}

/// The tractable functional with an arbitrary per-task utility
/// `psi(task_position, u, tau)`.
pub fn tractable_phi_with(
    canon: &CanonicalRep,
    battery: &Battery,
    psi: impl Fn(usize, f64, f64) -> f64,
    lambda: f64,
    gamma: f64,
    cost: &CostModel,
) -> Result<ScoreReport, FunctionalError> {
    if !(lambda >= 0.0) {
        return Err(FunctionalError::Negative("lambda", lambda));
    }
    if !(gamma >= 0.0) {
        return Err(FunctionalError::Negative("gamma", gamma));
    }
    if canon.n_tasks() != battery.n_tasks() {
        return Err(FunctionalError::Mismatch(format!(
            "{} canonical tasks, {} battery tasks",
            canon.n_tasks(),
            battery.n_tasks()
        )));
    }
    let mut family_means = BTreeMap::new();
    let mut family_weights = BTreeMap::new();
    for (name, members) in battery.families() {
        let mut acc = 0.0;
        let mut k = 0usize;
        for &p in &members {
            let t = &canon.tasks[p];
            if t.u.is_empty() {
                continue;
            }
            let s: f64 = t.u.iter().map(|&u| psi(p, u, t.tau)).sum();
            acc += s / t.u.len() as f64;
            k += 1;
        }
        if k == 0 {
            return Err(FunctionalError::EmptyFamily(name.to_string()));
        }
        family_means.insert(name.to_string(), acc / k as f64);
        family_weights.insert(name.to_string(), battery.family_weight(name));
    }
    let means: Vec<f64> = family_means.values().copied().collect();
    let dispersion_penalty = lambda * population_variance(&means);
    let mc = mean_cost(canon, cost);
    let cost_penalty = gamma * mc;
    let mut report = ScoreReport {
        value: 0.0,
        family_means,
        family_weights,
        dispersion_penalty,
        mean_cost: mc,
        cost_penalty,
        axis_values: None,
        n_per_task: canon.tasks.iter().map(|t| t.n()).collect(),
        ci: None,
    };
    report.value = report.recompose();
    Ok(report)
}
