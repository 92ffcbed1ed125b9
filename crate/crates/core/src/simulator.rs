//! Synthetic agents with Gaussian-copula dependence, and exact scores for
//! agents whose laws are known.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};
use thiserror::Error;

use crate::battery::{AgentRep, Battery, RunRecord};
use crate::functionals::{population_variance, FunctionalError, TractableConfig};
use crate::rng::RandomStream;

/// Largest joint discrete support the exact oracle accepts.
pub const MAX_SUPPORT: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("agent has {agent} score laws, battery has {battery} tasks")]
    Dims { agent: usize, battery: usize },
    #[error("invalid law on task {task}: {msg}")]
    Law { task: usize, msg: String },
    #[error("correlation matrix {0}")]
    Correlation(String),
    #[error("resource law has {agent} coordinates, battery has {battery}")]
    Resources { agent: usize, battery: usize },
    #[error("oracle unavailable: {0}")]
    Oracle(String),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreLaw {
    Beta { a: f64, b: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

impl ScoreLaw {
    fn validate(&self, task: usize) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Law { task, msg });
        match self {
            ScoreLaw::Beta { a, b } => {
                if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) {
                    return bad(format!("beta parameters must be > 0, got ({a}, {b})"));
                }
            }
            ScoreLaw::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return bad("values and probs must be nonempty and of equal length".into());
                }
                if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("probs must be >= 0 and sum to 1".into());
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("non-finite value".into());
                }
            }
        }
        Ok(())
    }

    /// Quantile at `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            ScoreLaw::Beta { a, b } => {
                if *a == 1.0 && *b == 1.0 {
                    return u;
                }
                Beta::new(*a, *b).expect("validated").inverse_cdf(u)
            }
            ScoreLaw::Discrete { values, probs } => {
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                values[values.len() - 1]
            }
        }
    }

    /// `P(S < x) + P(S = x) / 2`.
    pub fn midpoint_cdf(&self, x: f64) -> f64 {
        match self {
            ScoreLaw::Beta { a, b } => Beta::new(*a, *b).expect("validated").cdf(x),
            ScoreLaw::Discrete { values, probs } => values
                .iter()
                .zip(probs)
                .map(|(&v, &p)| {
                    if v < x {
                        p
                    } else if v == x {
                        0.5 * p
                    } else {
                        0.0
                    }
                })
                .sum(),
        }
    }

    fn support(&self) -> f64 {
        match self {
            ScoreLaw::Beta { .. } => f64::INFINITY,
            ScoreLaw::Discrete { values, .. } => values.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResourceLaw {
    Constant { value: Vec<f64> },
    LogNormal { mu: Vec<f64>, sigma: Vec<f64> },
}

impl ResourceLaw {
    fn dim(&self) -> usize {
        match self {
            ResourceLaw::Constant { value } => value.len(),
            ResourceLaw::LogNormal { mu, .. } => mu.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricLaw {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Bernoulli { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgent {
    /// One law per battery task, or a single law for all tasks.
    pub laws: Vec<ScoreLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Vec<Vec<f64>>>,
    pub resources: ResourceLaw,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, MetricLaw>,
    /// Score shift per unit of cumulative resource along an improvement path.
    #[serde(default)]
    pub improvement_rate: f64,
    /// Added to every score.
    #[serde(default)]
    pub score_offset: f64,
    /// Drift labels assigned to runs round-robin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drift: Vec<String>,
}

impl SyntheticAgent {
    pub fn independent(laws: Vec<ScoreLaw>, resources: Vec<f64>) -> Self {
        Self {
            laws,
            correlation: None,
            resources: ResourceLaw::Constant { value: resources },
            metrics: BTreeMap::new(),
            improvement_rate: 0.0,
            score_offset: 0.0,
            drift: Vec::new(),
        }
    }

    pub fn law(&self, t: usize) -> &ScoreLaw {
        if self.laws.len() == 1 {
            &self.laws[0]
        } else {
            &self.laws[t]
        }
    }

    /// The agent after `r` units of cumulative resource.
    pub fn advanced(&self, r: f64) -> Self {
        let mut a = self.clone();
        a.score_offset += self.improvement_rate * r;
        a
    }

    pub fn validate(&self, battery: &Battery) -> Result<(), SimError> {
        let t = battery.n_tasks();
        if self.laws.len() != 1 && self.laws.len() != t {
            return Err(SimError::Dims { agent: self.laws.len(), battery: t });
        }
        for (i, l) in self.laws.iter().enumerate() {
            l.validate(i)?;
        }
        if self.resources.dim() != battery.d_r() {
            return Err(SimError::Resources { agent: self.resources.dim(), battery: battery.d_r() });
        }
        match &self.resources {
            ResourceLaw::Constant { value } if value.iter().any(|&v| !(v >= 0.0)) => {
                return Err(SimError::Oracle("negative constant resource".into()))
            }
            ResourceLaw::LogNormal { mu, sigma } if mu.len() != sigma.len() || sigma.iter().any(|&s| !(s >= 0.0)) => {
                return Err(SimError::Resources { agent: sigma.len(), battery: mu.len() })
            }
            _ => {}
        }
        if let Some(c) = &self.correlation {
            copula_factor(c, t)?;
        }
        Ok(())
    }
}

/// `A` with `A A^T = C`, from the eigen-decomposition of `C`.
fn copula_factor(c: &[Vec<f64>], t: usize) -> Result<DMatrix<f64>, SimError> {
    if c.len() != t || c.iter().any(|row| row.len() != t) {
        return Err(SimError::Correlation(format!("must be {t}x{t}")));
    }
    for i in 0..t {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(SimError::Correlation(format!("has diagonal entry {} at {i}", c[i][i])));
        }
        for j in 0..i {
            if (c[i][j] - c[j][i]).abs() > 1e-12 {
                return Err(SimError::Correlation("is not symmetric".into()));
            }
        }
    }
    let m = DMatrix::from_fn(t, t, |i, j| c[i][j]);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(SimError::Correlation(format!("is not positive semidefinite (eigenvalue {min:.3e})")));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// `n` runs per task. Run `i` of every task shares one Gaussian-copula draw.
pub fn generate_runs(
    agent: &SyntheticAgent,
    battery: &Battery,
    n: usize,
    stream: RandomStream,
) -> Result<AgentRep, SimError> {
    agent.validate(battery)?;
    let t = battery.n_tasks();
    let factor = agent.correlation.as_ref().map(|c| copula_factor(c, t)).transpose()?;
    let normal = Normal::standard();
    let scores_key = stream.purpose("sim-scores");
    let res_key = stream.purpose("sim-resources");
    let met_key = stream.purpose("sim-metrics");

    let per_run: Vec<Vec<RunRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = scores_key.rng(i as u64, 0);
            let u: Vec<f64> = match &factor {
                None => (0..t).map(|_| rng.random::<f64>()).collect(),
                Some(a) => {
                    let z = nalgebra::DVector::from_fn(t, |_, _| StandardNormal.sample(&mut rng));
                    let x = a * z;
                    x.iter().map(|&v| normal.cdf(v).min(1.0 - f64::EPSILON / 2.0)).collect()
                }
            };
            let drift = if agent.drift.is_empty() { String::new() } else { agent.drift[i % agent.drift.len()].clone() };
            (0..t)
                .map(|p| {
                    let score = agent.law(p).quantile(u[p]) + agent.score_offset;
                    let mut rr = res_key.rng(i as u64, p as u64);
                    let resources = match &agent.resources {
                        ResourceLaw::Constant { value } => value.clone(),
                        ResourceLaw::LogNormal { mu, sigma } => mu
                            .iter()
                            .zip(sigma)
                            .map(|(m, s)| {
                                let z: f64 = StandardNormal.sample(&mut rr);
                                (m + s * z).exp()
                            })
                            .collect(),
                    };
                    let mut rm = met_key.rng(i as u64, p as u64);
                    let metrics = agent
                        .metrics
                        .iter()
                        .map(|(k, law)| {
                            let v = match *law {
                                MetricLaw::Constant { value } => value,
                                MetricLaw::Uniform { lo, hi } => lo + (hi - lo) * rm.random::<f64>(),
                                MetricLaw::Bernoulli { p } => f64::from(u8::from(rm.random::<f64>() < p)),
                            };
                            (k.clone(), v)
                        })
                        .collect();
                    RunRecord {
                        format_version: None,
                        task_id: battery.task(p).id.clone(),
                        seed: i as i64,
                        drift: drift.clone(),
                        score,
                        resources,
                        metrics,
                    }
                })
                .collect()
        })
        .collect();

    let mut runs = vec![Vec::with_capacity(n); t];
    for run in per_run {
        for (p, rec) in run.into_iter().enumerate() {
            runs[p].push(rec);
        }
    }
    Ok(AgentRep::with_runs(battery.tasks().iter().map(|s| s.id.clone()).collect(), runs))
}

/// Exact population value of the tractable functional. The PIT of the
/// true law is exactly uniform, so each task contributes
/// `int_0^1 psi(u, tau) du` with `tau` the midpoint CDF at `Q*`.
pub fn oracle_phi_exact(agent: &SyntheticAgent, battery: &Battery, cfg: &TractableConfig) -> Result<f64, SimError> {
    agent.validate(battery)?;
    cfg.validate(battery.d_r())?;
    let support: f64 = (0..battery.n_tasks()).map(|t| agent.law(t).support()).product();
    if support.is_infinite() && agent.laws.iter().any(|l| matches!(l, ScoreLaw::Discrete { .. })) {
        return Err(SimError::Oracle("mixed continuous and discrete laws".into()));
    }
    if support.is_finite() && support > MAX_SUPPORT {
        return Err(SimError::Oracle(format!("joint support {support} exceeds {MAX_SUPPORT}")));
    }
    let mean_cost = match &agent.resources {
        ResourceLaw::Constant { value } => cfg.cost.cost(value),
        ResourceLaw::LogNormal { sigma, .. } if sigma.iter().all(|&s| s == 0.0) => {
            let ResourceLaw::LogNormal { mu, .. } = &agent.resources else { unreachable!() };
            cfg.cost.cost(&mu.iter().map(|m| m.exp()).collect::<Vec<_>>())
        }
        ResourceLaw::LogNormal { .. } => {
            return Err(SimError::Oracle("expected capped cost of lognormal resources has no closed form".into()))
        }
    };
    let mut means = Vec::new();
    let mut value = 0.0;
    for (name, members) in battery.families() {
        let m = members
            .iter()
            .map(|&p| {
                let tau = agent.law(p).midpoint_cdf(battery.task(p).q_star - agent.score_offset);
                cfg.psi.antiderivative(1.0, tau) - cfg.psi.antiderivative(0.0, tau)
            })
            .sum::<f64>()
            / members.len() as f64;
        value += battery.family_weight(name) * m;
        means.push(m);
    }
    Ok(value - cfg.lambda * population_variance(&means) - cfg.gamma * mean_cost)
}
