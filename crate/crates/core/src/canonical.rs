//! Randomized PIT, threshold alignment, resource rays and dyadic coarsening.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::{AgentRep, Battery};
use crate::rng::RandomStream;

#[derive(Debug, Error, PartialEq)]
pub enum CanonicalError {
    #[error("empty sample")]
    EmptySample,
    #[error("xi = {0} is outside [0,1]")]
    XiOutOfRange(f64),
    #[error("task `{0}` has no runs")]
    NoRuns(String),
    #[error("mean resource vector is zero, ray undefined")]
    ZeroResources,
    #[error("representation does not match battery: {0}")]
    Mismatch(String),
}

/// Step CDF of a finite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self, CanonicalError> {
        if samples.is_empty() {
            return Err(CanonicalError::EmptySample);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `(F(x-), F(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let n = self.sorted.len() as f64;
        let below = self.sorted.partition_point(|&v| v < x);
        let upto = self.sorted.partition_point(|&v| v <= x);
        (below as f64 / n, upto as f64 / n)
    }

    /// Threshold alignment with the midpoint convention at atoms.
    pub fn aligned_threshold(&self, q_star: f64) -> f64 {
        let (lo, hi) = self.eval(q_star);
        if lo == hi {
            hi
        } else {
            lo + 0.5 * (hi - lo)
        }
    }
}

pub fn empirical_cdf(samples: &[f64]) -> Result<EmpiricalCdf, CanonicalError> {
    EmpiricalCdf::new(samples)
}

/// `u = F(s-) + xi (F(s) - F(s-))`.
pub fn randomized_pit(cdf: &EmpiricalCdf, s: f64, xi: f64) -> Result<f64, CanonicalError> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(CanonicalError::XiOutOfRange(xi));
    }
    let (lo, hi) = cdf.eval(s);
    if lo == hi {
        return Ok(hi);
    }
    Ok(lo + xi * (hi - lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonTask {
    pub id: String,
    pub family: String,
    pub tau: f64,
    pub u: Vec<f64>,
    pub q: Vec<bool>,
    /// Per-run absolute resources; empty for lifted representations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resources: Vec<Vec<f64>>,
}

impl CanonTask {
    pub fn n(&self) -> usize {
        self.u.len()
    }

    /// Replace the PIT sample and recompute the indicators.
    pub fn set_u(&mut self, u: Vec<f64>) {
        self.q = u.iter().map(|&x| x >= self.tau).collect();
        self.u = u;
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
        self.q = self.u.iter().map(|&x| x >= tau).collect();
    }

    pub fn success_rate(&self) -> f64 {
        self.q.iter().filter(|&&b| b).count() as f64 / self.q.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalRep {
    pub tasks: Vec<CanonTask>,
    pub ray: Vec<f64>,
    pub mean_resources: Vec<f64>,
    pub master_seed: u64,
    /// Set when the sample came from a lift and carries no resource data.
    #[serde(default)]
    pub lifted: bool,
    /// Set when tasks were padded to a common run count.
    #[serde(default)]
    pub padded: bool,
}

impl CanonicalRep {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.tau).collect()
    }

    pub fn is_aligned(&self) -> bool {
        self.tasks.windows(2).all(|w| w[0].n() == w[1].n())
    }

    /// Check `q = 1{u >= tau}`, `u` in `[0,1]` and a unit ray.
    pub fn check(&self) -> bool {
        let ray_ok = (self.ray.iter().sum::<f64>() - 1.0).abs() < 1e-12 && self.ray.iter().all(|&r| r >= 0.0);
        ray_ok
            && self.tasks.iter().all(|t| {
                t.u.len() == t.q.len()
                    && t.u.iter().zip(&t.q).all(|(&u, &q)| (0.0..=1.0).contains(&u) && q == (u >= t.tau))
            })
    }

    /// Mean per-run resource vector across the whole representation.
    pub fn run_resources(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.tasks.iter().flat_map(|t| t.resources.iter())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("canonical rep serializes")
    }
}

/// Options for [`canonicalize`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PitOptions {
    /// Build the CDF for `u` within each drift label instead of pooling.
    pub per_drift: bool,
}

pub fn ray_of(r: &[f64]) -> Result<Vec<f64>, CanonicalError> {
    let s: f64 = r.iter().sum();
    if !(s > 0.0) {
        return Err(CanonicalError::ZeroResources);
    }
    Ok(r.iter().map(|x| x / s).collect())
}

/// Canonical representation of an agent on a battery.
///
/// The PIT randomization for run `i` of the task at battery position `p` is
/// drawn from key `("pit", p, i)`, so the output does not depend on task
/// labels or on evaluation order.
pub fn canonicalize(
    battery: &Battery,
    rep: &AgentRep,
    stream: RandomStream,
    opts: PitOptions,
) -> Result<CanonicalRep, CanonicalError> {
    if rep.task_ids().len() != battery.n_tasks() {
        return Err(CanonicalError::Mismatch(format!(
            "{} tasks in runs, {} in battery",
            rep.task_ids().len(),
            battery.n_tasks()
        )));
    }
    let xi = stream.purpose("pit");
    let d = battery.d_r();
    let mut sum_r = vec![0.0; d];
    let mut total = 0usize;
    let mut tasks = Vec::with_capacity(battery.n_tasks());
    for (p, spec) in battery.tasks().iter().enumerate() {
        let runs = rep.runs(p);
        if runs.is_empty() {
            return Err(CanonicalError::NoRuns(spec.id.clone()));
        }
        let scores: Vec<f64> = runs.iter().map(|r| r.score).collect();
        let pooled = EmpiricalCdf::new(&scores)?;
        let tau = pooled.aligned_threshold(spec.q_star);

        let strata: Option<HashMap<&str, EmpiricalCdf>> = if opts.per_drift {
            let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for r in runs {
                groups.entry(r.drift.as_str()).or_default().push(r.score);
            }
            Some(groups.into_iter().map(|(k, v)| (k, EmpiricalCdf::new(&v).unwrap())).collect())
        } else {
            None
        };

        let mut u = Vec::with_capacity(runs.len());
        for (i, r) in runs.iter().enumerate() {
            let cdf = match &strata {
                Some(m) => &m[r.drift.as_str()],
                None => &pooled,
            };
            u.push(randomized_pit(cdf, r.score, xi.uniform(p as u64, i as u64))?);
        }
        let mut resources = Vec::with_capacity(runs.len());
        for r in runs {
            for (acc, x) in sum_r.iter_mut().zip(&r.resources) {
                *acc += x;
            }
            resources.push(r.resources.clone());
        }
        total += runs.len();
        let q = u.iter().map(|&x| x >= tau).collect();
        tasks.push(CanonTask { id: spec.id.clone(), family: spec.family.clone(), tau, u, q, resources });
    }
    let mean_resources: Vec<f64> = sum_r.iter().map(|s| s / total as f64).collect();
    let ray = ray_of(&mean_resources)?;
    Ok(CanonicalRep { tasks, ray, mean_resources, master_seed: stream.master_seed, lifted: false, padded: false })
}

/// Pad every task to the largest run count by resampling its own runs with
/// the keyed stream. Returns the input unchanged when already aligned.
pub fn align(canon: &CanonicalRep) -> CanonicalRep {
    if canon.is_aligned() {
        return canon.clone();
    }
    let n = canon.tasks.iter().map(CanonTask::n).max().unwrap_or(0);
    let key = RandomStream::new(canon.master_seed).purpose("align");
    let mut out = canon.clone();
    for (p, t) in out.tasks.iter_mut().enumerate() {
        let m = t.n();
        if m == 0 || m == n {
            continue;
        }
        for j in m..n {
            let k = ((key.uniform(p as u64, j as u64) * m as f64) as usize).min(m - 1);
            t.u.push(t.u[k]);
            t.q.push(t.q[k]);
            if !t.resources.is_empty() {
                let r = t.resources[k].clone();
                t.resources.push(r);
            }
        }
    }
    out.padded = true;
    out
}

/// Replace each joint sample by the mean of its dyadic cell at scale `2^-level`.
pub fn dyadic_coarsen(canon: &CanonicalRep, level: u32) -> CanonicalRep {
    let level = level.min(52);
    let mut out = align(canon);
    let n = out.tasks.first().map_or(0, CanonTask::n);
    if n == 0 {
        return out;
    }
    let side = (1u64 << level) as f64;
    let cell_of = |u: f64| ((u * side) as u64).min((1u64 << level) - 1);
    let mut cells: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let key: Vec<u64> = out.tasks.iter().map(|t| cell_of(t.u[i])).collect();
        cells.entry(key).or_default().push(i);
    }
    let mut new_u: Vec<Vec<f64>> = out.tasks.iter().map(|t| t.u.clone()).collect();
    for members in cells.values() {
        for (k, t) in out.tasks.iter().enumerate() {
            let mean = members.iter().map(|&i| t.u[i]).sum::<f64>() / members.len() as f64;
            for &i in members {
                new_u[k][i] = mean.clamp(0.0, 1.0);
            }
        }
    }
    for (t, u) in out.tasks.iter_mut().zip(new_u) {
        t.set_u(u);
    }
    out
}
