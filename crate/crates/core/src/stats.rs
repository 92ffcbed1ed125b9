//! Concentration and drift bounds, bootstrap intervals, region worst cases,
//! self-improvement rates and anchor concordance.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::{validate_battery, AgentRep, Battery, BatteryError, TaskSpec};
use crate::canonical::{canonicalize, CanonicalError, CanonicalRep, PitOptions};
use crate::certify::RegionSpec;
use crate::functionals::{tractable_phi, FunctionalError, TractableConfig};
use crate::moduli::ModuliPoint;
use crate::rng::RandomStream;
use crate::simulator::{generate_runs, oracle_phi_exact, SimError, SyntheticAgent};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("failure probability must be in (0,1), got {0}")]
    Delta(f64),
    #[error("{0} must be >= 1")]
    Count(&'static str),
    #[error("{0} must be positive, got {1}")]
    Positive(&'static str, f64),
    #[error("level must be in (0,1), got {0}")]
    Level(f64),
    #[error("need at least 2 resamples, got {0}")]
    Resamples(usize),
    #[error("representation has no runs")]
    EmptyRep,
    #[error("path needs at least 2 checkpoints")]
    ShortPath,
    #[error("checkpoint resources must be strictly increasing")]
    Unordered,
    #[error("rankings do not contain the same ids")]
    RankingMismatch,
    #[error("{0}")]
    Score(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Battery(#[from] BatteryError),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationParams {
    /// Runs per task.
    pub n: usize,
    pub n_tasks: usize,
    /// Lipschitz bound of the utility.
    pub lipschitz: f64,
    pub lambda: f64,
    pub delta: f64,
    pub c: f64,
    pub k: f64,
}

/// Default `(C, K)`: `C = (max_k w_k |T| / |F_k|)^2 / 2` and
/// `K = 2 sqrt(ln(4 K' / delta) / 2)` with `K'` the number of families.
pub fn default_constants(battery: &Battery, delta: f64) -> (f64, f64) {
    let t = battery.n_tasks() as f64;
    let fams = battery.families();
    let max_c = fams
        .iter()
        .map(|(k, m)| battery.family_weight(k) * t / m.len() as f64)
        .fold(0.0, f64::max);
    let kp = fams.len() as f64;
    (0.5 * max_c * max_c, 2.0 * ((4.0 * kp / delta).ln() / 2.0).sqrt())
}

impl ConcentrationParams {
    pub fn with_defaults(battery: &Battery, n: usize, lipschitz: f64, lambda: f64, delta: f64) -> Self {
        let (c, k) = default_constants(battery, delta);
        Self { n, n_tasks: battery.n_tasks(), lipschitz, lambda, delta, c, k }
    }
}

/// `L sqrt(C ln(2/delta) / (n |T|)) + lambda K / sqrt(n)`.
pub fn concentration_bound(p: &ConcentrationParams) -> Result<f64, StatsError> {
    if !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(StatsError::Delta(p.delta));
    }
    if p.n == 0 {
        return Err(StatsError::Count("n"));
    }
    if p.n_tasks == 0 {
        return Err(StatsError::Count("|T|"));
    }
    if !(p.c > 0.0) {
        return Err(StatsError::Positive("C", p.c));
    }
    if !(p.k > 0.0) {
        return Err(StatsError::Positive("K", p.k));
    }
    if !(p.lipschitz >= 0.0) {
        return Err(StatsError::Positive("L", p.lipschitz));
    }
    let n = p.n as f64;
    let first = p.lipschitz * (p.c * (2.0 / p.delta).ln() / (n * p.n_tasks as f64)).sqrt();
    Ok(first + p.lambda * p.k / n.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    pub bound: f64,
    pub oracle: f64,
    pub deviations: Vec<f64>,
}

/// Fraction of `replications` synthetic evaluations whose plug-in score lies
/// within the concentration bound of the exact score.
pub fn empirical_coverage(
    battery: &Battery,
    agent: &SyntheticAgent,
    cfg: &TractableConfig,
    params: &ConcentrationParams,
    replications: usize,
    stream: RandomStream,
) -> Result<CoverageReport, StatsError> {
    if replications == 0 {
        return Err(StatsError::Count("replications"));
    }
    let oracle = oracle_phi_exact(agent, battery, cfg)?;
    let bound = concentration_bound(params)?;
    let deviations = (0..replications)
        .into_par_iter()
        .map(|r| {
            let s = stream.derive("coverage", r as u64);
            let rep = generate_runs(agent, battery, params.n, s)?;
            let canon = canonicalize(battery, &rep, s, PitOptions::default())?;
            Ok((tractable_phi(&canon, battery, cfg)?.value - oracle).abs())
        })
        .collect::<Result<Vec<f64>, StatsError>>()?;
    let covered = deviations.iter().filter(|&&d| d <= bound).count();
    Ok(CoverageReport { coverage: covered as f64 / replications as f64, bound, oracle, deviations })
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One two-stage resample: tasks within families with replacement, then
/// runs within each drawn task with replacement. Drawn tasks are renamed
/// `id@slot` so duplicates stay distinct.
pub fn resample(battery: &Battery, rep: &AgentRep, stream: RandomStream) -> Result<(Battery, AgentRep), StatsError> {
    let mut rng = stream.purpose("bootstrap").rng(0, 0);
    let mut tasks = Vec::with_capacity(battery.n_tasks());
    let mut runs = Vec::with_capacity(battery.n_tasks());
    for (_, members) in battery.families() {
        for _ in 0..members.len() {
            let p = members[rng.random_range(0..members.len())];
            let spec = battery.task(p);
            let id = format!("{}@{}", spec.id, tasks.len());
            let src = rep.runs(p);
            if src.is_empty() {
                return Err(StatsError::EmptyRep);
            }
            let drawn = (0..src.len())
                .map(|_| {
                    let mut r = src[rng.random_range(0..src.len())].clone();
                    r.task_id = id.clone();
                    r
                })
                .collect::<Vec<_>>();
            tasks.push(TaskSpec { id, ..spec.clone() });
            runs.push(drawn);
        }
    }
    let mut file = battery.to_file();
    file.tasks = tasks;
    file.sampling_weights = None;
    let b = validate_battery(file)?;
    let ids = b.tasks().iter().map(|t| t.id.clone()).collect();
    Ok((b, AgentRep::with_runs(ids, runs)))
}

/// Percentile bootstrap interval at `level`. `score` receives each
/// resampled battery and representation with a stream of its own.
pub fn bootstrap_ci<F>(
    battery: &Battery,
    rep: &AgentRep,
    score: F,
    resamples: usize,
    level: f64,
    stream: RandomStream,
) -> Result<(f64, f64), StatsError>
where
    F: Fn(&Battery, &AgentRep, RandomStream) -> Result<f64, StatsError> + Sync,
{
    if resamples < 2 {
        return Err(StatsError::Resamples(resamples));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Level(level));
    }
    if rep.total_runs() == 0 {
        return Err(StatsError::EmptyRep);
    }
    let mut values = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let s = stream.derive("bootstrap", b as u64);
            let (bb, rr) = resample(battery, rep, s)?;
            score(&bb, &rr, s)
        })
        .collect::<Result<Vec<f64>, StatsError>>()?;
    values.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&values, a), quantile_sorted(&values, 1.0 - a)))
}

/// Canonicalize-then-score closure for the tractable functional.
pub fn tractable_scorer(
    cfg: &TractableConfig,
    opts: PitOptions,
) -> impl Fn(&Battery, &AgentRep, RandomStream) -> Result<f64, StatsError> + Sync + '_ {
    move |b, r, s| {
        let canon = canonicalize(b, r, s, opts)?;
        Ok(tractable_phi(&canon, b, cfg)?.value)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub l_phi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_w: f64,
    /// Copula shift in W1.
    pub eps: f64,
    /// Per-task threshold shift.
    pub dtau: f64,
    /// Resource bound.
    pub b: f64,
    pub dscale: f64,
}

/// `L_Phi (alpha eps + beta |T| dtau) + gamma_w B |dscale|`.
pub fn drift_stability_bound(p: &DriftParams, n_tasks: usize) -> f64 {
    p.l_phi * (p.alpha * p.eps + p.beta * n_tasks as f64 * p.dtau) + p.gamma_w * p.b * p.dscale.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub min: f64,
    pub index: u64,
    pub point: ModuliPoint,
}

/// Minimum of `f` over `probes` region samples from the "probe" stream;
/// sample 0 is the base point.
pub fn worst_case_over_region<F>(region: &RegionSpec, probes: usize, f: F) -> Result<WorstCase, StatsError>
where
    F: Fn(&ModuliPoint) -> f64 + Sync,
{
    if probes == 0 {
        return Err(StatsError::Count("probes"));
    }
    let (min, index) = (0..probes as u64)
        .into_par_iter()
        .map(|i| (f(&region.sample("probe", i)), i))
        .reduce(|| (f64::INFINITY, u64::MAX), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    Ok(WorstCase { min, index, point: region.sample("probe", index) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourcePath {
    pub checkpoints: Vec<(f64, CanonicalRep)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub abs: f64,
    /// `None` when the starting score is not positive.
    pub rel: Option<f64>,
}

/// Least-squares slope of `phi` against `r` over the first
/// `max(2, ceil(len / 5))` checkpoints.
pub fn kappa_from_values(r: &[f64], phi: &[f64]) -> Result<Kappa, StatsError> {
    if r.len() < 2 || r.len() != phi.len() {
        return Err(StatsError::ShortPath);
    }
    if r.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(StatsError::Unordered);
    }
    let m = 2usize.max((0.2 * r.len() as f64).ceil() as usize).min(r.len());
    let (r, y) = (&r[..m], &phi[..m]);
    let rm = r.iter().sum::<f64>() / m as f64;
    let ym = y.iter().sum::<f64>() / m as f64;
    let sxy: f64 = r.iter().zip(y).map(|(a, b)| (a - rm) * (b - ym)).sum();
    let sxx: f64 = r.iter().map(|a| (a - rm) * (a - rm)).sum();
    let abs = sxy / sxx;
    Ok(Kappa { abs, rel: (phi[0] > 0.0).then(|| abs / phi[0]) })
}

pub fn kappa(
    path: &ResourcePath,
    score: impl Fn(&CanonicalRep) -> Result<f64, StatsError>,
) -> Result<Kappa, StatsError> {
    let r: Vec<f64> = path.checkpoints.iter().map(|c| c.0).collect();
    let phi = path.checkpoints.iter().map(|c| score(&c.1)).collect::<Result<Vec<_>, _>>()?;
    kappa_from_values(&r, &phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub tau: f64,
    pub trigger: bool,
}

/// Kendall tau between two orderings of the same ids, counting discordant
/// pairs as inversions by merge sort.
pub fn anchor_concordance(a: &[String], b: &[String], threshold: f64) -> Result<Concordance, StatsError> {
    let pos: BTreeMap<&str, usize> = b.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if a.len() != b.len() || pos.len() != b.len() {
        return Err(StatsError::RankingMismatch);
    }
    let mut seq = a.iter().map(|s| pos.get(s.as_str()).copied().ok_or(StatsError::RankingMismatch)).collect::<Result<Vec<_>, _>>()?;
    let n = seq.len();
    let tau = if n < 2 {
        1.0
    } else {
        let d = inversions(&mut seq) as f64;
        1.0 - 2.0 * d / (n * (n - 1) / 2) as f64
    };
    Ok(Concordance { tau, trigger: tau < threshold })
}

fn inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut v[..mid]) + inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            count += (mid - i) as u64;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    count
}
