//! Cognitive cores: indicator laws, max-entropy lifts, core scores,
//! parametric continuations and envelopes.

mod expr;

pub use expr::{Expr, ExprError, Field, RunView};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::Battery;
use crate::canonical::{align, CanonTask, CanonicalRep};
use crate::functionals::{tractable_phi, FunctionalError, TractableConfig};
use crate::rng::RandomStream;

/// Largest centering residual treated as centered.
pub const CENTERING_TOL: f64 = 1e-9;
/// Smallest singular value accepted by calibration.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("no runs")]
    NoRuns,
    #[error("n_samples must be >= 1")]
    NoSamples,
    #[error("cell {cell} fails task {task} but its threshold is 0")]
    EmptyInterval { cell: String, task: usize },
    #[error("core has {core} tasks, reference has {reference}")]
    Mismatch { core: usize, reference: usize },
    #[error("invariant `{name}` is not centered: {detail}")]
    Uncentered { name: String, detail: String },
    #[error("design matrix is rank deficient: smallest singular value {sigma_min:.3e}, null combination {combination:?}")]
    RankDeficient { sigma_min: f64, combination: Vec<f64> },
    #[error("{0} references for {1} parameters")]
    TooFewReferences(usize, usize),
    #[error("theta has {0} entries for {1} invariants")]
    ThetaLength(usize, usize),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
}

/// Law of the joint success-indicator vector. Cells are bit strings in
/// task order; only observed cells are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreRep {
    pub tau: Vec<f64>,
    pub cells: BTreeMap<String, f64>,
}

impl CoreRep {
    pub fn total_variation(&self, other: &CoreRep) -> f64 {
        let mut keys: Vec<&String> = self.cells.keys().chain(other.cells.keys()).collect();
        keys.sort();
        keys.dedup();
        0.5 * keys
            .into_iter()
            .map(|k| (self.cells.get(k).unwrap_or(&0.0) - other.cells.get(k).unwrap_or(&0.0)).abs())
            .sum::<f64>()
    }
}

fn cell_key(tasks: &[CanonTask], i: usize) -> String {
    tasks.iter().map(|t| if t.q[i] { '1' } else { '0' }).collect()
}

pub fn project_core(canon: &CanonicalRep) -> Result<CoreRep, CoreError> {
    let canon = align(canon);
    let n = canon.tasks.first().map_or(0, CanonTask::n);
    if n == 0 {
        return Err(CoreError::NoRuns);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..n {
        *counts.entry(cell_key(&canon.tasks, i)).or_default() += 1;
    }
    Ok(CoreRep { tau: canon.taus(), cells: counts.into_iter().map(|(k, c)| (k, c as f64 / n as f64)).collect() })
}

/// Labels and resource information a lift inherits from a representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReference {
    pub ids: Vec<String>,
    pub families: Vec<String>,
    pub ray: Vec<f64>,
    pub mean_resources: Vec<f64>,
}

impl LiftReference {
    pub fn of(canon: &CanonicalRep) -> Self {
        Self {
            ids: canon.tasks.iter().map(|t| t.id.clone()).collect(),
            families: canon.tasks.iter().map(|t| t.family.clone()).collect(),
            ray: canon.ray.clone(),
            mean_resources: canon.mean_resources.clone(),
        }
    }
}

/// Sample a cell by its probability, then draw each task's `u` uniformly
/// on `[tau, 1]` (success bit) or `[0, tau)` (failure bit), independently.
pub fn max_entropy_lift(
    core: &CoreRep,
    reference: &LiftReference,
    n_samples: usize,
    stream: RandomStream,
) -> Result<CanonicalRep, CoreError> {
    if n_samples == 0 {
        return Err(CoreError::NoSamples);
    }
    let t = core.tau.len();
    if reference.ids.len() != t {
        return Err(CoreError::Mismatch { core: t, reference: reference.ids.len() });
    }
    let cells: Vec<(Vec<bool>, f64)> =
        core.cells.iter().map(|(k, &p)| (k.chars().map(|c| c == '1').collect(), p)).collect();
    for (key, (bits, _)) in core.cells.keys().zip(&cells) {
        if let Some(task) = (0..t).find(|&j| !bits[j] && core.tau[j] <= 0.0) {
            return Err(CoreError::EmptyInterval { cell: key.clone(), task });
        }
    }
    let total: f64 = cells.iter().map(|c| c.1).sum();
    let key = stream.purpose("lift");
    let mut u = vec![Vec::with_capacity(n_samples); t];
    for i in 0..n_samples {
        let mut rng = key.rng(i as u64, 0);
        let x = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = &cells[cells.len() - 1].0;
        for (bits, p) in &cells {
            acc += p;
            if x < acc {
                chosen = bits;
                break;
            }
        }
        for j in 0..t {
            let v = rng.random::<f64>();
            let tau = core.tau[j];
            u[j].push(if chosen[j] { tau + v * (1.0 - tau) } else { v * tau });
        }
    }
    let tasks = u
        .into_iter()
        .enumerate()
        .map(|(j, uj)| {
            let mut task = CanonTask {
                id: reference.ids[j].clone(),
                family: reference.families[j].clone(),
                tau: core.tau[j],
                u: Vec::new(),
                q: Vec::new(),
                resources: Vec::new(),
            };
            task.set_u(uj);
            task
        })
        .collect();
    Ok(CanonicalRep {
        tasks,
        ray: reference.ray.clone(),
        mean_resources: reference.mean_resources.clone(),
        master_seed: stream.master_seed,
        lifted: true,
        padded: false,
    })
}

/// The configured functional evaluated on max-entropy lifts.
#[derive(Debug, Clone)]
pub struct CoreScorer<'a> {
    pub battery: &'a Battery,
    pub cfg: TractableConfig,
    pub n_samples: usize,
    pub stream: RandomStream,
}

impl<'a> CoreScorer<'a> {
    pub fn new(battery: &'a Battery, cfg: TractableConfig, n_samples: usize, stream: RandomStream) -> Self {
        Self { battery, cfg, n_samples, stream }
    }

    pub fn lift(&self, core: &CoreRep, reference: &LiftReference) -> Result<CanonicalRep, CoreError> {
        max_entropy_lift(core, reference, self.n_samples, self.stream)
    }

    pub fn aai_core(&self, core: &CoreRep, reference: &LiftReference) -> Result<f64, CoreError> {
        let lifted = self.lift(core, reference)?;
        Ok(tractable_phi(&lifted, self.battery, &self.cfg)?.value)
    }

    /// Core score of a representation, lifting with its own labels and ray.
    pub fn core_of(&self, canon: &CanonicalRep) -> Result<f64, CoreError> {
        self.aai_core(&project_core(canon)?, &LiftReference::of(canon))
    }
}

/// Joint-run views of an aligned representation.
fn for_each_run(canon: &CanonicalRep, mut f: impl FnMut(usize, &RunView<'_>, &str) -> Result<(), CoreError>) -> Result<(), CoreError> {
    let canon = align(canon);
    let n = canon.tasks.first().map_or(0, CanonTask::n);
    if n == 0 {
        return Err(CoreError::NoRuns);
    }
    let taus = canon.taus();
    let d = canon.mean_resources.len();
    let mut u = vec![0.0; canon.n_tasks()];
    let mut q = vec![false; canon.n_tasks()];
    let mut r = vec![0.0; d];
    for i in 0..n {
        for (k, t) in canon.tasks.iter().enumerate() {
            u[k] = t.u[i];
            q[k] = t.q[i];
        }
        let with_runs: Vec<&Vec<f64>> = canon.tasks.iter().filter_map(|t| t.resources.get(i)).collect();
        if with_runs.is_empty() {
            r.copy_from_slice(&canon.mean_resources);
        } else {
            for (j, rj) in r.iter_mut().enumerate() {
                *rj = with_runs.iter().map(|v| v[j]).sum::<f64>() / with_runs.len() as f64;
            }
        }
        let key = cell_key(&canon.tasks, i);
        f(i, &RunView { u: &u, q: &q, tau: &taus, r: &r }, &key)?;
    }
    Ok(())
}

/// A run statistic with its per-cell mean removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonCoreInvariant {
    pub name: String,
    pub expression: String,
    pub table: BTreeMap<String, f64>,
    pub residual: f64,
    #[serde(skip)]
    expr: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSpec {
    pub name: String,
    pub expression: String,
}

impl NonCoreInvariant {
    /// Center `expression` on `sample` (normally a max-entropy lift):
    /// the table stores the per-cell means and the residual records the
    /// largest per-cell mean left after subtraction.
    pub fn center(name: &str, expression: &str, sample: &CanonicalRep) -> Result<Self, CoreError> {
        let expr = Expr::parse(expression)?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut raw: Vec<(String, f64)> = Vec::new();
        for_each_run(sample, |_, run, key| {
            let z = expr.eval(run)?;
            let e = sums.entry(key.to_string()).or_default();
            e.0 += z;
            e.1 += 1;
            raw.push((key.to_string(), z));
            Ok(())
        })?;
        let table: BTreeMap<String, f64> = sums.iter().map(|(k, (s, n))| (k.clone(), s / *n as f64)).collect();
        let mut resid: BTreeMap<&str, f64> = BTreeMap::new();
        for (k, z) in &raw {
            *resid.entry(k.as_str()).or_default() += z - table[k];
        }
        let residual = resid.iter().map(|(k, s)| (s / sums[*k].1 as f64).abs()).fold(0.0, f64::max);
        Ok(Self { name: name.to_string(), expression: expression.to_string(), table, residual, expr: Some(expr) })
    }

    fn parsed(&self) -> Result<Expr, CoreError> {
        match &self.expr {
            Some(e) => Ok(e.clone()),
            None => Ok(Expr::parse(&self.expression)?),
        }
    }

    pub fn check_centered(&self) -> Result<(), CoreError> {
        if self.residual > CENTERING_TOL || !self.residual.is_finite() {
            return Err(CoreError::Uncentered {
                name: self.name.clone(),
                detail: format!("centering residual {:.3e}", self.residual),
            });
        }
        Ok(())
    }

    /// Mean of the centered statistic over the runs of `canon`.
    pub fn mean_on(&self, canon: &CanonicalRep) -> Result<f64, CoreError> {
        self.check_centered()?;
        let expr = self.parsed()?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for_each_run(canon, |_, run, key| {
            let m = self.table.get(key).ok_or_else(|| CoreError::Uncentered {
                name: self.name.clone(),
                detail: format!("cell {key} has no centering entry"),
            })?;
            sum += expr.eval(run)? - m;
            n += 1;
            Ok(())
        })?;
        Ok(sum / n as f64)
    }

    /// Per-run centered values (for Monte-Carlo error bands).
    pub fn values_on(&self, canon: &CanonicalRep) -> Result<Vec<f64>, CoreError> {
        self.check_centered()?;
        let expr = self.parsed()?;
        let mut out = Vec::new();
        for_each_run(canon, |_, run, key| {
            let m = self.table.get(key).ok_or_else(|| CoreError::Uncentered {
                name: self.name.clone(),
                detail: format!("cell {key} has no centering entry"),
            })?;
            out.push(expr.eval(run)? - m);
            Ok(())
        })?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaContinuation {
    pub theta: Vec<f64>,
    pub invariants: Vec<NonCoreInvariant>,
}

/// `aai_core(project_core(canon)) + sum_j theta_j mean Z_j`.
pub fn continuation_value(
    canon: &CanonicalRep,
    cont: &ThetaContinuation,
    scorer: &CoreScorer<'_>,
) -> Result<f64, CoreError> {
    if cont.theta.len() != cont.invariants.len() {
        return Err(CoreError::ThetaLength(cont.theta.len(), cont.invariants.len()));
    }
    let mut v = scorer.core_of(canon)?;
    for (th, z) in cont.theta.iter().zip(&cont.invariants) {
        v += th * z.mean_on(canon)?;
    }
    Ok(v)
}

/// Least-squares `theta` for the design `X theta = gaps`, refusing designs
/// whose smallest singular value is at most `RANK_TOL`.
pub fn solve_theta(design: &[Vec<f64>], gaps: &[f64]) -> Result<Vec<f64>, CoreError> {
    let rows = design.len();
    let cols = design.first().map_or(0, Vec::len);
    if rows < cols {
        return Err(CoreError::TooFewReferences(rows, cols));
    }
    let x = DMatrix::from_fn(rows, cols, |i, j| design[i][j]);
    let svd = x.svd(true, true);
    let (k, &sigma_min) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty design");
    if !(sigma_min > RANK_TOL) {
        let vt = svd.v_t.as_ref().expect("requested V^T");
        let combination = vt.row(k).iter().copied().collect();
        return Err(CoreError::RankDeficient { sigma_min, combination });
    }
    let b = DVector::from_column_slice(gaps);
    let theta = svd.solve(&b, 0.0).expect("U and V^T computed");
    Ok(theta.iter().copied().collect())
}

/// Fit `theta` so that continuation values match the reference targets.
pub fn calibrate_theta(
    references: &[(CanonicalRep, f64)],
    invariants: &[NonCoreInvariant],
    scorer: &CoreScorer<'_>,
) -> Result<Vec<f64>, CoreError> {
    let mut design = Vec::with_capacity(references.len());
    let mut gaps = Vec::with_capacity(references.len());
    for (canon, target) in references {
        let row = invariants.iter().map(|z| z.mean_on(canon)).collect::<Result<Vec<_>, _>>()?;
        design.push(row);
        gaps.push(target - scorer.core_of(canon)?);
    }
    solve_theta(&design, &gaps)
}

/// `(inf, sup)` of `aai_core + mean F` over a finite class of centered
/// invariants.
pub fn envelopes(
    canon: &CanonicalRep,
    class: &[NonCoreInvariant],
    scorer: &CoreScorer<'_>,
) -> Result<(f64, f64), CoreError> {
    let base = scorer.core_of(canon)?;
    if class.is_empty() {
        return Ok((base, base));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for z in class {
        let m = z.mean_on(canon)?;
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok((base + lo, base + hi))
}
