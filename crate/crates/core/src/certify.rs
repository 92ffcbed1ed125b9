//! Covering nets over a moduli region and Lipschitz certification.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battery::Battery;
use crate::functionals::{population_variance, FunctionalError, TractableConfig, UtilityFamily};
use crate::moduli::{d_ray, ground, snap_to_grid, w1, DiscreteMeasure, MetricWeights, ModuliError, ModuliPoint};
use crate::rng::RandomStream;

#[derive(Debug, Error, PartialEq)]
pub enum CertifyError {
    #[error("radii must be >= 0")]
    NegativeRadius,
    #[error("delta must be > 0, got {0}")]
    BadDelta(f64),
    #[error("panel has {0} unscored points")]
    Unscored(usize),
    #[error("panels differ: {0} vs {1} points")]
    PanelMismatch(usize, usize),
    #[error("empty panel")]
    EmptyPanel,
    #[error(transparent)]
    Moduli(#[from] ModuliError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
}

/// Product region: copula W1 ball of radius `rho`, threshold box of
/// half-width `dtau`, ray ball of radius `dray`, around `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub base: ModuliPoint,
    pub rho: f64,
    pub dtau: f64,
    pub dray: f64,
    pub seed: u64,
}

impl RegionSpec {
    pub fn validate(&self) -> Result<(), CertifyError> {
        if !(self.rho >= 0.0 && self.dtau >= 0.0 && self.dray >= 0.0) {
            return Err(CertifyError::NegativeRadius);
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        self.rho == 0.0 && self.dtau == 0.0 && self.dray == 0.0
    }

    /// Region point number `index` drawn from stream `purpose`. Index 0 of
    /// every stream is the base point.
    pub fn sample(&self, purpose: &str, index: u64) -> ModuliPoint {
        if index == 0 {
            return self.base.clone();
        }
        let mut rng = RandomStream::new(self.seed).purpose(purpose).rng(index, 0);
        let base = &self.base;

        let tau: Vec<f64> =
            base.tau.iter().map(|&t| (t + self.dtau * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0)).collect();

        let copula = if self.rho > 0.0 {
            // Identity coupling toward uniformly redrawn atoms, stopped at a
            // random radius; its cost bounds the W1 displacement.
            let targets: Vec<Vec<f64>> =
                base.copula.atoms().iter().map(|a| a.iter().map(|_| rng.random::<f64>()).collect()).collect();
            let coupling: f64 = base
                .copula
                .atoms()
                .iter()
                .zip(&targets)
                .zip(base.copula.weights())
                .map(|((x, y), w)| w * ground(x, y))
                .sum();
            let r = self.rho * rng.random::<f64>();
            let t = if coupling > 0.0 { (r / coupling).min(1.0) } else { 0.0 };
            let atoms = base
                .copula
                .atoms()
                .iter()
                .zip(&targets)
                .map(|(x, y)| x.iter().zip(y).map(|(a, b)| ((1.0 - t) * a + t * b).clamp(0.0, 1.0)).collect())
                .collect();
            DiscreteMeasure::new(base.copula.dim(), atoms, base.copula.weights().to_vec())
                .expect("interpolated atoms stay in the cube")
        } else {
            base.copula.clone()
        };

        let ray = if self.dray > 0.0 {
            let e: Vec<f64> = base.ray.iter().map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = e.iter().sum();
            let target: Vec<f64> = e.iter().map(|x| x / s).collect();
            let span: f64 = target.iter().zip(&base.ray).map(|(a, b)| (a - b).abs()).sum();
            let r = self.dray * rng.random::<f64>();
            let k = if span > 0.0 { (r / span).min(1.0) } else { 0.0 };
            let mut ray: Vec<f64> = base.ray.iter().zip(&target).map(|(b, t)| (1.0 - k) * b + k * t).collect();
            let s: f64 = ray.iter().sum();
            ray.iter_mut().for_each(|x| *x /= s);
            ray
        } else {
            base.ray.clone()
        };

        ModuliPoint { skeleton: base.skeleton.clone(), tau, copula, ray }
    }

    /// Membership test used by validation code.
    pub fn contains(&self, p: &ModuliPoint, slack: f64) -> Result<bool, ModuliError> {
        let tau_ok = p.tau.iter().zip(&self.base.tau).all(|(a, b)| (a - b).abs() <= self.dtau + slack);
        let ray_ok = d_ray(&p.ray, &self.base.ray)? <= self.dray + slack;
        if !(tau_ok && ray_ok) {
            return Ok(false);
        }
        let (w, _) = crate::moduli::w1(&p.copula, &self.base.copula)?;
        Ok(w <= self.rho + slack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetOptions {
    pub budget: usize,
    /// Consecutive covered candidates before stopping.
    pub patience: usize,
    pub validation: usize,
}

impl Default for NetOptions {
    fn default() -> Self {
        Self { budget: 500, patience: 1000, validation: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub points: Vec<ModuliPoint>,
    pub delta: f64,
    pub covering_radius: f64,
    pub denom: u64,
    pub candidates: usize,
    /// False when the budget ran out or validation found a gap wider than `delta`.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Distance from `p` to the nearest panel point. The threshold and ray
/// terms are cheap lower bounds and skip most W1 solves; W1 is solved once
/// per distinct panel copula.
pub fn distance_to_panel(p: &ModuliPoint, points: &[ModuliPoint], w: MetricWeights) -> Result<f64, ModuliError> {
    let mut best = f64::INFINITY;
    let mut solved: Vec<(&DiscreteMeasure, f64)> = Vec::new();
    for q in points {
        if p.skeleton != q.skeleton {
            return Err(ModuliError::SkeletonMismatch);
        }
        if p.tau.len() != q.tau.len() {
            return Err(ModuliError::Dimension(p.tau.len(), q.tau.len()));
        }
        let tau: f64 = p.tau.iter().zip(&q.tau).map(|(a, b)| (a - b).abs()).sum();
        let cheap = w.beta * tau + w.gamma_w * d_ray(&p.ray, &q.ray)?;
        if cheap >= best {
            continue;
        }
        let wd = if p.copula == q.copula {
            0.0
        } else if let Some(&(_, d)) = solved.iter().find(|(m, _)| **m == q.copula) {
            d
        } else {
            let (d, _) = w1(&p.copula, &q.copula)?;
            solved.push((&q.copula, d));
            d
        };
        let d = cheap + w.alpha * wd;
        if d < best {
            best = d;
            if best == 0.0 {
                break;
            }
        }
    }
    Ok(best)
}

/// Greedy farthest-point net. Candidates are snapped to the grid of
/// denominator `ceil(4/delta)` and kept when farther than `delta/2` from
/// every kept point.
pub fn build_delta_net(
    region: &RegionSpec,
    w: MetricWeights,
    delta: f64,
    opts: NetOptions,
) -> Result<Panel, CertifyError> {
    region.validate()?;
    if !(delta > 0.0) {
        return Err(CertifyError::BadDelta(delta));
    }
    let denom = (4.0 / delta).ceil() as u64;
    if region.is_degenerate() {
        return Ok(Panel {
            points: vec![region.base.clone()],
            delta,
            covering_radius: 0.0,
            denom,
            candidates: 1,
            complete: true,
            scores: None,
        });
    }
    let mut points: Vec<ModuliPoint> = Vec::new();
    let mut covered_run = 0usize;
    let mut k = 0u64;
    let mut budget_hit = false;
    while covered_run < opts.patience {
        let cand = region.sample("net-candidate", k);
        k += 1;
        let (snapped, _) = snap_to_grid(&cand, denom, w)?;
        let d = if points.is_empty() { f64::INFINITY } else { distance_to_panel(&snapped, &points, w)? };
        if d > delta / 2.0 {
            if points.len() >= opts.budget {
                budget_hit = true;
                break;
            }
            points.push(snapped);
            covered_run = 0;
        } else {
            covered_run += 1;
        }
    }
    let radii: Vec<f64> = (1..=opts.validation as u64)
        .into_par_iter()
        .map(|i| distance_to_panel(&region.sample("net-validate", i), &points, w))
        .collect::<Result<_, _>>()?;
    let base_d = distance_to_panel(&region.base, &points, w)?;
    let covering_radius = radii.into_iter().fold(base_d, f64::max);
    Ok(Panel {
        points,
        delta,
        covering_radius,
        denom,
        candidates: k as usize,
        complete: !budget_hit && covering_radius <= delta,
        scores: None,
    })
}

/// Score every panel point.
pub fn score_panel(panel: &mut Panel, f: impl Fn(&ModuliPoint) -> f64 + Sync) {
    panel.scores = Some(panel.points.par_iter().map(&f).collect());
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub min_panel_score: f64,
    pub threshold: f64,
    pub margin: f64,
    pub lipschitz: f64,
    pub delta: f64,
    pub lower_bound: f64,
    pub required_bound: f64,
    pub all_above_margin: bool,
    pub bound_ok: bool,
    pub pass: bool,
}

/// `bound = min panel score - 2 L delta`. Passing needs every panel score
/// at least `threshold + margin` and `bound >= threshold - 2 L delta`.
pub fn certify(
    scores: &[f64],
    threshold: f64,
    lipschitz: f64,
    delta: f64,
    margin: f64,
) -> Result<CertificationReport, CertifyError> {
    if scores.is_empty() {
        return Err(CertifyError::EmptyPanel);
    }
    let nan = scores.iter().filter(|s| s.is_nan()).count();
    if nan > 0 {
        return Err(CertifyError::Unscored(nan));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = 2.0 * lipschitz * delta;
    let lower_bound = min - slack;
    let required_bound = threshold - slack;
    let all_above_margin = scores.iter().all(|&s| s >= threshold + margin);
    let bound_ok = lower_bound >= required_bound;
    Ok(CertificationReport {
        min_panel_score: min,
        threshold,
        margin,
        lipschitz,
        delta,
        lower_bound,
        required_bound,
        all_above_margin,
        bound_ok,
        pass: all_above_margin && bound_ok,
    })
}

pub fn certify_panel(
    panel: &Panel,
    threshold: f64,
    lipschitz: f64,
    margin: f64,
) -> Result<CertificationReport, CertifyError> {
    let scores = panel.scores.as_ref().ok_or(CertifyError::Unscored(panel.points.len()))?;
    certify(scores, threshold, lipschitz, panel.covering_radius.max(0.0), margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterminacyReport {
    pub max_disagreement: f64,
    pub bound: f64,
}

/// Max panel disagreement plus `(L_phi + L_psi) delta`.
pub fn determinacy_check(
    phi: &[f64],
    psi: &[f64],
    l_phi: f64,
    l_psi: f64,
    delta: f64,
) -> Result<DeterminacyReport, CertifyError> {
    if phi.len() != psi.len() {
        return Err(CertifyError::PanelMismatch(phi.len(), psi.len()));
    }
    if phi.is_empty() {
        return Err(CertifyError::EmptyPanel);
    }
    let max_disagreement = phi.iter().zip(psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DeterminacyReport { max_disagreement, bound: max_disagreement + (l_phi + l_psi) * delta })
}

/// The tractable functional evaluated directly on a moduli point: copula
/// atoms stand in for joint PIT draws and the cost is charged on
/// `resource_scale * ray`.
#[derive(Debug, Clone)]
pub struct PointScorer {
    families: Vec<(f64, Vec<usize>)>,
    n_tasks: usize,
    pub cfg: TractableConfig,
    pub resource_scale: f64,
}

impl PointScorer {
    pub fn new(battery: &Battery, cfg: TractableConfig, resource_scale: f64) -> Result<Self, CertifyError> {
        cfg.validate(battery.d_r())?;
        let families = battery.families().into_iter().map(|(k, v)| (battery.family_weight(k), v)).collect();
        Ok(Self { families, n_tasks: battery.n_tasks(), cfg, resource_scale })
    }

    pub fn score(&self, p: &ModuliPoint) -> f64 {
        self.score_scaled(p, self.resource_scale)
    }

    pub fn score_scaled(&self, p: &ModuliPoint, scale: f64) -> f64 {
        let psi = self.cfg.psi;
        let per_task: Vec<f64> = (0..self.n_tasks).map(|t| p.copula.expect(|x| psi.psi(x[t], p.tau[t]))).collect();
        let means: Vec<f64> = self
            .families
            .iter()
            .map(|(_, m)| m.iter().map(|&t| per_task[t]).sum::<f64>() / m.len() as f64)
            .collect();
        let weighted: f64 = self.families.iter().zip(&means).map(|((w, _), m)| w * m).sum();
        let r: Vec<f64> = p.ray.iter().map(|x| x * scale).collect();
        weighted - self.cfg.lambda * population_variance(&means) - self.cfg.gamma * self.cfg.cost.cost(&r)
    }

    /// Lipschitz constant with respect to the pair metric, valid on points
    /// whose thresholds are all at least `tau_min` (only the ramp utility
    /// depends on it).
    pub fn lipschitz(&self, w: MetricWeights, tau_min: f64) -> f64 {
        let k = self.families.len() as f64;
        let max_c = self.families.iter().map(|(wk, m)| wk / m.len() as f64).fold(0.0, f64::max);
        let max_inv = self.families.iter().map(|(_, m)| 1.0 / m.len() as f64).fold(0.0, f64::max);
        let coef = max_c + 2.0 * self.cfg.lambda * max_inv / k;
        let (l_u, l_tau) = match self.cfg.psi {
            UtilityFamily::Ramp => {
                let s = if tau_min > 0.0 { 1.0 / tau_min } else { f64::INFINITY };
                (s, s)
            }
            UtilityFamily::ExpSat { .. } => (self.cfg.psi.lipschitz(0.0), 0.0),
        };
        let l_cop = l_u * coef * self.n_tasks as f64;
        let l_tau = l_tau * coef;
        let max_cost = self.cfg.cost.weights.iter().fold(0.0f64, |a, &b| a.max(b));
        let l_ray = self.cfg.gamma * self.resource_scale * max_cost;
        (l_cop / w.alpha).max(l_tau / w.beta).max(l_ray / w.gamma_w)
    }
}
