use serde::{Deserialize, Serialize};

use super::{empirical_copula, w1, DiscreteMeasure, ModuliError, TransportPlan};
use crate::battery::{skeleton_of, Battery, Skeleton};
use crate::canonical::CanonicalRep;

/// Weights `(alpha, beta, gamma_w)` of the pair metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_w: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma_w: 1.0 }
    }
}

/// One point of the moduli space within a fixed stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuliPoint {
    pub skeleton: Skeleton,
    pub tau: Vec<f64>,
    pub copula: DiscreteMeasure,
    pub ray: Vec<f64>,
}

impl ModuliPoint {
    pub fn new(skeleton: Skeleton, tau: Vec<f64>, copula: DiscreteMeasure, ray: Vec<f64>) -> Result<Self, ModuliError> {
        if copula.dim() != tau.len() {
            return Err(ModuliError::Dimension(tau.len(), copula.dim()));
        }
        if tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(ModuliError::Point("threshold outside [0,1]".into()));
        }
        if ray.is_empty() || ray.iter().any(|&r| !(r >= 0.0)) || (ray.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ModuliError::Point("ray must be a nonnegative unit-l1 vector".into()));
        }
        Ok(Self { skeleton, tau, copula, ray })
    }

    pub fn from_canonical(battery: &Battery, canon: &CanonicalRep) -> Result<Self, ModuliError> {
        Self::new(skeleton_of(battery), canon.taus(), empirical_copula(canon)?, canon.ray.clone())
    }

    pub fn n_tasks(&self) -> usize {
        self.tau.len()
    }
}

fn normalize(r: &[f64]) -> Result<Vec<f64>, ModuliError> {
    if r.iter().any(|&x| !(x >= 0.0)) {
        return Err(ModuliError::Point("ray coordinates must be >= 0".into()));
    }
    let s: f64 = r.iter().sum();
    if !(s > 0.0) {
        return Err(ModuliError::ZeroVector);
    }
    Ok(r.iter().map(|x| x / s).collect())
}

/// l1 distance between the l1-normalized vectors.
pub fn d_ray(r: &[f64], rp: &[f64]) -> Result<f64, ModuliError> {
    if r.len() != rp.len() {
        return Err(ModuliError::Dimension(r.len(), rp.len()));
    }
    let (a, b) = (normalize(r)?, normalize(rp)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpParts {
    pub w1: f64,
    pub tau_l1: f64,
    pub ray: f64,
    pub total: f64,
}

pub fn d_sharp_parts(a: &ModuliPoint, b: &ModuliPoint, w: MetricWeights) -> Result<SharpParts, ModuliError> {
    if a.skeleton != b.skeleton {
        return Err(ModuliError::SkeletonMismatch);
    }
    if a.tau.len() != b.tau.len() {
        return Err(ModuliError::Dimension(a.tau.len(), b.tau.len()));
    }
    let tau_l1: f64 = a.tau.iter().zip(&b.tau).map(|(x, y)| (x - y).abs()).sum();
    let ray = d_ray(&a.ray, &b.ray)?;
    let (w1d, _) = w1(&a.copula, &b.copula)?;
    Ok(SharpParts { w1: w1d, tau_l1, ray, total: w.alpha * w1d + w.beta * tau_l1 + w.gamma_w * ray })
}

/// `alpha W1 + beta |dtau|_1 + gamma_w d_ray`.
pub fn d_sharp(a: &ModuliPoint, b: &ModuliPoint, w: MetricWeights) -> Result<f64, ModuliError> {
    d_sharp_parts(a, b, w).map(|p| p.total)
}

/// Move each unit of flow `x -> y` to `(1-t) x + t y`.
pub fn displacement_interpolate(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    plan: &TransportPlan,
    t: f64,
) -> Result<DiscreteMeasure, ModuliError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ModuliError::BadT(t));
    }
    if t == 0.0 {
        return Ok(mu.clone());
    }
    if t == 1.0 {
        return Ok(nu.clone());
    }
    let mut atoms = Vec::with_capacity(plan.flows.len());
    let mut weights = Vec::with_capacity(plan.flows.len());
    for &(i, j, f) in &plan.flows {
        let x = mu.atom(i);
        let y = nu.atom(j);
        atoms.push(x.iter().zip(y).map(|(a, b)| ((1.0 - t) * a + t * b).clamp(0.0, 1.0)).collect());
        weights.push(f);
    }
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    DiscreteMeasure::new(mu.dim(), atoms, weights)
}

fn round_grid(x: f64, denom: u64) -> f64 {
    let d = denom as f64;
    ((x * d).round() / d).clamp(0.0, 1.0)
}

/// Largest-remainder apportionment of `denom` units.
fn snap_ray(ray: &[f64], denom: u64) -> Vec<f64> {
    let d = denom as f64;
    let scaled: Vec<f64> = ray.iter().map(|r| r * d).collect();
    let mut units: Vec<u64> = scaled.iter().map(|s| s.floor().max(0.0) as u64).collect();
    let assigned: u64 = units.iter().sum();
    let mut order: Vec<usize> = (0..ray.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(denom.saturating_sub(assigned) as usize) {
        units[k] += 1;
    }
    units.iter().map(|&u| u as f64 / d).collect()
}

/// Round thresholds, copula atoms and ray to multiples of `1/denom`.
/// Returns the snapped point and its pair-metric distance to the input.
pub fn snap_to_grid(p: &ModuliPoint, denom: u64, w: MetricWeights) -> Result<(ModuliPoint, f64), ModuliError> {
    let denom = denom.max(1);
    let tau = p.tau.iter().map(|&x| round_grid(x, denom)).collect();
    let atoms = p.copula.atoms().iter().map(|a| a.iter().map(|&x| round_grid(x, denom)).collect()).collect();
    let copula = DiscreteMeasure::new(p.copula.dim(), atoms, p.copula.weights().to_vec())?;
    let ray = snap_ray(&p.ray, denom);
    let snapped = ModuliPoint::new(p.skeleton.clone(), tau, copula, ray)?;
    let dist = d_sharp(p, &snapped, w)?;
    Ok((snapped, dist))
}
