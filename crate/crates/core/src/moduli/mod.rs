//! Moduli coordinates: empirical copulas, exact W1, ray metric, pair metric,
//! displacement interpolation and grid quantization.

mod ot;
mod point;

pub use ot::{ground, subsample, w1, w1_auto, TransportPlan, EXACT_CAP, SUBSAMPLE_ATOMS};
pub use point::{
    d_ray, d_sharp, d_sharp_parts, displacement_interpolate, snap_to_grid, MetricWeights, ModuliPoint, SharpParts,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{align, CanonicalRep};

#[derive(Debug, Error, PartialEq)]
pub enum ModuliError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("exact solver limited to m*n <= 1e6, got {0} x {1}; subsample first")]
    TooLarge(usize, usize),
    #[error("invalid measure: {0}")]
    Measure(String),
    #[error("zero vector has no ray")]
    ZeroVector,
    #[error("skeletons differ; distance across strata is undefined")]
    SkeletonMismatch,
    #[error("t = {0} is outside [0,1]")]
    BadT(f64),
    #[error("no runs")]
    NoRuns,
    #[error("invalid point: {0}")]
    Point(String),
}

/// Finitely supported probability measure on `[0,1]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureFile", into = "MeasureFile")]
pub struct DiscreteMeasure {
    dim: usize,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureFile {
    dims: usize,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<MeasureFile> for DiscreteMeasure {
    type Error = ModuliError;
    fn try_from(f: MeasureFile) -> Result<Self, ModuliError> {
        DiscreteMeasure::new(f.dims, f.atoms, f.weights)
    }
}

impl From<DiscreteMeasure> for MeasureFile {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureFile { dims: m.dim, atoms: m.atoms, weights: m.weights }
    }
}

impl DiscreteMeasure {
    /// Validates weights and the unit cube, drops zero-weight atoms and
    /// merges repeated atoms (first occurrence keeps its position).
    pub fn new(dim: usize, atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, ModuliError> {
        if atoms.len() != weights.len() {
            return Err(ModuliError::Measure(format!("{} atoms, {} weights", atoms.len(), weights.len())));
        }
        if atoms.is_empty() {
            return Err(ModuliError::Measure("no atoms".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(ModuliError::Measure(format!("weights must be >= 0 and sum to 1, sum = {total}")));
        }
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(atoms.len());
        let mut out_atoms: Vec<Vec<f64>> = Vec::with_capacity(atoms.len());
        let mut out_w: Vec<f64> = Vec::with_capacity(atoms.len());
        for (a, w) in atoms.into_iter().zip(weights) {
            if a.len() != dim {
                return Err(ModuliError::Dimension(dim, a.len()));
            }
            if a.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(ModuliError::Measure("atom outside the unit cube".into()));
            }
            if w == 0.0 {
                continue;
            }
            let key: Vec<u64> = a.iter().map(|x| (x + 0.0).to_bits()).collect();
            match index.get(&key) {
                Some(&k) => out_w[k] += w,
                None => {
                    index.insert(key, out_atoms.len());
                    out_atoms.push(a);
                    out_w.push(w);
                }
            }
        }
        Ok(Self { dim, atoms: out_atoms, weights: out_w })
    }

    pub fn dirac(x: Vec<f64>) -> Self {
        Self { dim: x.len(), atoms: vec![x], weights: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i]
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(X)]`.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| w * f(a)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measure serializes")
    }
}

/// Joint PIT vectors of the runs, weight `1/n` each. Tasks with fewer runs
/// are padded by keyed resampling.
pub fn empirical_copula(canon: &CanonicalRep) -> Result<DiscreteMeasure, ModuliError> {
    let canon = align(canon);
    let n = canon.tasks.first().map_or(0, |t| t.n());
    if n == 0 {
        return Err(ModuliError::NoRuns);
    }
    let atoms = (0..n).map(|i| canon.tasks.iter().map(|t| t.u[i]).collect()).collect();
    DiscreteMeasure::new(canon.n_tasks(), atoms, vec![1.0 / n as f64; n])
}
