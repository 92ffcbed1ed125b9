//! The ten axis functionals and the weighted geometric index.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{FunctionalError, ScoreReport};
use crate::battery::{AgentRep, Axis, RunRecord};
use crate::canonical::CanonicalRep;

/// Per-axis weight, optional Lipschitz override and anchors. Only the
/// anchors an axis uses are read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AxisSpec {
    pub weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub family_thresholds: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_life: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discovery_anchor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub severity_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier_ref: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput_scale: Option<f64>,
}

impl AxisSpec {
    pub fn weighted(weight: f64) -> Self {
        Self { weight, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisConfig {
    pub axes: BTreeMap<Axis, AxisSpec>,
    pub epsilon: f64,
}

impl AxisConfig {
    pub fn total_weight(&self) -> f64 {
        self.axes.values().map(|s| s.weight).sum()
    }

    pub fn validate(&self) -> Result<(), FunctionalError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) && self.epsilon != 1.0 {
            return Err(FunctionalError::Config(format!("epsilon must be in (0,1], got {}", self.epsilon)));
        }
        if self.axes.is_empty() {
            return Err(FunctionalError::Config("no axes configured".into()));
        }
        for (ax, s) in &self.axes {
            if !(s.weight > 0.0) {
                return Err(FunctionalError::Config(format!("axis {ax} weight must be > 0")));
            }
        }
        Ok(())
    }
}

const DEFAULT_SEVERITY: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

fn anchor(ax: Axis, name: &'static str, v: Option<f64>) -> Result<f64, FunctionalError> {
    match v {
        Some(x) if x > 0.0 && x.is_finite() => Ok(x),
        _ => Err(FunctionalError::Anchor(ax, name)),
    }
}

/// `(1/k) eps^{-(k-1)/k}`: slope bound of a k-fold geometric mean whose
/// factors are clipped below at `eps`.
fn geo_slope(k: usize, eps: f64) -> f64 {
    let k = k as f64;
    eps.powf(-(k - 1.0) / k) / k
}

/// Analytic slope bound of each axis formula.
pub fn default_axis_lipschitz(ax: Axis, spec: &AxisSpec, eps: f64) -> f64 {
    let inv = |v: Option<f64>| v.filter(|&x| x > 0.0).map_or(1.0, |x| 1.0 / x);
    match ax {
        Axis::A => inv(spec.horizon),
        Axis::G => 1.0,
        Axis::P => inv(spec.depth),
        Axis::M => geo_slope(2, eps) * inv(spec.half_life).max(1.0),
        Axis::T => {
            let disc = spec.discovery_anchor.filter(|&a| a > 0.0).map_or(1.0, |a| 1.0 / (1.0 + a).ln());
            geo_slope(3, eps) * inv(spec.categories).max(disc).max(1.0)
        }
        Axis::R => 1.0,
        Axis::S => 2.0,
        Axis::E => {
            let sev = spec.severity_weights.as_deref().unwrap_or(&DEFAULT_SEVERITY);
            geo_slope(3, eps) * sev.iter().fold(1.0f64, |a, &b| a.max(b))
        }
        Axis::W => inv(spec.brier_ref),
        Axis::Dollar => inv(spec.throughput_scale),
    }
}

struct Selection<'a> {
    runs: Vec<(usize, usize, &'a RunRecord)>,
}

impl<'a> Selection<'a> {
    fn of(rep: &'a AgentRep, canon: &CanonicalRep, ax: Axis, tags: &[Option<Axis>]) -> Self {
        let tagged: Vec<usize> = (0..canon.n_tasks()).filter(|&p| tags.get(p).copied().flatten() == Some(ax)).collect();
        let positions: Vec<usize> = if tagged.is_empty() { (0..canon.n_tasks()).collect() } else { tagged };
        let mut runs = Vec::new();
        for p in positions {
            for (i, r) in rep.runs(p).iter().enumerate() {
                runs.push((p, i, r));
            }
        }
        Selection { runs }
    }

    fn require(&self, ax: Axis, keys: &[&str]) -> Result<(), FunctionalError> {
        let mut missing = BTreeSet::new();
        if self.runs.is_empty() {
            missing.extend(keys.iter().map(|k| k.to_string()));
        }
        for (_, _, r) in &self.runs {
            for k in keys {
                if !r.metrics.contains_key(*k) {
                    missing.insert(k.to_string());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(FunctionalError::MissingMetrics { axis: ax, keys: missing.into_iter().collect() })
        }
    }

    fn mean(&self, f: impl Fn(&RunRecord) -> f64) -> f64 {
        self.runs.iter().map(|(_, _, r)| f(r)).sum::<f64>() / self.runs.len() as f64
    }
}

fn metric(r: &RunRecord, key: &str) -> f64 {
    r.metrics[key]
}

/// Raw axis value before clipping.
fn raw_axis(
    canon: &CanonicalRep,
    rep: &AgentRep,
    tags: &[Option<Axis>],
    ax: Axis,
    spec: &AxisSpec,
    eps: f64,
) -> Result<f64, FunctionalError> {
    let sel = Selection::of(rep, canon, ax, tags);
    let c01 = |x: f64| x.clamp(eps, 1.0);
    Ok(match ax {
        Axis::A => {
            let h = anchor(ax, "horizon", spec.horizon)?;
            sel.require(ax, &["action_count"])?;
            sel.mean(|r| (metric(r, "action_count") / h).min(1.0))
        }
        Axis::G => {
            let default = spec.default_threshold.unwrap_or(0.5);
            let mut fam: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for t in &canon.tasks {
                let e = fam.entry(t.family.as_str()).or_default();
                e.0 += t.success_rate();
                e.1 += 1;
            }
            let met = fam
                .iter()
                .filter(|(f, (s, k))| s / *k as f64 >= *spec.family_thresholds.get(**f).unwrap_or(&default))
                .count();
            met as f64 / fam.len() as f64
        }
        Axis::P => {
            let d = anchor(ax, "depth", spec.depth)?;
            sel.require(ax, &["plan_depth"])?;
            let ok: Vec<f64> = sel
                .runs
                .iter()
                .filter(|(p, i, _)| canon.tasks[*p].q.get(*i).copied().unwrap_or(false))
                .map(|(_, _, r)| (metric(r, "plan_depth") / d).min(1.0))
                .collect();
            if ok.is_empty() {
                0.0
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            }
        }
        Axis::M => {
            let h = anchor(ax, "half_life", spec.half_life)?;
            sel.require(ax, &["recall_at_k", "lag"])?;
            let recall = c01(sel.mean(|r| metric(r, "recall_at_k")));
            let retention = c01(sel.mean(|r| (-metric(r, "lag") / h).exp()));
            (recall * retention).sqrt()
        }
        Axis::T => {
            let total = anchor(ax, "categories", spec.categories)?;
            let a = anchor(ax, "discovery_anchor", spec.discovery_anchor)?;
            sel.require(ax, &["tool_category", "drift_success", "discovery_size"])?;
            let covered: BTreeSet<i64> =
                sel.runs.iter().map(|(_, _, r)| metric(r, "tool_category").round() as i64).collect();
            let coverage = c01(covered.len() as f64 / total);
            let drift = c01(sel.mean(|r| metric(r, "drift_success")));
            let disc = c01((1.0 + sel.mean(|r| metric(r, "discovery_size")).max(0.0)).ln() / (1.0 + a).ln());
            (coverage * drift * disc).cbrt()
        }
        Axis::R => {
            sel.require(ax, &["patch_gain", "control_gain"])?;
            sel.mean(|r| {
                let w = r.metrics.get("autonomy").copied().unwrap_or(1.0);
                w * (metric(r, "patch_gain") - metric(r, "control_gain"))
            })
        }
        Axis::S => {
            sel.require(ax, &["multi_lift", "deadlock"])?;
            let lift = sel.mean(|r| metric(r, "multi_lift")).clamp(0.0, 1.0);
            lift * (1.0 - sel.mean(|r| metric(r, "deadlock")).clamp(0.0, 1.0))
        }
        Axis::E => {
            sel.require(ax, &["actuation_ok", "safety_severity", "sim2real_agreement"])?;
            let sev = spec.severity_weights.as_deref().unwrap_or(&DEFAULT_SEVERITY);
            if sev.is_empty() {
                return Err(FunctionalError::Anchor(ax, "severity_weights"));
            }
            let act = c01(sel.mean(|r| metric(r, "actuation_ok")));
            let incident = sel.mean(|r| {
                let lvl = metric(r, "safety_severity").round().clamp(0.0, (sev.len() - 1) as f64) as usize;
                sev[lvl]
            });
            let safe = c01(1.0 - incident);
            let s2r = c01(sel.mean(|r| metric(r, "sim2real_agreement")));
            (act * safe * s2r).cbrt()
        }
        Axis::W => {
            let reference = match spec.brier_ref {
                Some(b) => anchor(ax, "brier_ref", Some(b))?,
                None => {
                    sel.require(ax, &["brier", "brier_ref"])?;
                    anchor(ax, "brier_ref", Some(sel.mean(|r| metric(r, "brier_ref"))))?
                }
            };
            sel.require(ax, &["brier"])?;
            1.0 - sel.mean(|r| metric(r, "brier")) / reference
        }
        Axis::Dollar => {
            let scale = anchor(ax, "throughput_scale", spec.throughput_scale)?;
            sel.require(ax, &["tph", "cph"])?;
            let cph = sel.mean(|r| metric(r, "cph"));
            if !(cph > 0.0) {
                return Err(FunctionalError::Anchor(ax, "cph"));
            }
            sel.mean(|r| metric(r, "tph")) / cph / scale
        }
    })
}

/// One axis value, clipped to `[eps, 1]`. `tags` gives the axis tag of
/// each battery task; runs of tasks tagged `x` feed axis `x`, or all runs
/// when no task carries the tag.
pub fn axis_value(
    canon: &CanonicalRep,
    rep: &AgentRep,
    tags: &[Option<Axis>],
    x: Axis,
    cfg: &AxisConfig,
) -> Result<f64, FunctionalError> {
    let spec = cfg.axes.get(&x).ok_or(FunctionalError::MissingAxis(x))?;
    let raw = raw_axis(canon, rep, tags, x, spec, cfg.epsilon)?;
    Ok(if raw.is_nan() { cfg.epsilon } else { raw.clamp(cfg.epsilon, 1.0) })
}

/// Weighted geometric mean of the configured axes.
pub fn geometric_aai(
    canon: &CanonicalRep,
    rep: &AgentRep,
    tags: &[Option<Axis>],
    cfg: &AxisConfig,
) -> Result<ScoreReport, FunctionalError> {
    cfg.validate()?;
    let w = cfg.total_weight();
    let mut values = BTreeMap::new();
    let mut acc = 0.0;
    for (&ax, spec) in &cfg.axes {
        let v = axis_value(canon, rep, tags, ax, cfg)?;
        acc += spec.weight * v.ln();
        values.insert(ax.tag().to_string(), v);
    }
    Ok(ScoreReport {
        value: (acc / w).exp(),
        family_means: BTreeMap::new(),
        family_weights: BTreeMap::new(),
        dispersion_penalty: 0.0,
        mean_cost: 0.0,
        cost_penalty: 0.0,
        axis_values: Some(values),
        n_per_task: canon.tasks.iter().map(|t| t.n()).collect(),
        ci: None,
    })
}

/// `L = (sum_x w_x L_x) / (alpha W eps)`. Axes missing from `axis_lipschitz`
/// use their override or analytic default.
pub fn lipschitz_modulus(
    cfg: &AxisConfig,
    axis_lipschitz: &BTreeMap<Axis, f64>,
    alpha: f64,
) -> Result<f64, FunctionalError> {
    if !(cfg.epsilon > 0.0) {
        return Err(FunctionalError::Config("epsilon must be > 0".into()));
    }
    if !(alpha > 0.0) {
        return Err(FunctionalError::Config("alpha must be > 0".into()));
    }
    let mut num = 0.0;
    for (&ax, spec) in &cfg.axes {
        let l = axis_lipschitz
            .get(&ax)
            .copied()
            .or(spec.lipschitz)
            .unwrap_or_else(|| default_axis_lipschitz(ax, spec, cfg.epsilon));
        if !(l >= 0.0) {
            return Err(FunctionalError::Config(format!("axis {ax} Lipschitz constant must be >= 0")));
        }
        num += spec.weight * l;
    }
    Ok(num / (alpha * cfg.total_weight() * cfg.epsilon))
}
