//! Batteries, run ingestion, skeletons and evaluation-preserving symmetries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum BatteryError {
    #[error("battery has no tasks")]
    EmptyTasks,
    #[error("family `{0}` has weight {1}, weights must be > 0")]
    NonPositiveWeight(String, f64),
    #[error("threshold outside [0,1] on task `{0}`: {1}")]
    ThresholdOutOfRange(String, f64),
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("task `{0}` references unknown family `{1}`")]
    UnknownFamily(String, String),
    #[error("family `{0}` has no tasks")]
    EmptyFamily(String),
    #[error("battery declares no resource coordinates")]
    NoResources,
    #[error("sampling weights invalid: {0}")]
    SamplingWeights(String),
    #[error("unsupported format_version {0}")]
    FormatVersion(u32),
    #[error("symmetry not applicable: {0}")]
    Symmetry(String),
    #[error("record line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// The ten AAI axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    A,
    G,
    P,
    M,
    T,
    R,
    S,
    E,
    W,
    #[serde(rename = "$")]
    Dollar,
}

impl Axis {
    pub const ALL: [Axis; 10] = [
        Axis::A,
        Axis::G,
        Axis::P,
        Axis::M,
        Axis::T,
        Axis::R,
        Axis::S,
        Axis::E,
        Axis::W,
        Axis::Dollar,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Axis::A => "A",
            Axis::G => "G",
            Axis::P => "P",
            Axis::M => "M",
            Axis::T => "T",
            Axis::R => "R",
            Axis::S => "S",
            Axis::E => "E",
            Axis::W => "W",
            Axis::Dollar => "$",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub family: String,
    pub q_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Axis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceCoord {
    pub name: String,
    pub unit: String,
}

/// On-disk battery description, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryFile {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub tasks: Vec<TaskSpec>,
    pub family_weights: BTreeMap<String, f64>,
    pub resources: Vec<ResourceCoord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_weights: Option<BTreeMap<String, f64>>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

/// A validated battery. Families partition the tasks; family weights are
/// positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Battery {
    tasks: Vec<TaskSpec>,
    family_weights: BTreeMap<String, f64>,
    resources: Vec<ResourceCoord>,
    sampling_weights: Vec<f64>,
    index: HashMap<String, usize>,
    weights_normalized: bool,
}

impl Battery {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, i: usize) -> &TaskSpec {
        &self.tasks[i]
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn family_weights(&self) -> &BTreeMap<String, f64> {
        &self.family_weights
    }

    pub fn family_weight(&self, family: &str) -> f64 {
        self.family_weights[family]
    }

    pub fn resources(&self) -> &[ResourceCoord] {
        &self.resources
    }

    pub fn d_r(&self) -> usize {
        self.resources.len()
    }

    pub fn sampling_weights(&self) -> &[f64] {
        &self.sampling_weights
    }

    /// True when the input weights did not sum to one and were rescaled.
    pub fn weights_normalized(&self) -> bool {
        self.weights_normalized
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.q_star).collect()
    }

    /// Task positions per family, families in sorted order.
    pub fn families(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tasks.iter().enumerate() {
            out.entry(t.family.as_str()).or_default().push(i);
        }
        out
    }

    /// Task ids grouped by equal threshold, groups ordered by threshold.
    pub fn threshold_partition(&self) -> Vec<Vec<String>> {
        let mut groups: BTreeMap<OrdF64, Vec<String>> = BTreeMap::new();
        for t in &self.tasks {
            groups.entry(OrdF64(t.q_star)).or_default().push(t.id.clone());
        }
        groups
            .into_values()
            .map(|mut g| {
                g.sort();
                g
            })
            .collect()
    }

    pub fn to_file(&self) -> BatteryFile {
        let uniform = 1.0 / self.tasks.len() as f64;
        let sampling = if self.sampling_weights.iter().all(|&w| w == uniform) {
            None
        } else {
            Some(
                self.tasks
                    .iter()
                    .zip(&self.sampling_weights)
                    .map(|(t, &w)| (t.id.clone(), w))
                    .collect(),
            )
        };
        BatteryFile {
            format_version: FORMAT_VERSION,
            tasks: self.tasks.clone(),
            family_weights: self.family_weights.clone(),
            resources: self.resources.clone(),
            sampling_weights: sampling,
        }
    }

    pub fn from_json(text: &str) -> Result<Battery, BatteryError> {
        let file: BatteryFile = serde_json::from_str(text)
            .map_err(|e| BatteryError::Parse { line: e.line(), msg: e.to_string() })?;
        validate_battery(file)
    }
}

/// Validate a battery description. Family weights that sum to some positive
/// constant other than one are normalized and flagged.
pub fn validate_battery(spec: BatteryFile) -> Result<Battery, BatteryError> {
    if spec.format_version != FORMAT_VERSION {
        return Err(BatteryError::FormatVersion(spec.format_version));
    }
    if spec.tasks.is_empty() {
        return Err(BatteryError::EmptyTasks);
    }
    if spec.resources.is_empty() {
        return Err(BatteryError::NoResources);
    }
    for (name, &w) in &spec.family_weights {
        if !(w > 0.0) || !w.is_finite() {
            return Err(BatteryError::NonPositiveWeight(name.clone(), w));
        }
    }
    let mut index = HashMap::with_capacity(spec.tasks.len());
    let mut used = BTreeSet::new();
    for (i, t) in spec.tasks.iter().enumerate() {
        if !(0.0..=1.0).contains(&t.q_star) {
            return Err(BatteryError::ThresholdOutOfRange(t.id.clone(), t.q_star));
        }
        if !spec.family_weights.contains_key(&t.family) {
            return Err(BatteryError::UnknownFamily(t.id.clone(), t.family.clone()));
        }
        if index.insert(t.id.clone(), i).is_some() {
            return Err(BatteryError::DuplicateTask(t.id.clone()));
        }
        used.insert(t.family.as_str());
    }
    if let Some(empty) = spec.family_weights.keys().find(|f| !used.contains(f.as_str())) {
        return Err(BatteryError::EmptyFamily(empty.clone()));
    }

    let total: f64 = spec.family_weights.values().sum();
    let weights_normalized = (total - 1.0).abs() > 1e-12;
    let family_weights = if weights_normalized {
        spec.family_weights.iter().map(|(k, &w)| (k.clone(), w / total)).collect()
    } else {
        spec.family_weights.clone()
    };

    let n = spec.tasks.len();
    let sampling_weights = match &spec.sampling_weights {
        None => vec![1.0 / n as f64; n],
        Some(map) => {
            let mut w = vec![0.0; n];
            for (id, &v) in map {
                let i = *index
                    .get(id)
                    .ok_or_else(|| BatteryError::SamplingWeights(format!("unknown task `{id}`")))?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(BatteryError::SamplingWeights(format!("negative weight on `{id}`")));
                }
                w[i] = v;
            }
            let s: f64 = w.iter().sum();
            if !(s > 0.0) {
                return Err(BatteryError::SamplingWeights("weights sum to zero".into()));
            }
            if (s - 1.0).abs() > 1e-12 {
                w.iter_mut().for_each(|x| *x /= s);
            }
            w
        }
    };

    Ok(Battery {
        tasks: spec.tasks,
        family_weights,
        resources: spec.resources,
        sampling_weights,
        index,
        weights_normalized,
    })
}

/// Total order wrapper for finite thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// The discrete datum indexing a stratum of the moduli space.
///
/// Everything here is stated without task ids so that within-family
/// relabelings leave it untouched: threshold classes are recorded as
/// per-family member counts, ordered by threshold value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub family_sizes: BTreeMap<String, usize>,
    pub threshold_classes: Vec<BTreeMap<String, usize>>,
    /// Families ordered by mean threshold; ties share a level.
    pub family_order: Vec<Vec<String>>,
    pub axis_tags: BTreeMap<String, usize>,
}

pub fn skeleton_of(battery: &Battery) -> Skeleton {
    let families = battery.families();
    let family_sizes = families.iter().map(|(k, v)| (k.to_string(), v.len())).collect();

    let mut classes: BTreeMap<OrdF64, BTreeMap<String, usize>> = BTreeMap::new();
    for t in battery.tasks() {
        *classes.entry(OrdF64(t.q_star)).or_default().entry(t.family.clone()).or_default() += 1;
    }
    let threshold_classes = classes.into_values().collect();

    let mut levels: BTreeMap<OrdF64, Vec<String>> = BTreeMap::new();
    for (name, members) in &families {
        let mut qs: Vec<f64> = members.iter().map(|&i| battery.task(i).q_star).collect();
        qs.sort_by(f64::total_cmp);
        let mean = qs.iter().sum::<f64>() / qs.len() as f64;
        levels.entry(OrdF64(mean)).or_default().push(name.to_string());
    }
    let family_order = levels.into_values().collect();

    let mut axis_tags = BTreeMap::new();
    for t in battery.tasks() {
        if let Some(ax) = t.axis {
            *axis_tags.entry(ax.tag().to_string()).or_default() += 1;
        }
    }

    Skeleton { family_sizes, threshold_classes, family_order, axis_tags }
}

/// A single execution of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_version: Option<u32>,
    pub task_id: String,
    pub seed: i64,
    #[serde(default)]
    pub drift: String,
    pub score: f64,
    pub resources: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

/// Empirical agent representation: runs grouped by battery task position.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRep {
    task_ids: Vec<String>,
    runs: Vec<Vec<RunRecord>>,
    rejected: usize,
    rejection_reasons: Vec<String>,
}

impl AgentRep {
    pub fn empty(battery: &Battery) -> Self {
        AgentRep {
            task_ids: battery.tasks().iter().map(|t| t.id.clone()).collect(),
            runs: vec![Vec::new(); battery.n_tasks()],
            rejected: 0,
            rejection_reasons: Vec::new(),
        }
    }

    /// Add a record, rejecting (and counting) unknown tasks or bad resource
    /// vectors. Returns whether the record was accepted.
    pub fn push(&mut self, battery: &Battery, rec: RunRecord) -> bool {
        let reason = match battery.task_index(&rec.task_id) {
            None => Some(format!("unknown task `{}`", rec.task_id)),
            Some(_) if rec.resources.len() != battery.d_r() => Some(format!(
                "task `{}`: resource vector has length {}, expected {}",
                rec.task_id,
                rec.resources.len(),
                battery.d_r()
            )),
            Some(_) if rec.resources.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) => {
                Some(format!("task `{}`: negative or non-finite resource", rec.task_id))
            }
            Some(_) if !rec.score.is_finite() => Some(format!("task `{}`: non-finite score", rec.task_id)),
            Some(_) => None,
        };
        match reason {
            Some(r) => {
                self.rejected += 1;
                self.rejection_reasons.push(r);
                false
            }
            None => {
                let i = battery.task_index(&rec.task_id).unwrap();
                self.runs[i].push(rec);
                true
            }
        }
    }

    pub fn from_records(battery: &Battery, records: impl IntoIterator<Item = RunRecord>) -> Self {
        let mut rep = AgentRep::empty(battery);
        for r in records {
            rep.push(battery, r);
        }
        rep
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn runs(&self, task: usize) -> &[RunRecord] {
        &self.runs[task]
    }

    pub fn all_runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().flatten()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.runs.iter().map(Vec::len).collect()
    }

    pub fn total_runs(&self) -> usize {
        self.runs.iter().map(Vec::len).sum()
    }

    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn rejection_reasons(&self) -> &[String] {
        &self.rejection_reasons
    }

    /// Apply a per-task map to every raw score.
    pub fn map_scores(&self, mut f: impl FnMut(usize, f64) -> f64) -> AgentRep {
        let mut out = self.clone();
        for (t, runs) in out.runs.iter_mut().enumerate() {
            for r in runs {
                r.score = f(t, r.score);
            }
        }
        out
    }

    /// Replace the runs of one task (used by resampling).
    pub fn with_runs(task_ids: Vec<String>, runs: Vec<Vec<RunRecord>>) -> AgentRep {
        assert_eq!(task_ids.len(), runs.len());
        AgentRep { task_ids, runs, rejected: 0, rejection_reasons: Vec::new() }
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.all_runs() {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Read JSON-lines run records. Malformed JSON is an error; records that
/// reference unknown tasks or carry a wrong-length resource vector are
/// rejected and counted.
pub fn load_runs(reader: impl BufRead, battery: &Battery) -> Result<AgentRep, BatteryError> {
    let mut rep = AgentRep::empty(battery);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| BatteryError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line)
            .map_err(|e| BatteryError::Parse { line: lineno + 1, msg: e.to_string() })?;
        if let Some(v) = rec.format_version {
            if v != FORMAT_VERSION {
                return Err(BatteryError::FormatVersion(v));
            }
        }
        rep.push(battery, rec);
    }
    Ok(rep)
}

/// Strictly increasing piecewise-linear map, extended linearly past its
/// end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, BatteryError> {
        if knots.len() < 2 {
            return Err(BatteryError::Symmetry("rescale map needs at least two knots".into()));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(BatteryError::Symmetry("rescale map is not strictly increasing".into()));
            }
        }
        if knots.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(BatteryError::Symmetry("rescale map has non-finite knots".into()));
        }
        Ok(Self { knots })
    }

    pub fn identity() -> Self {
        Self { knots: vec![(0.0, 0.0), (1.0, 1.0)] }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn apply(&self, x: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|&(kx, _)| kx < x);
        if i < k.len() && k[i].0 == x {
            return k[i].1;
        }
        let (a, b) = if i == 0 {
            (k[0], k[1])
        } else if i == k.len() {
            (k[k.len() - 2], k[k.len() - 1])
        } else {
            (k[i - 1], k[i])
        };
        a.1 + (x - a.0) * (b.1 - a.1) / (b.0 - a.0)
    }

    pub fn inverse(&self) -> Self {
        Self { knots: self.knots.iter().map(|&(x, y)| (y, x)).collect() }
    }
}

/// An executable element of the symmetry group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Symmetry {
    /// Task id relabeling; every task must map into its own family.
    FamilyPermutation { map: BTreeMap<String, String> },
    /// Per-task strictly increasing score maps (tasks not listed keep identity).
    ScoreRescale { maps: BTreeMap<String, PiecewiseLinear> },
    /// Positive scale per resource coordinate.
    ResourceRescale { scales: Vec<f64> },
    /// Bijection on seed labels (seeds not listed keep their label).
    SeedRelabel { map: BTreeMap<i64, i64> },
}

impl Symmetry {
    pub fn inverse(&self) -> Symmetry {
        match self {
            Symmetry::FamilyPermutation { map } => Symmetry::FamilyPermutation {
                map: map.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
            },
            Symmetry::ScoreRescale { maps } => Symmetry::ScoreRescale {
                maps: maps.iter().map(|(k, m)| (k.clone(), m.inverse())).collect(),
            },
            Symmetry::ResourceRescale { scales } => {
                Symmetry::ResourceRescale { scales: scales.iter().map(|s| 1.0 / s).collect() }
            }
            Symmetry::SeedRelabel { map } => {
                Symmetry::SeedRelabel { map: map.iter().map(|(a, b)| (*b, *a)).collect() }
            }
        }
    }
}

/// Apply a symmetry to a battery and its runs.
///
/// Score rescales move raw scores and thresholds together, so aligned
/// thresholds are unchanged; they must keep thresholds in `[0,1]` and
/// preserve the threshold coincidence/order structure (a symmetry acts
/// within one stratum).
pub fn apply_symmetry(
    battery: &Battery,
    rep: &AgentRep,
    g: &Symmetry,
) -> Result<(Battery, AgentRep), BatteryError> {
    match g {
        Symmetry::FamilyPermutation { map } => {
            let mut seen = BTreeSet::new();
            for (from, to) in map {
                let i = battery
                    .task_index(from)
                    .ok_or_else(|| BatteryError::Symmetry(format!("unknown task `{from}`")))?;
                let j = battery
                    .task_index(to)
                    .ok_or_else(|| BatteryError::Symmetry(format!("unknown task `{to}`")))?;
                if battery.task(i).family != battery.task(j).family {
                    return Err(BatteryError::Symmetry(format!(
                        "permutation maps `{from}` across families"
                    )));
                }
                if !seen.insert(to.clone()) {
                    return Err(BatteryError::Symmetry(format!("`{to}` is hit twice")));
                }
            }
            let relabel = |id: &str| map.get(id).cloned().unwrap_or_else(|| id.to_string());
            let mut file = battery.to_file();
            for t in &mut file.tasks {
                t.id = relabel(&t.id);
            }
            if let Some(sw) = &mut file.sampling_weights {
                *sw = sw.iter().map(|(k, v)| (relabel(k), *v)).collect();
            }
            let nb = validate_battery(file)
                .map_err(|e| BatteryError::Symmetry(format!("not a permutation: {e}")))?;
            let runs = (0..rep.task_ids.len())
                .map(|t| {
                    rep.runs[t]
                        .iter()
                        .map(|r| RunRecord { task_id: relabel(&r.task_id), ..r.clone() })
                        .collect()
                })
                .collect();
            let task_ids = rep.task_ids.iter().map(|id| relabel(id)).collect();
            Ok((nb, AgentRep { task_ids, runs, ..rep.clone() }))
        }
        Symmetry::ScoreRescale { maps } => {
            for id in maps.keys() {
                if battery.task_index(id).is_none() {
                    return Err(BatteryError::Symmetry(format!("unknown task `{id}`")));
                }
            }
            let mut file = battery.to_file();
            for t in &mut file.tasks {
                if let Some(m) = maps.get(&t.id) {
                    let q = m.apply(t.q_star);
                    if !(0.0..=1.0).contains(&q) {
                        return Err(BatteryError::Symmetry(format!(
                            "rescale sends threshold of `{}` to {q}",
                            t.id
                        )));
                    }
                    t.q_star = q;
                }
            }
            let nb = validate_battery(file)?;
            let before = skeleton_of(battery);
            let after = skeleton_of(&nb);
            if before.threshold_classes != after.threshold_classes || before.family_order != after.family_order {
                return Err(BatteryError::Symmetry("rescale breaks the threshold structure".into()));
            }
            let ids = rep.task_ids.clone();
            let out = rep.map_scores(|t, s| match maps.get(&ids[t]) {
                Some(m) => m.apply(s),
                None => s,
            });
            Ok((nb, out))
        }
        Symmetry::ResourceRescale { scales } => {
            if scales.len() != battery.d_r() {
                return Err(BatteryError::Symmetry(format!(
                    "{} resource scales for {} coordinates",
                    scales.len(),
                    battery.d_r()
                )));
            }
            if scales.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
                return Err(BatteryError::Symmetry("resource scales must be positive".into()));
            }
            let mut out = rep.clone();
            for r in out.runs.iter_mut().flatten() {
                for (x, c) in r.resources.iter_mut().zip(scales) {
                    *x *= c;
                }
            }
            Ok((battery.clone(), out))
        }
        Symmetry::SeedRelabel { map } => {
            let seeds: BTreeSet<i64> = rep.all_runs().map(|r| r.seed).collect();
            let mut image = BTreeSet::new();
            for &s in &seeds {
                let t = map.get(&s).copied().unwrap_or(s);
                if !image.insert(t) {
                    return Err(BatteryError::Symmetry(format!("seed relabeling is not injective at {t}")));
                }
            }
            let mut out = rep.clone();
            for r in out.runs.iter_mut().flatten() {
                if let Some(&t) = map.get(&r.seed) {
                    r.seed = t;
                }
            }
            Ok((battery.clone(), out))
        }
    }
}
