//! Batch commands over batteries and run records. Every command reads its
//! inputs from disk, writes JSON reports into `--out` and embeds the master
//! seed and a hash of the battery and config files.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use aai_moduli::battery::{load_runs, AgentRep, Axis, Battery, BatteryError};
use aai_moduli::canonical::{canonicalize, CanonicalError, CanonicalRep, PitOptions};
use aai_moduli::certify::{build_delta_net, certify_panel, score_panel, CertifyError, NetOptions, PointScorer, RegionSpec};
use aai_moduli::cognitive::{
    continuation_value, envelopes, project_core, CoreError, CoreScorer, InvariantSpec, LiftReference, NonCoreInvariant,
    ThetaContinuation,
};
use aai_moduli::functionals::{geometric_aai, tractable_phi, AxisConfig, AxisSpec, FunctionalError, TractableConfig};
use aai_moduli::moduli::{empirical_copula, DiscreteMeasure, MetricWeights, ModuliError, ModuliPoint};
use aai_moduli::rng::RandomStream;
use aai_moduli::simulator::{generate_runs, oracle_phi_exact, SimError, SyntheticAgent};
use aai_moduli::stats::{
    bootstrap_ci, concentration_bound, drift_stability_bound, worst_case_over_region, ConcentrationParams,
    DriftParams, StatsError,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("insufficient runs: {0}")]
    InsufficientRuns(String),
    #[error("net budget exhausted after {0} points")]
    Budget(usize),
    #[error("io error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io { .. } => 2,
            CliError::InsufficientRuns(_) => 3,
            CliError::Budget(_) => 4,
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_from!(BatteryError, FunctionalError, ModuliError, CertifyError, CoreError, SimError, serde_json::Error);

impl From<CanonicalError> for CliError {
    fn from(e: CanonicalError) -> Self {
        match e {
            CanonicalError::NoRuns(_) => CliError::InsufficientRuns(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Canonical(c) => c.into(),
            StatsError::EmptyRep => CliError::InsufficientRuns(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "aai", version, about = "Battery evaluation, certification and drift analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub battery: PathBuf,
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Stratify the PIT by drift label.
    #[arg(long)]
    pub per_drift: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FunctionalKind {
    Tractable,
    Geometric,
}

#[derive(Debug, Args, Clone)]
pub struct RegionArgs {
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dtau: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dray: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a battery run and write the report and family means.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "tractable")]
        functional: FunctionalKind,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0.9)]
        level: f64,
    },
    /// Certify a score threshold over a region through a covering net.
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long, default_value_t = 500)]
        panel_budget: usize,
    },
    /// Worst case over a robustness region and the drift bound.
    Drift {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        /// Relative resource-scale change.
        #[arg(long, default_value_t = 0.0)]
        dscale: f64,
        /// Base copula atoms (as written by `copula`).
        #[arg(long)]
        copula: Option<PathBuf>,
    },
    /// Core score, full score and their gap.
    Core {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        continuation: Option<PathBuf>,
    },
    /// Build and score a covering net.
    Panel {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        region: RegionArgs,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 500)]
        panel_budget: usize,
    },
    /// Generate run records from a synthetic agent.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Export the empirical copula.
    Copula {
        #[command(flatten)]
        common: Common,
    },
}

/// Functional configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalConfig {
    #[serde(flatten)]
    pub tractable: TractableConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<BTreeMap<Axis, AxisSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Lipschitz constant used by certification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub metric_weights: MetricWeights,
    #[serde(default = "default_delta_p")]
    pub delta_p: f64,
}

fn default_delta_p() -> f64 {
    0.05
}

impl FunctionalConfig {
    pub fn axis_config(&self) -> Result<AxisConfig, CliError> {
        match (&self.axes, self.epsilon) {
            (Some(axes), Some(epsilon)) => Ok(AxisConfig { axes: axes.clone(), epsilon }),
            _ => Err(CliError::Validation("geometric functional needs `axes` and `epsilon` in the config".into())),
        }
    }
}

/// Loaded inputs shared by the commands.
pub struct Inputs {
    pub battery: Battery,
    pub runs: Option<AgentRep>,
    pub config: Option<FunctionalConfig>,
    pub config_hash: String,
    pub seed: u64,
    pub pit: PitOptions,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io { path: path.to_path_buf(), msg: e.to_string() })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Inputs {
    pub fn load(common: &Common) -> Result<Self, CliError> {
        let battery_bytes = read(&common.battery)?;
        let battery = Battery::from_json(&String::from_utf8_lossy(&battery_bytes))?;
        let mut hasher = Sha256::new();
        hasher.update(&battery_bytes);
        hasher.update([0u8]);
        let config = match &common.config {
            Some(p) => {
                let bytes = read(p)?;
                hasher.update(&bytes);
                let cfg: FunctionalConfig = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?;
                cfg.tractable.validate(battery.d_r())?;
                Some(cfg)
            }
            None => None,
        };
        let runs = match &common.runs {
            Some(p) => {
                let f = fs::File::open(p).map_err(|e| CliError::Io { path: p.clone(), msg: e.to_string() })?;
                Some(load_runs(BufReader::new(f), &battery)?)
            }
            None => None,
        };
        Ok(Self {
            battery,
            runs,
            config,
            config_hash: hex(&hasher.finalize()),
            seed: common.seed,
            pit: PitOptions { per_drift: common.per_drift },
        })
    }

    pub fn runs(&self) -> Result<&AgentRep, CliError> {
        self.runs.as_ref().ok_or_else(|| CliError::Validation("--runs is required".into()))
    }

    pub fn config(&self) -> Result<&FunctionalConfig, CliError> {
        self.config.as_ref().ok_or_else(|| CliError::Validation("--config is required".into()))
    }

    pub fn stream(&self) -> RandomStream {
        RandomStream::new(self.seed)
    }

    pub fn canonical(&self) -> Result<CanonicalRep, CliError> {
        let rep = self.runs()?;
        if rep.total_runs() == 0 {
            return Err(CliError::InsufficientRuns("no accepted run records".into()));
        }
        Ok(canonicalize(&self.battery, rep, self.stream(), self.pit)?)
    }

    fn envelope(&self, command: &str, body: Value) -> Value {
        json!({
            "command": command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "report": body,
        })
    }
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io { path: out.to_path_buf(), msg: e.to_string() })?;
    let path = out.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io { path, msg: e.to_string() })
}

fn write_json(out: &Path, name: &str, v: &Value) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write(out, name, &s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub functional: FunctionalKind,
    pub bootstrap: usize,
    pub level: f64,
}

/// Score report body for `eval`. Split out so timing tests can call it
/// without touching the filesystem.
pub fn eval_report(inputs: &Inputs, opts: EvalOptions) -> Result<Value, CliError> {
    let cfg = inputs.config()?;
    let rep = inputs.runs()?;
    let canon = inputs.canonical()?;
    let battery = &inputs.battery;
    let tags: Vec<Option<Axis>> = battery.tasks().iter().map(|t| t.axis).collect();
    let mut report = match opts.functional {
        FunctionalKind::Tractable => tractable_phi(&canon, battery, &cfg.tractable)?,
        FunctionalKind::Geometric => geometric_aai(&canon, rep, &tags, &cfg.axis_config()?)?,
    };
    if opts.bootstrap > 0 {
        let pit = inputs.pit;
        let ci = match opts.functional {
            FunctionalKind::Tractable => bootstrap_ci(
                battery,
                rep,
                |b, r, s| Ok(tractable_phi(&canonicalize(b, r, s, pit)?, b, &cfg.tractable)?.value),
                opts.bootstrap,
                opts.level,
                inputs.stream(),
            )?,
            FunctionalKind::Geometric => {
                let axes = cfg.axis_config()?;
                bootstrap_ci(
                    battery,
                    rep,
                    |b, r, s| {
                        let tags: Vec<Option<Axis>> = b.tasks().iter().map(|t| t.axis).collect();
                        Ok(geometric_aai(&canonicalize(b, r, s, pit)?, r, &tags, &axes)?.value)
                    },
                    opts.bootstrap,
                    opts.level,
                    inputs.stream(),
                )?
            }
        };
        report.ci = Some(ci);
    }
    let n_min = canon.tasks.iter().map(|t| t.n()).min().unwrap_or(0);
    let tau_min = canon.tasks.iter().map(|t| t.tau).fold(f64::INFINITY, f64::min);
    let lipschitz = match cfg.tractable.psi {
        aai_moduli::functionals::UtilityFamily::Ramp => 1.0 / tau_min,
        psi => psi.lipschitz(0.0),
    };
    let concentration = if opts.functional == FunctionalKind::Tractable && lipschitz.is_finite() && n_min > 0 {
        let p = ConcentrationParams::with_defaults(battery, n_min, lipschitz, cfg.tractable.lambda, cfg.delta_p);
        json!({ "bound": concentration_bound(&p)?, "n": p.n, "lipschitz": p.lipschitz, "delta": p.delta, "C": p.c, "K": p.k })
    } else {
        Value::Null
    };
    Ok(json!({
        "functional": match opts.functional { FunctionalKind::Tractable => "tractable", FunctionalKind::Geometric => "geometric" },
        "phi": report.value,
        "ci": report.ci.map(|(a, b)| vec![a, b]),
        "level": opts.level,
        "bootstrap": opts.bootstrap,
        "score": report,
        "concentration": concentration,
        "per_drift": inputs.pit.per_drift,
        "rejected_records": rep.rejected(),
    }))
}

fn family_csv(body: &Value) -> String {
    let mut s = String::from("family,weight,mean\n");
    let score = &body["score"];
    if let (Some(means), Some(weights)) = (score["family_means"].as_object(), score["family_weights"].as_object()) {
        for (k, m) in means {
            s.push_str(&format!("{k},{},{}\n", weights[k], m));
        }
    }
    s
}

fn base_point(inputs: &Inputs, canon: &CanonicalRep, copula: Option<&Path>) -> Result<ModuliPoint, CliError> {
    let mut p = ModuliPoint::from_canonical(&inputs.battery, canon)?;
    if let Some(path) = copula {
        let m: DiscreteMeasure = serde_json::from_slice(&read(path)?)
            .map_err(|e| CliError::Validation(format!("copula {}: {e}", path.display())))?;
        if m.dim() != p.n_tasks() {
            return Err(CliError::Validation(format!("copula has {} coordinates, battery has {} tasks", m.dim(), p.n_tasks())));
        }
        p.copula = m;
    }
    Ok(p)
}

fn region(inputs: &Inputs, base: ModuliPoint, r: &RegionArgs) -> Result<RegionSpec, CliError> {
    let spec = RegionSpec { base, rho: r.rho, dtau: r.dtau, dray: r.dray, seed: inputs.seed };
    spec.validate()?;
    Ok(spec)
}

fn point_scorer(inputs: &Inputs, canon: &CanonicalRep) -> Result<PointScorer, CliError> {
    let scale: f64 = canon.mean_resources.iter().sum();
    Ok(PointScorer::new(&inputs.battery, inputs.config()?.tractable.clone(), scale)?)
}

/// Run one command. Returns the process exit code on success.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Eval { common, functional, bootstrap, level } => {
            let inputs = Inputs::load(&common)?;
            let body = eval_report(&inputs, EvalOptions { functional, bootstrap, level })?;
            write(&common.out, "family_means.csv", &family_csv(&body))?;
            write_json(&common.out, "report.json", &inputs.envelope("eval", body))?;
            Ok(0)
        }
        Command::Certify { common, region: r, delta, threshold, margin, panel_budget } => {
            let inputs = Inputs::load(&common)?;
            let cfg = inputs.config()?;
            let lipschitz = cfg
                .lipschitz
                .ok_or_else(|| CliError::Validation("certification needs `lipschitz` in the config".into()))?;
            let canon = inputs.canonical()?;
            let region = region(&inputs, base_point(&inputs, &canon, None)?, &r)?;
            let scorer = point_scorer(&inputs, &canon)?;
            let opts = NetOptions { budget: panel_budget, ..NetOptions::default() };
            let mut panel = build_delta_net(&region, cfg.metric_weights, delta, opts)?;
            if !panel.complete && panel.points.len() >= panel_budget {
                return Err(CliError::Budget(panel.points.len()));
            }
            score_panel(&mut panel, |p| scorer.score(p));
            let report = certify_panel(&panel, threshold, lipschitz, margin)?;
            let tau_min = region.base.tau.iter().fold(f64::INFINITY, |a, &t| a.min(t)) - r.dtau;
            let body = json!({
                "certification": report,
                "panel_size": panel.points.len(),
                "covering_radius": panel.covering_radius,
                "complete": panel.complete,
                "delta": delta,
                "lipschitz_computed": scorer.lipschitz(cfg.metric_weights, tau_min.max(0.0)),
                "region": { "rho": r.rho, "dtau": r.dtau, "dray": r.dray },
            });
            write_json(&common.out, "certify.json", &inputs.envelope("certify", body))?;
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::Drift { common, region: r, probes, dscale, copula } => {
            let inputs = Inputs::load(&common)?;
            let cfg = inputs.config()?;
            let canon = inputs.canonical()?;
            let base = base_point(&inputs, &canon, copula.as_deref())?;
            let region = region(&inputs, base, &r)?;
            let scorer = point_scorer(&inputs, &canon)?;
            let phi_base = scorer.score(&region.base);
            let worst = worst_case_over_region(&region, probes, |p| scorer.score(p))?;
            let tau_min = region.base.tau.iter().fold(f64::INFINITY, |a, &t| a.min(t)) - r.dtau;
            let w = cfg.metric_weights;
            let params = DriftParams {
                l_phi: scorer.lipschitz(w, tau_min.max(0.0)),
                alpha: w.alpha,
                beta: w.beta,
                gamma_w: w.gamma_w,
                eps: r.rho,
                dtau: r.dtau,
                b: cfg.tractable.cost.cap,
                dscale,
            };
            let bound = drift_stability_bound(&params, inputs.battery.n_tasks());
            let body = json!({
                "phi_base": phi_base,
                "worst_case": worst.min,
                "worst_index": worst.index,
                "drift_bound": bound,
                "drift_params": params,
                "probes": probes,
                "within_bound": phi_base - worst.min <= bound,
            });
            write_json(&common.out, "drift.json", &inputs.envelope("drift", body))?;
            Ok(0)
        }
        Command::Core { common, samples, continuation } => {
            let inputs = Inputs::load(&common)?;
            let cfg = inputs.config()?;
            let canon = inputs.canonical()?;
            let phi = tractable_phi(&canon, &inputs.battery, &cfg.tractable)?.value;
            let core = project_core(&canon)?;
            let scorer = CoreScorer::new(&inputs.battery, cfg.tractable.clone(), samples, inputs.stream().derive("core", 0));
            let reference = LiftReference::of(&canon);
            let phi_core = scorer.aai_core(&core, &reference)?;
            let mut body = json!({
                "aai": phi,
                "aai_core": phi_core,
                "gap": phi - phi_core,
                "samples": samples,
                "core": core,
            });
            if let Some(path) = continuation {
                #[derive(Deserialize)]
                struct ContinuationFile {
                    theta: Vec<f64>,
                    invariants: Vec<InvariantSpec>,
                }
                let file: ContinuationFile = serde_json::from_slice(&read(&path)?)
                    .map_err(|e| CliError::Validation(format!("continuation {}: {e}", path.display())))?;
                let sample = CoreScorer { stream: inputs.stream().derive("core-center", 0), ..scorer.clone() }
                    .lift(&core, &reference)?;
                let invariants = file
                    .invariants
                    .iter()
                    .map(|s| NonCoreInvariant::center(&s.name, &s.expression, &sample))
                    .collect::<Result<Vec<_>, _>>()?;
                let cont = ThetaContinuation { theta: file.theta, invariants };
                let value = continuation_value(&canon, &cont, &scorer)?;
                let (inf, sup) = envelopes(&canon, &cont.invariants, &scorer)?;
                body["continuation"] = json!({ "value": value, "theta": cont.theta, "envelope": [inf, sup] });
            }
            write_json(&common.out, "core.json", &inputs.envelope("core", body))?;
            Ok(0)
        }
        Command::Panel { common, region: r, delta, panel_budget } => {
            let inputs = Inputs::load(&common)?;
            let cfg = inputs.config()?;
            let canon = inputs.canonical()?;
            let region = region(&inputs, base_point(&inputs, &canon, None)?, &r)?;
            let scorer = point_scorer(&inputs, &canon)?;
            let opts = NetOptions { budget: panel_budget, ..NetOptions::default() };
            let mut panel = build_delta_net(&region, cfg.metric_weights, delta, opts)?;
            let exhausted = !panel.complete && panel.points.len() >= panel_budget;
            score_panel(&mut panel, |p| scorer.score(p));
            write_json(&common.out, "panel.json", &inputs.envelope("panel", serde_json::to_value(&panel)?))?;
            if exhausted {
                return Err(CliError::Budget(panel.points.len()));
            }
            Ok(0)
        }
        Command::Simulate { common, agent, n } => {
            let inputs = Inputs::load(&common)?;
            let agent: SyntheticAgent = serde_json::from_slice(&read(&agent)?)
                .map_err(|e| CliError::Validation(format!("agent: {e}")))?;
            let rep = generate_runs(&agent, &inputs.battery, n, inputs.stream())?;
            write(&common.out, "runs.jsonl", &rep.to_jsonl())?;
            let oracle = match &inputs.config {
                Some(cfg) => oracle_phi_exact(&agent, &inputs.battery, &cfg.tractable).ok(),
                None => None,
            };
            let body = json!({ "n": n, "records": rep.total_runs(), "oracle_phi": oracle });
            write_json(&common.out, "simulate.json", &inputs.envelope("simulate", body))?;
            Ok(0)
        }
        Command::Copula { common } => {
            let inputs = Inputs::load(&common)?;
            let canon = inputs.canonical()?;
            let m = empirical_copula(&canon)?;
            write(&common.out, "copula.json", &(m.to_json() + "\n"))?;
            Ok(0)
        }
    }
}
