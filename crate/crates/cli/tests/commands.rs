use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(set: &str, file: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(set).join(file).to_string_lossy().into_owned()
}

fn aai(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aai")).args(args).output().expect("binary runs")
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn example<'a>(cmd: &'a str, out: &'a str) -> Vec<String> {
    let mut v: Vec<String> = vec![cmd.into()];
    for (flag, file) in [("--battery", "battery.json"), ("--runs", "runs.jsonl"), ("--config", "config.json")] {
        v.push(flag.into());
        v.push(data("example", file));
    }
    v.extend(["--seed".into(), "5".into(), "--out".into(), out.into()]);
    v
}

fn run(args: &[String]) -> Output {
    aai(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn eval_writes_report_and_family_means() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let mut args = example("eval", &out);
    args.extend(["--bootstrap".into(), "50".into()]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(dir.path().join("report.json"));
    assert_eq!(r["command"], "eval");
    assert_eq!(r["seed"], 5);
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    let body = &r["report"];
    let phi = body["phi"].as_f64().unwrap();
    let ci = body["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= ci[1].as_f64().unwrap());
    assert!(body["concentration"]["bound"].as_f64().unwrap() > 0.0);
    let score = &body["score"];
    let recomposed = score["family_means"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, m)| m.as_f64().unwrap() * score["family_weights"][k].as_f64().unwrap())
        .sum::<f64>()
        - score["dispersion_penalty"].as_f64().unwrap()
        - score["cost_penalty"].as_f64().unwrap();
    assert!((recomposed - phi).abs() < 1e-12);
    let csv = fs::read_to_string(dir.path().join("family_means.csv")).unwrap();
    assert!(csv.starts_with("family,weight,mean\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn eval_dispatches_geometric_and_per_drift() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("geo").to_string_lossy().into_owned();
    let mut args = example("eval", &out);
    args.extend(["--functional", "geometric", "--bootstrap", "0"].map(String::from));
    assert_eq!(run(&args).status.code(), Some(0));
    let r = json(dir.path().join("geo/report.json"));
    assert_eq!(r["report"]["functional"], "geometric");
    let axes = r["report"]["score"]["axis_values"].as_object().unwrap();
    assert!(axes.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));

    let pooled_out = dir.path().join("pooled").to_string_lossy().into_owned();
    let strat_out = dir.path().join("strat").to_string_lossy().into_owned();
    let mut pooled = example("eval", &pooled_out);
    pooled.extend(["--bootstrap".into(), "0".into()]);
    let mut strat = example("eval", &strat_out);
    strat.extend(["--bootstrap".into(), "0".into(), "--per-drift".into()]);
    assert_eq!(run(&pooled).status.code(), Some(0));
    assert_eq!(run(&strat).status.code(), Some(0));
    let (a, b) = (json(dir.path().join("pooled/report.json")), json(dir.path().join("strat/report.json")));
    assert_eq!(b["report"]["per_drift"], true);
    assert_ne!(a["report"]["phi"], b["report"]["phi"]);
}

#[test]
fn core_reports_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let mut args = example("core", &out);
    args.extend(["--samples".into(), "5000".into()]);
    assert_eq!(run(&args).status.code(), Some(0));
    let r = &json(dir.path().join("core.json"))["report"];
    let (aai, core, gap) = (r["aai"].as_f64().unwrap(), r["aai_core"].as_f64().unwrap(), r["gap"].as_f64().unwrap());
    assert!((aai - core - gap).abs() < 1e-12);
    let cells = r["core"]["cells"].as_object().unwrap();
    assert!((cells.values().map(|v| v.as_f64().unwrap()).sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn copula_feeds_drift() {
    let dir = tempfile::tempdir().unwrap();
    let cop_out = dir.path().join("cop").to_string_lossy().into_owned();
    assert_eq!(run(&example("copula", &cop_out)).status.code(), Some(0));
    let copula = dir.path().join("cop/copula.json").to_string_lossy().into_owned();
    let drift_out = dir.path().join("drift").to_string_lossy().into_owned();
    let mut args = example("drift", &drift_out);
    args.extend(["--copula", &copula, "--rho", "0.02", "--dtau", "0.02", "--probes", "200", "--dscale", "0.1"].map(String::from));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = &json(dir.path().join("drift/drift.json"))["report"];
    assert_eq!(r["within_bound"], true);
    assert!(r["worst_case"].as_f64().unwrap() <= r["phi_base"].as_f64().unwrap());
}

#[test]
fn simulate_then_eval_lands_near_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let sim_out = dir.path().join("sim").to_string_lossy().into_owned();
    let o = aai(&[
        "simulate",
        "--battery",
        &data("synthetic", "battery.json"),
        "--config",
        &data("synthetic", "config.json"),
        "--agent",
        &data("synthetic", "agent.json"),
        "--n",
        "400",
        "--seed",
        "9",
        "--out",
        &sim_out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let oracle = json(dir.path().join("sim/simulate.json"))["report"]["oracle_phi"].as_f64().unwrap();
    let runs = dir.path().join("sim/runs.jsonl").to_string_lossy().into_owned();
    assert_eq!(fs::read_to_string(&runs).unwrap().lines().count(), 400);
    let eval_out = dir.path().join("eval").to_string_lossy().into_owned();
    let o = aai(&[
        "eval",
        "--battery",
        &data("synthetic", "battery.json"),
        "--runs",
        &runs,
        "--config",
        &data("synthetic", "config.json"),
        "--bootstrap",
        "0",
        "--out",
        &eval_out,
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r = &json(dir.path().join("eval/report.json"))["report"];
    let bound = r["concentration"]["bound"].as_f64().unwrap();
    assert!((r["phi"].as_f64().unwrap() - oracle).abs() <= bound);
}

fn synthetic(cmd: &str, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd.to_string(),
        "--battery".into(),
        data("synthetic", "battery.json"),
        "--runs".into(),
        data("synthetic", "runs.jsonl"),
        "--config".into(),
        data("synthetic", "config.json"),
        "--out".into(),
        out.into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    run(&args)
}

#[test]
fn certify_passes_and_fails_by_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok").to_string_lossy().into_owned();
    let o = synthetic("certify", &ok, &["--dtau", "0.05", "--delta", "0.02", "--threshold", "0.3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = &json(dir.path().join("ok/certify.json"))["report"];
    assert_eq!(r["certification"]["pass"], true);
    assert_eq!(r["complete"], true);

    let degenerate = dir.path().join("degenerate").to_string_lossy().into_owned();
    assert_eq!(synthetic("certify", &degenerate, &["--delta", "0.02", "--threshold", "0.3"]).status.code(), Some(0));
    assert_eq!(json(dir.path().join("degenerate/certify.json"))["report"]["panel_size"], 1);

    let fail = dir.path().join("fail").to_string_lossy().into_owned();
    assert_eq!(synthetic("certify", &fail, &["--dtau", "0.05", "--delta", "0.02", "--threshold", "0.95"]).status.code(), Some(1));
}

#[test]
fn panel_budget_exhaustion_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let o = synthetic("panel", &out, &["--dtau", "0.2", "--delta", "0.01", "--panel-budget", "5"]);
    assert_eq!(o.status.code(), Some(4));
    let o = synthetic("certify", &out, &["--dtau", "0.2", "--delta", "0.01", "--threshold", "0.1", "--panel-budget", "5"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"psi": {"shape": "ramp"}, "lambda": 0.1, "gamma": 0.1, "cost": {"weights": [1, 2], "cap": 1}}"#).unwrap();
    let out = dir.path().join("o").to_string_lossy().into_owned();
    let o = aai(&[
        "eval",
        "--battery",
        &data("synthetic", "battery.json"),
        "--runs",
        &data("synthetic", "runs.jsonl"),
        "--config",
        &bad_cfg.to_string_lossy(),
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let no_l = dir.path().join("nol.json");
    fs::write(&no_l, r#"{"psi": {"shape": "ramp"}, "lambda": 0.0, "gamma": 0.0, "cost": {"weights": [0], "cap": 1}}"#).unwrap();
    let o = aai(&[
        "certify",
        "--battery",
        &data("synthetic", "battery.json"),
        "--runs",
        &data("synthetic", "runs.jsonl"),
        "--config",
        &no_l.to_string_lossy(),
        "--out",
        &out,
        "--delta",
        "0.05",
        "--threshold",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = aai(&["eval", "--battery", "/nonexistent/battery.json", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_runs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("o").to_string_lossy().into_owned();
    let o = aai(&[
        "eval",
        "--battery",
        &data("synthetic", "battery.json"),
        "--runs",
        &empty.to_string_lossy(),
        "--config",
        &data("synthetic", "config.json"),
        "--out",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(3));
}
