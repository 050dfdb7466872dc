use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("UF_LOG", "error")
        .output()
        .expect("binary runs")
}

fn run_scenario(cmd: &str, name: &str, extra: &[&str]) -> (TempDir, Output) {
    let dir = TempDir::new().unwrap();
    let mut args = vec![cmd];
    args.extend_from_slice(extra);
    let out = run(&args, &scenario(name), dir.path());
    (dir, out)
}

fn json(dir: &TempDir, file: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.path().join(file)).unwrap()).unwrap()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

#[test]
fn ball_trajectory_marks_first_impact() {
    let (dir, out) = run_scenario("simulate", "ball", &[]);
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_path(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["t", "q_0", "qd_0", "mode_bitmask", "event"]);
    let first = rdr
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[4] == "1")
        .expect("an event row");
    let t: f64 = first[0].parse().unwrap();
    assert!((t - 1.0).abs() < 1e-9, "first impact at {t}");
    let events = json(&dir, "events.json");
    assert_eq!(events["termination"]["kind"], "time_reached");
    assert!(!events["events"].as_array().unwrap().is_empty());
}

#[test]
fn resting_ball_records_no_events() {
    let (dir, out) = run_scenario("simulate", "resting_ball", &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&dir, "events.json")["events"].as_array().unwrap().is_empty());
}

#[test]
fn grazing_exits_3_and_names_constraint() {
    let (dir, out) = run_scenario("simulate", "ball_grazing", &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constraint 1"));
    let t = &json(&dir, "events.json")["termination"];
    assert_eq!(t["kind"], "grazing");
    assert_eq!(t["constraint"], 1);
}

#[test]
fn zeno_exits_2_and_names_constraint() {
    let (dir, out) = run_scenario("simulate", "ball_zeno", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constraint 0"));
    let t = &json(&dir, "events.json")["termination"];
    assert_eq!(t["kind"], "zeno_guard");
    assert_eq!(t["constraint"], 0);
}

#[test]
fn schema_errors_exit_64() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"system":{"name":"ball"},"initial":{"q":[1],"qd":[0]},"bogus":1}"#).unwrap();
    assert_eq!(run(&["simulate"], &bad, dir.path()).status.code(), Some(64));
    std::fs::write(&bad, r#"{"system":{"name":"no_such_system"},"initial":{"q":[1],"qd":[0]}}"#).unwrap();
    assert_eq!(run(&["simulate"], &bad, dir.path()).status.code(), Some(64));
    std::fs::write(&bad, r#"{"system":{"name":"ball"},"initial":{"q":[1,2],"qd":[0]}}"#).unwrap();
    assert_eq!(run(&["simulate"], &bad, dir.path()).status.code(), Some(64));
    let out = Command::new(env!("CARGO_BIN_EXE_uniflow")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(64));
}

#[test]
fn simultaneous_corner_has_two_validated_selections() {
    let (dir, out) = run_scenario("bderiv", "corner_simultaneous", &["--validate"]);
    assert_eq!(out.status.code(), Some(0));
    let b = json(&dir, "bderiv.json");
    assert!(b["selections"].as_array().unwrap().len() >= 2);
    assert!(f(&b["max_validation_residual"]) < 1e-5);
    assert_eq!(b["orthogonality_violation"], false);
}

#[test]
fn free_flight_has_one_selection() {
    let (dir, out) = run_scenario("bderiv", "free_flight", &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&dir, "bderiv.json")["selections"].as_array().unwrap().len(), 1);
}

#[test]
fn oblique_corner_flags_orthogonality() {
    let (dir, out) = run_scenario("bderiv", "corner_oblique", &[]);
    assert_eq!(out.status.code(), Some(0));
    let b = json(&dir, "bderiv.json");
    assert_eq!(b["orthogonality_violation"], true);
    assert!(!b["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn ball_apex_return_map_is_stable() {
    let (dir, out) = run_scenario("analyze", "ball_apex", &[]);
    assert_eq!(out.status.code(), Some(0));
    let p = &json(&dir, "report.json")["poincare"];
    assert!((f(&p["selections"][0][0][0]) - 0.25).abs() < 1e-6);
    assert!((f(&p["period"]) - 1.5).abs() < 1e-6);
    assert_eq!(p["stability"]["verdict"], "STABLE");
}

#[test]
fn piecewise_linear_verdicts() {
    let (dir, _) = run_scenario("analyze", "pl_unstable", &[]);
    let r = &json(&dir, "report.json")["pl_map"];
    assert_eq!(r["verdict"], "UNSTABLE");
    assert!((f(&r["witness"]["eigenvalue"]) - 2.0).abs() < 1e-9);

    let (dir, _) = run_scenario("analyze", "pl_inconclusive", &[]);
    let c = &json(&dir, "report.json")["pl_map"]["contraction"];
    assert_eq!(c["verdict"], "INCONCLUSIVE");
    for n in c["norms"].as_array().unwrap() {
        assert!((f(n) - 1.2).abs() < 1e-12);
    }
}

#[test]
fn ball_inputs_are_controllable() {
    let (dir, out) = run_scenario("analyze", "ball_controllability", &[]);
    assert_eq!(out.status.code(), Some(0));
    let c = &json(&dir, "report.json")["controllability"];
    assert_eq!(c["verdict"], "LOCALLY_CONTROLLABLE");
    // Dropped from rest at h = 1/2: impact at t1 = (2h/g)^(1/2) with speed
    // (2gh)^(1/2), then q(t) = γ v τ - gτ²/2, q̇ = γ v - gτ with τ = t - t1.
    let (g, gamma, h, t) = (1.0f64, 0.5f64, 0.5f64, 1.5f64);
    let t1 = (2.0 * h / g).sqrt();
    let v = (2.0 * g * h).sqrt();
    let tau = t - t1;
    let (dt1_dg, dv_dg) = (-t1 / (2.0 * g), v / (2.0 * g));
    let dq_dg = gamma * dv_dg * tau - gamma * v * dt1_dg - tau * tau / 2.0 + g * tau * dt1_dg;
    let dqd_dg = gamma * dv_dg - tau + g * dt1_dg;
    let (dq_dgamma, dqd_dgamma) = (v * tau, v);
    let det = dq_dg * dqd_dgamma - dq_dgamma * dqd_dg;
    let sub = &c["subblocks"][0];
    assert!((f(&sub[0][0]) - dq_dg).abs() < 1e-6 && (f(&sub[1][0]) - dqd_dg).abs() < 1e-6);
    assert!((f(&sub[0][1]) - dq_dgamma).abs() < 1e-6 && (f(&sub[1][1]) - dqd_dgamma).abs() < 1e-6);
    assert!((f(&c["determinants"][0]) - det).abs() < 1e-6);
}

#[test]
fn dumped_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let dump = Command::new(env!("CARGO_BIN_EXE_uniflow"))
        .args(["simulate", "--dump-config", "--config"])
        .arg(scenario("corner_simultaneous"))
        .output()
        .unwrap();
    assert_eq!(dump.status.code(), Some(0));
    let resolved = dir.path().join("resolved.json");
    std::fs::write(&resolved, &dump.stdout).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["simulate"], &scenario("corner_simultaneous"), &a).status.code(), Some(0));
    assert_eq!(run(&["simulate"], &resolved, &b).status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("trajectory.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn random_directions_follow_the_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("random.json");
    std::fs::write(
        &cfg,
        r#"{"system":{"name":"corner_orthogonal","params":{"gamma":0.5}},
            "initial":{"q":[0.5,0.5],"qd":[-1.0,-1.0]},
            "sim":{"t_final":1.0},
            "derivative":{"directions":"random","count":6}}"#,
    )
    .unwrap();
    let go = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        assert_eq!(run(&["bderiv", "--seed", seed], &cfg, &out).status.code(), Some(0));
        std::fs::read(out.join("bderiv.json")).unwrap()
    };
    assert_eq!(go("7", "a"), go("7", "b"));
    assert_ne!(go("7", "a"), go("8", "c"));
}

#[test]
fn list_systems_names_the_registry() {
    let out = Command::new(env!("CARGO_BIN_EXE_uniflow")).arg("list-systems").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["ball", "ball_ceiling", "corner_orthogonal", "corner_oblique", "hopper", "trotter"] {
        assert!(text.lines().any(|l| l.split_whitespace().next() == Some(name)), "{name} missing");
    }
}
