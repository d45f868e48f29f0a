use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pik_core::config::{parse_config, presets, random_config, ScenarioConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pik-lab"));
    c.env_remove("PIK_LAB_TOL");
    c
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.cfg"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out-dir").arg(out).output().unwrap()
}

fn write_cfg(dir: &Path, name: &str, cfg: &ScenarioConfig) -> PathBuf {
    let p = dir.join(format!("{name}.cfg"));
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn bundled_configs_match_presets() {
    for p in presets() {
        let name = p.name.clone().unwrap();
        let text = std::fs::read_to_string(bundled(&name)).unwrap();
        assert_eq!(parse_config(&text).unwrap(), p, "{name}");
    }
}

#[test]
fn case2_runs_and_converges() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", bundled("twolink_case2").to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&dir.path().join("twolink_case2.json"));
    for t in s["convergence"]["tasks"].as_array().unwrap() {
        assert!(t["final_phi"].as_f64().unwrap() < 1e-3);
    }
    assert_eq!(s["outcome"]["status"], "completed");
    assert_eq!(s["partial"], false);
    assert!(s["lattice_distance"]["y1"].as_f64().unwrap() > 0.1);
}

#[test]
fn alpha_five_is_rejected_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = random_config();
    cfg.solver.alpha = 5;
    let p = write_cfg(dir.path(), "bad", &cfg);
    let o = run(&["run", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["field"], "solver.alpha");
    assert_eq!(e["error"], "config");
}

#[test]
fn schema_violations_report_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(random_config()).unwrap();
    v["integrator"]["stepsize"] = serde_json::json!(0.1);
    let p = dir.path().join("typo.cfg");
    std::fs::write(&p, v.to_string()).unwrap();
    let o = run(&["run", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["field"], "integrator.stepsize");

    let o = run(&["run", dir.path().join("missing.cfg").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
}

#[test]
fn zero_reference_keeps_q_constant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", bundled("twolink_zero_reference").to_str().unwrap()], dir.path());
    assert!(o.status.success());
    let mut rd = csv::Reader::from_path(dir.path().join("twolink_zero_reference.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..5], &["t", "q0", "q1", "u0", "u1"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert!(rows.len() > 10);
    for r in &rows {
        assert_eq!((&r[1], &r[2]), (&rows[0][1], &rows[0][2]));
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = bundled("random_tracking");
    for d in [&a, &b] {
        let o = run(&["run", cfg.to_str().unwrap(), "--seed", "5"], d.path());
        assert!(o.status.success());
    }
    for f in ["random_tracking.csv", "random_tracking.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let s = json(&a.path().join("random_tracking.json"));
    assert_eq!(s["seed"], 5);
    assert!(s["random_algorithm"].as_str().unwrap().contains("ChaCha8"));
}

#[test]
fn batch_mode_isolates_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "run",
            "--jobs",
            "2",
            bundled("twolink_zero_reference").to_str().unwrap(),
            bundled("random_tracking").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(dir.path().join("twolink_zero_reference/twolink_zero_reference.json").exists());
    assert!(dir.path().join("random_tracking/random_tracking.csv").exists());
}

#[test]
fn probe_reports_a_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["probe", bundled("twolink_probe").to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&dir.path().join("twolink_probe.json"));
    assert_eq!(s["probe"]["verdict"], "asymptotically-stable-evidence");
    assert_eq!(s["probe"]["samples"].as_array().unwrap().len(), 32);

    let o = run(&["probe", bundled("twolink_case2").to_str().unwrap()], dir.path());
    assert_eq!(stderr_json(&o)["field"], "probe");
}

#[test]
fn tolerance_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bundled("twolink_zero_reference");
    let o = bin()
        .args(["run", cfg.to_str().unwrap(), "--out-dir"])
        .arg(dir.path())
        .env("PIK_LAB_TOL", "0.25")
        .output()
        .unwrap();
    assert!(o.status.success());
    let s = json(&dir.path().join("twolink_zero_reference.json"));
    assert_eq!(s["convergence"]["error_threshold"], 0.25);

    let o = bin()
        .args(["run", cfg.to_str().unwrap(), "--out-dir"])
        .arg(dir.path())
        .env("PIK_LAB_TOL", "loose")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["field"], "PIK_LAB_TOL");
}

#[test]
fn blow_up_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = random_config();
    cfg.gains = vec![1e6, 1e6];
    cfg.integrator.step = 0.5;
    cfg.integrator.singularity_guard = false;
    let p = write_cfg(dir.path(), "blowup", &cfg);
    let o = run(&["run", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stderr_json(&o)["error"], "integration");
    let s = json(&dir.path().join("random_tracking.json"));
    assert_eq!(s["partial"], true);
    assert_eq!(s["outcome"]["status"], "failed");
    assert!(dir.path().join("random_tracking.csv").exists());
}
