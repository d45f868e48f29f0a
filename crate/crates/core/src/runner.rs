//! Executes scenarios and writes the trace CSV and the summary JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Scenario, ScenarioConfig};
use crate::error::{PikError, Result};
use crate::scenarios::{distance_to_y1, distance_to_y2, stability_probe, StabilityProbeReport, RANDOM_ALGORITHM};
use crate::system::KinematicSystem;
use crate::trajectory::{
    convergence_report, integrate, ConvergenceReport, Outcome, TrajectoryEvent, TrajectoryRecord, DEFAULT_ERROR_THRESHOLD,
};

/// Environment variable overriding the convergence threshold and the probe
/// limit tolerance.
pub const TOL_ENV: &str = "PIK_LAB_TOL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run,
    Probe,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: Mode,
    /// Base directory for relative and default output paths.
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    /// Replaces the default tolerances when set.
    pub tol: Option<f64>,
}

impl RunOptions {
    pub fn new(mode: Mode, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            out_dir: out_dir.into(),
            seed: None,
            tol: None,
        }
    }
}

/// Reads `PIK_LAB_TOL`; unset means `None`.
pub fn tol_from_env() -> Result<Option<f64>> {
    match std::env::var(TOL_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(Some(v)),
            _ => Err(PikError::config(TOL_ENV, format!("expected a positive number, got {s:?}"))),
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalState {
    pub t: f64,
    pub q: Vec<f64>,
    pub f: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatticeDistances {
    pub y1: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: Mode,
    pub config: ScenarioConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_algorithm: Option<&'static str>,
    pub outcome: Outcome,
    /// The CSV stops where integration failed.
    pub partial: bool,
    pub csv: String,
    pub convergence: ConvergenceReport,
    pub events: Vec<TrajectoryEvent>,
    #[serde(rename = "final")]
    pub final_state: FinalState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice_distance: Option<LatticeDistances>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<StabilityProbeReport>,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        matches!(self.outcome, Outcome::Completed)
    }
}

/// Column names of the trace CSV.
pub fn csv_header(n: usize, m: usize, l: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|i| format!("q{i}")));
    h.extend((0..n).map(|i| format!("u{i}")));
    h.extend((0..m).map(|i| format!("e{i}")));
    for name in ["phi", "eta", "rho", "gamma"] {
        h.extend((1..=l).map(|a| format!("{name}{a}")));
    }
    h.push("detC".into());
    h.extend((1..=m).map(|i| format!("c_diag{i}")));
    h.extend((1..=l).map(|a| format!("sigma_min_psiA{a}")));
    h
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trace_csv(record: &TrajectoryRecord, path: &Path) -> Result<()> {
    let m: usize = record.task_dims.iter().sum();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let io = |e: csv::Error| PikError::Io(e.into());
    w.write_record(csv_header(record.n, m, record.task_dims.len())).map_err(io)?;
    for s in &record.steps {
        let mut row = vec![fmt(s.t)];
        row.extend(s.q.iter().chain(s.u.iter()).chain(s.e.iter()).map(|v| fmt(*v)));
        for v in [&s.phi, &s.eta, &s.rho, &s.gamma] {
            row.extend(v.iter().map(|x| fmt(*x)));
        }
        row.push(fmt(s.det_c));
        row.extend(s.diag_c.iter().chain(&s.sigma_min_psi_a).map(|x| fmt(*x)));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn resolve(out_dir: &Path, given: Option<&PathBuf>, default: String) -> PathBuf {
    match given {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => out_dir.join(p),
        None => out_dir.join(default),
    }
}

/// Runs one scenario, writes both artifacts and returns the summary.
///
/// Configuration errors are returned as `Err`; an integration failure is not
/// an error here: the partial trace is written and `outcome` reports it.
pub fn run_scenario(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunSummary> {
    let scenario = config.build(opts.seed)?;
    if opts.mode == Mode::Probe && scenario.probe.is_none() {
        return Err(PikError::config("probe", "probe mode needs a `probe` section"));
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let csv_path = resolve(&opts.out_dir, config.outputs.csv.as_ref(), format!("{}.csv", scenario.name));
    let json_path = resolve(&opts.out_dir, config.outputs.json.as_ref(), format!("{}.json", scenario.name));
    for p in [&csv_path, &json_path] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }

    let summary = execute(config, &scenario, opts, &csv_path)?;
    let mut f = BufWriter::new(File::create(&json_path)?);
    serde_json::to_writer_pretty(&mut f, &summary).map_err(|e| PikError::Io(e.into()))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(summary)
}

fn execute(config: &ScenarioConfig, sc: &Scenario, opts: &RunOptions, csv_path: &Path) -> Result<RunSummary> {
    let record = integrate(&sc.system, &sc.solver, &sc.integrator, sc.t0, &sc.q0)?;
    write_trace_csv(&record, csv_path)?;
    let threshold = opts.tol.unwrap_or(DEFAULT_ERROR_THRESHOLD);
    let convergence = convergence_report(&record, threshold);
    let last = record.last();
    let (f, _) = sc.system.forward_kinematics(last.t, &last.q)?;
    let final_state = FinalState {
        t: last.t,
        q: last.q.iter().copied().collect(),
        f: f.iter().copied().collect(),
        e: last.e.iter().copied().collect(),
    };
    let lattice_distance = sc.two_link.map(|_| LatticeDistances {
        y1: distance_to_y1(&last.q),
        y2: distance_to_y2(&last.q),
    });
    let probe = match (&opts.mode, &sc.probe) {
        (Mode::Probe, Some((q_inf, po))) => {
            let mut po = po.clone();
            if let Some(t) = opts.tol {
                po.limit_tol = t;
            }
            Some(stability_probe(&sc.system, &sc.solver, q_inf, &po)?)
        }
        _ => None,
    };
    debug_assert_eq!(sc.system.joint_dim(), record.n);
    Ok(RunSummary {
        name: sc.name.clone(),
        mode: opts.mode,
        config: config.clone(),
        seed: sc.random_seed.or(sc.probe.as_ref().map(|p| p.1.seed)),
        random_algorithm: sc.random_seed.map(|_| RANDOM_ALGORITHM),
        partial: !record.is_complete(),
        outcome: record.outcome.clone(),
        csv: csv_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        convergence,
        events: record.events.clone(),
        final_state,
        lattice_distance,
        probe,
    })
}

/// Machine-readable error report for stderr.
pub fn error_json(err: &PikError) -> String {
    let mut v = serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
    });
    if let PikError::Config { field, .. } = err {
        v["field"] = serde_json::json!(field);
    }
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::zero_reference_config;

    #[test]
    fn header_follows_column_contract() {
        let h = csv_header(2, 2, 2);
        assert_eq!(
            h.join(","),
            "t,q0,q1,u0,u1,e0,e1,phi1,phi2,eta1,eta2,rho1,rho2,gamma1,gamma2,detC,c_diag1,c_diag2,sigma_min_psiA1,sigma_min_psiA2"
        );
    }

    #[test]
    fn zero_reference_keeps_q_constant() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_scenario(&zero_reference_config(), &RunOptions::new(Mode::Run, dir.path())).unwrap();
        assert!(s.succeeded());
        let mut rd = csv::Reader::from_path(dir.path().join("twolink_zero_reference.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 101);
        for r in &rows {
            assert_eq!(&r[1], &rows[0][1]);
            assert_eq!(&r[2], &rows[0][2]);
        }
        assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.3);
    }

    #[test]
    fn error_json_names_field() {
        let e = PikError::config("solver.alpha", "bad");
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["field"], "solver.alpha");
        assert_eq!(v["error"], "config");
    }
}
