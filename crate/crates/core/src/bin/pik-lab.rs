use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pik_core::acceptance::{run_suite, SuiteOptions};
use pik_core::config::load_config;
use pik_core::runner::{error_json, run_scenario, tol_from_env, Mode, RunOptions, RunSummary};
use pik_core::PikError;

/// Scenario runner for prioritized inverse kinematics experiments.
#[derive(Parser)]
#[command(name = "pik-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one or more scenarios and write trace CSV + summary JSON.
    Run(ScenarioArgs),
    /// Like `run`, plus the stability probe of the config's `probe` section.
    Probe(ScenarioArgs),
    /// Run the acceptance suite; exit 0 iff every criterion passes.
    Verify {
        /// Where to write `acceptance.json`.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    /// Config files (JSON).
    #[arg(required = true)]
    configs: Vec<PathBuf>,
    /// Scenarios run in parallel; each gets its own subdirectory of the output directory.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overrides the random-system and probe seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

const EXIT_FAILED: u8 = 1;
const EXIT_INVALID: u8 = 2;

fn report_error(config: Option<&Path>, err: &PikError) {
    let mut v: serde_json::Value = serde_json::from_str(&error_json(err)).unwrap();
    if let Some(p) = config {
        v["config"] = serde_json::json!(p.display().to_string());
    }
    eprintln!("{v}");
}

fn run_one(path: &Path, opts: &RunOptions) -> std::result::Result<RunSummary, PikError> {
    let cfg = load_config(path)?;
    run_scenario(&cfg, opts)
}

fn scenarios(mode: Mode, args: ScenarioArgs) -> ExitCode {
    let tol = match tol_from_env() {
        Ok(t) => t,
        Err(e) => {
            report_error(None, &e);
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let batch = args.configs.len() > 1;
    let opts_for = |path: &Path| {
        let out_dir = if batch {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            args.out_dir.join(stem)
        } else {
            args.out_dir.clone()
        };
        RunOptions {
            mode,
            out_dir,
            seed: args.seed,
            tol,
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            report_error(None, &PikError::config("--jobs", e.to_string()));
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let results: Vec<_> = pool.install(|| {
        args.configs
            .par_iter()
            .map(|p| (p, run_one(p, &opts_for(p))))
            .collect()
    });

    let mut code = 0u8;
    for (path, res) in results {
        match res {
            Ok(s) => {
                let verdict = s.probe.as_ref().map(|p| format!(" verdict={:?}", p.verdict)).unwrap_or_default();
                let phi: Vec<String> = s.convergence.tasks.iter().map(|t| format!("{:.3e}", t.final_phi)).collect();
                println!(
                    "{}: {} t={} final_phi=[{}]{}",
                    path.display(),
                    if s.succeeded() { "ok" } else { "failed" },
                    s.final_state.t,
                    phi.join(", "),
                    verdict
                );
                if !s.succeeded() {
                    let err = match &s.outcome {
                        pik_core::trajectory::Outcome::Failed { t, message, .. } => PikError::Integration {
                            t: *t,
                            message: message.clone(),
                        },
                        _ => unreachable!(),
                    };
                    report_error(Some(path), &err);
                    code = code.max(EXIT_FAILED);
                }
            }
            Err(e) => {
                report_error(Some(path), &e);
                let c = if matches!(e, PikError::Config { .. }) { EXIT_INVALID } else { EXIT_FAILED };
                code = code.max(c);
            }
        }
    }
    ExitCode::from(code)
}

fn verify(out_dir: &Path) -> ExitCode {
    let report = run_suite(&SuiteOptions::default(), |r| println!("{}", r.line()));
    let write = std::fs::create_dir_all(out_dir).and_then(|_| {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out_dir.join("acceptance.json"), text + "\n")
    });
    if let Err(e) = write {
        report_error(None, &PikError::Io(e));
        return ExitCode::from(EXIT_FAILED);
    }
    let passed = report.criteria.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", report.criteria.len());
    if report.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(a) => scenarios(Mode::Run, a),
        Command::Probe(a) => scenarios(Mode::Probe, a),
        Command::Verify { out_dir } => verify(&out_dir),
    }
}
