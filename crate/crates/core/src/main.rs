use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use morseflow::perturb::DemoParams;
use morseflow::report::{run_perturb, run_scenario, validation_failure, Report, RunOptions, Stage};
use morseflow::scenario::Scenario;

/// Morse-Smale complexes, twisted cochains and the integration map on
/// closed surfaces.
#[derive(Debug, Parser)]
#[command(name = "morseflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, global = true)]
    scenario: Option<String>,

    /// Directory for report.json and the CSV files; the report goes to
    /// stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides the scenario's flow tolerance.
    #[arg(long = "flow-tol", global = true)]
    flow_tol: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Critical points, indices and the critical-value ladder.
    Critical,
    /// Connecting trajectories between adjacent indices.
    Connections,
    /// Geometric cochain complex, twisted complexes and strata.
    Complex,
    /// Betti numbers (same pipeline as `complex`).
    Betti,
    /// Integrals of a form over unstable manifolds.
    Integrate {
        /// Form from the scenario's catalog; the whole battery when omitted.
        #[arg(long)]
        form: Option<String>,
        /// Expected degree of the form.
        #[arg(long)]
        degree: Option<usize>,
        /// Quadrature nodes per axis.
        #[arg(long)]
        quadrature: Option<usize>,
    },
    /// Local perturbation in the model box with a transversality certificate.
    PerturbDemo {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        s0: f64,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Every scenario stage, including the chain-map battery.
    All,
}

fn load_scenario(arg: Option<&str>, flow_tol: Option<f64>) -> morseflow::Result<Scenario> {
    let arg = arg.ok_or_else(|| morseflow::Error::InvalidScenario("--scenario is required".into()))?;
    let path = Path::new(arg);
    let sc = if path.exists() { Scenario::load(path)? } else { Scenario::builtin(arg)? };
    match flow_tol {
        Some(tol) => sc.with_flow_tol(tol),
        None => Ok(sc),
    }
}

fn write_outputs(report: &Report, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (rel, text) in &report.sidecars {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let path = out.join("report.json");
    fs::write(&path, report.render()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let (stage, opts) = match &cli.command {
        Command::Critical => (Stage::Critical, RunOptions::default()),
        Command::Connections => (Stage::Connections, RunOptions::default()),
        Command::Complex => (Stage::Complex, RunOptions::default()),
        Command::Betti => (Stage::Betti, RunOptions::default()),
        Command::Integrate { form, degree, quadrature } => (
            Stage::Integrate,
            RunOptions { form: form.clone(), degree: *degree, quadrature: *quadrature, ..Default::default() },
        ),
        Command::PerturbDemo { .. } => (Stage::PerturbDemo, RunOptions::default()),
        Command::All => (Stage::All, RunOptions::default()),
    };
    let opts = RunOptions { seed: cli.seed, ..opts };
    let report = match cli.command {
        Command::PerturbDemo { k, n, rho, s0, eta, alpha } => {
            run_perturb(DemoParams { k, n, rho, s0, eta, alpha, seed: cli.seed })
        }
        _ => match load_scenario(cli.scenario.as_deref(), cli.flow_tol) {
            Ok(sc) => run_scenario(stage, &sc, &opts),
            Err(e) => validation_failure(stage, cli.seed, &e),
        },
    };
    for err in report.json["errors"].as_array().into_iter().flatten() {
        log::error!("{}: {}", err["kind"].as_str().unwrap_or("?"), err["message"].as_str().unwrap_or(""));
    }
    match &cli.out {
        Some(out) => write_outputs(&report, out)?,
        None => print!("{}", report.render()),
    }
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MORSEFLOW_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
