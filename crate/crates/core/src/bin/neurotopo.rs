#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurotopo::geometry::{self, ManifoldSpec};
use neurotopo::harness::{self, RunConfig};
use neurotopo::particles::ParticleCollection;
use neurotopo::topology::{measure_betti, ScaleMode, TopologyOptions};
use neurotopo::Error;

#[derive(Parser)]
#[command(
    name = "neurotopo",
    version,
    about = "Topology of neuron point clouds under training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a JSON run config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Betti numbers of a point-cloud CSV.
    Topology(TopologyArgs),
    /// Trajectory checks over a run directory, as JSON.
    Check {
        #[arg(long)]
        run: PathBuf,
    },
    /// Sample a manifold from a JSON spec into a point-cloud CSV.
    Sample {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top Hessian eigenvalue at a stored snapshot.
    Sharpness {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: usize,
    },
    /// SVG charts of loss, Betti numbers and 1/K for a run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TopologyArgs {
    #[arg(long)]
    points: PathBuf,
    #[arg(long, conflicts_with = "adaptive")]
    scale: Option<f64>,
    /// Quarter of the cloud diameter (the default).
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 3)]
    max_dim: usize,
    /// Farthest-point subsample to at most this many points.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config } => {
            if !config.is_file() {
                return Err(Failure::Usage(format!("config {} does not exist", config.display())));
            }
            let cfg = RunConfig::load(&config)?;
            let log = harness::run(&cfg)?;
            let m = &log.manifest;
            println!(
                "{}: {} steps, diverged={}, stopped_early={}",
                if cfg.name.is_empty() { "run" } else { &cfg.name },
                m.steps_completed,
                m.diverged,
                m.stopped_early
            );
            if cfg.output_dir.is_none() {
                print!("{}", log.metrics_csv());
            }
        }
        Command::Topology(args) => {
            if args.scale.is_some_and(|s| !(s > 0.0)) {
                return Err(Failure::Usage("--scale must be positive".into()));
            }
            let points = ParticleCollection::read_csv(&args.points)?;
            let opts = TopologyOptions {
                scale: args.scale.map_or(ScaleMode::Adaptive, ScaleMode::Fixed),
                max_dim: args.max_dim,
                subsample_cap: args.subsample,
                ..Default::default()
            };
            let measured = measure_betti(&points, &opts)?;
            if args.json {
                println!(
                    "{}",
                    serde_json::to_string(&measured.profile).expect("profile serializes")
                );
            } else {
                println!("{}", measured.profile.csv_row());
            }
        }
        Command::Check { run } => {
            let report = harness::check_run(&run)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Sample { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Failure::Usage(format!("{}: {e}", spec.display())))?;
            let spec: ManifoldSpec = serde_json::from_str(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            geometry::sample(&spec)?.write_csv(&out)?;
        }
        Command::Sharpness { run, step } => {
            let (est, eta) = harness::sharpness_at(&run, step)?;
            println!("step,k_hat,eta_star,eta_times_k,iterations,converged");
            println!("{},{},{}", est.csv_row(step, eta), est.iterations_used, est.converged);
        }
        Command::Report { run, out } => write_file(&out, &harness::report_run(&run)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("NEUROTOPO_THREADS").ok().and_then(|v| v.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
