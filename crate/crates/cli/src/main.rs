use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barycentre::experiments::{
    export_paths, run_eta, run_experiment, run_oracle_pde, Experiment, ExperimentConfig, BUILTIN_EXPERIMENTS,
};
use barycentre::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "barycentre", version, about = "Constrained KL barycentres of expert diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Builtin experiment name or path to a TOML config.
    config: String,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; defaults to the config's `output` or artifacts/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: simulate, solve multipliers, train, evaluate, write artifacts.
    Run(Common),
    /// Solve for the Lagrange multipliers only.
    Eta(Common),
    /// Solve the one-dimensional value PDE.
    OraclePde(Common),
    /// Check a config without running it.
    Validate(Common),
    /// Simulate the experts and the average drift and write paths.
    ExportPaths(Common),
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::IllConditioned(_) | Error::TrainingDiverged { .. } | Error::SolverFailed(_) => EXIT_NO_CONVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::resolve(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let base = if BUILTIN_EXPERIMENTS.contains(&common.config.as_str()) {
        PathBuf::from(".")
    } else {
        Path::new(&common.config)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    };
    Ok((cfg, base))
}

fn execute(command: Command) -> Result<(), Error> {
    let (kind, common) = match command {
        Command::Run(c) => ("run", c),
        Command::Eta(c) => ("eta", c),
        Command::OraclePde(c) => ("oracle-pde", c),
        Command::Validate(c) => ("validate", c),
        Command::ExportPaths(c) => ("export-paths", c),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let (cfg, base) = load(&common)?;
    if kind == "validate" {
        cfg.validate()?;
        println!("config `{}` is valid", cfg.name);
        return Ok(());
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir());
    let exp = Experiment::build(cfg, &base)?;
    match kind {
        "run" => {
            let outcome = run_experiment(&exp, &out)?;
            println!("{}", std::fs::read_to_string(outcome.dir.join("report.txt"))?.trim_end());
        }
        "eta" => {
            let eta = run_eta(&exp, &out)?;
            println!("eta0 = {:?}\neta1 = {:?}\nresiduals = {:?}", eta.eta0, eta.eta1, eta.residuals);
            if !eta.converged {
                return Err(Error::IllConditioned(format!(
                    "multipliers did not reach tolerance {}",
                    eta.tol
                )));
            }
        }
        "oracle-pde" => {
            run_oracle_pde(&exp, &out)?;
            println!("{}", std::fs::read_to_string(out.join("report.txt"))?.trim_end());
        }
        "export-paths" => {
            export_paths(&exp, &out)?;
            println!("paths written to {}", out.join("paths").display());
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
