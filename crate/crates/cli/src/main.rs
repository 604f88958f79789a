use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pedflow::harness::{self, Command, RunConfig, Status};
use pedflow::Error;

#[derive(Parser)]
#[command(name = "pedflow", version, about = "Cut-off pedestrian flow: particle system, mean-field coupling and convergence statistics")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// One Newtonian run per N with snapshots.
    Simulate(Common),
    /// Paired Newtonian / mean-field replicas and their deviation.
    Couple(Common),
    /// Moments of the centred kernel averages.
    Moments(Common),
    /// Bounded-Lipschitz brackets for the one-particle marginal.
    Chaos(Common),
    /// Deviation probabilities over N and the fitted decay rate.
    Sweep(Common),
    /// Calibrate the majorant constant and the velocity Lipschitz constant.
    Calibrate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config, or a JSON manifest from an earlier run.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, value_name = "K")]
    threads: Option<usize>,
    /// Comma-separated N values replacing the configured list.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    n_override: Option<Vec<usize>>,
}

fn load(command: Command, args: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(list) = &args.n_override {
        if command == Command::Moments {
            cfg.moments.n_list = list.clone();
        } else {
            cfg.n_list = list.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command, args: &Common) -> Result<Status, Error> {
    let cfg = load(command, args)?;
    if let Some(k) = args.threads {
        if k == 0 {
            return Err(Error::config("threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .expect("global pool is built once");
    }
    let outcome = harness::run(command, &cfg)?;
    println!(
        "{}: wrote {} files to {} (config {})",
        command.name(),
        outcome.manifest.outputs.len() + 1,
        cfg.output_dir.display(),
        &outcome.manifest.config_hash[..12]
    );
    Ok(outcome.status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Couple(a) => (Command::Couple, a),
        Sub::Moments(a) => (Command::Moments, a),
        Sub::Chaos(a) => (Command::Chaos, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::Calibrate(a) => (Command::Calibrate, a),
    };
    match execute(command, args) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NoSignal(why)) => {
            eprintln!("no signal: {why}");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
