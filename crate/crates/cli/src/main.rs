use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use game_lattice::lattice::{EnginePolicy, DEFAULT_EPS_TAIL, DEFAULT_Q};
use game_lattice_cli::{emit, run, CliError, Command, Output, RunConfig, WORKERS_ENV};

/// Price game options on jump-diffusion lattices.
#[derive(Debug, Parser)]
#[command(name = "game-lattice", version)]
struct Args {
    /// price, converge, verify or bound; overrides the config's command.
    command: Option<Command>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Monte Carlo seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// auto, exact, quantized, or quantized:<q>[:<eps_tail>].
    #[arg(long, value_parser = parse_engine)]
    engine: Option<EnginePolicy>,
    /// Output path; `.csv` selects CSV, `-` stdout, anything else JSON.
    #[arg(long)]
    out: Option<String>,
    /// Record per-row wall time in converge output.
    #[arg(long)]
    timing: bool,
    /// Price a lattice stored as JSON.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Write the priced lattice as JSON.
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn parse_engine(s: &str) -> Result<EnginePolicy, String> {
    let mut parts = s.split(':');
    let policy = match parts.next() {
        Some("auto") => EnginePolicy::Auto,
        Some("exact") => EnginePolicy::Exact,
        Some("quantized") => {
            let (mut q, mut eps_tail) = (DEFAULT_Q, DEFAULT_EPS_TAIL);
            if let Some(v) = parts.next() {
                q = v.parse().map_err(|_| format!("bad q {v:?}"))?;
            }
            if let Some(v) = parts.next() {
                eps_tail = v.parse().map_err(|_| format!("bad eps_tail {v:?}"))?;
            }
            EnginePolicy::Quantized { q, eps_tail }
        }
        _ => return Err(format!("unknown engine {s:?}")),
    };
    if parts.next().is_some() {
        return Err(format!("unknown engine {s:?}"));
    }
    Ok(policy)
}

fn configure(args: Args) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(c) = args.command {
        config.command = Some(c);
    }
    if let Some(seed) = args.seed {
        let mut mc = config.resolved_mc();
        mc.seed = seed;
        config.mc = Some(mc);
    }
    if let Some(engine) = args.engine {
        config.engine = engine;
    }
    if let Some(out) = &args.out {
        config.output = Output::from_path(out);
    }
    if args.timing {
        config.timing = true;
    }
    if args.tree.is_some() {
        config.tree = args.tree;
    }
    if args.dump.is_some() {
        config.dump = args.dump;
    }
    Ok(config)
}

fn init_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let workers: usize = raw.parse().ok().filter(|&w| w > 0).ok_or_else(|| {
        CliError::Config(format!(
            "{WORKERS_ENV}: expected a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("{WORKERS_ENV}: {e}")))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = init_workers().and_then(|()| {
        let config = configure(args)?;
        let outcome = run(&config)?;
        emit(&config, &outcome)?;
        Ok(outcome.exit_code)
    });
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("game-lattice: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
