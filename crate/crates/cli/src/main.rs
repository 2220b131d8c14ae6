mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Context, LimitKind};
use config::{ConfigError, ExperimentConfig};

/// Simulation, limit curves and verification for the particle/agent pairing
/// model.
#[derive(Debug, Parser)]
#[command(name = "pairlim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config replication count.
    #[arg(long, global = true)]
    replications: Option<usize>,
    /// Claim to check (verify, sweep).
    #[arg(long, global = true)]
    claim: Option<String>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sampled trajectories, one CSV per replicate, plus a manifest.
    Simulate,
    /// Deterministic or diffusive limit curves.
    Limit {
        #[arg(long, value_enum)]
        which: LimitKind,
    },
    /// Runs one claim check (or `all`) and writes its verdict.
    Verify,
    /// Convergence table of a claim statistic over `n_list`.
    Sweep,
    /// Closed-form equilibria of the configured instance.
    Equilibria,
}

fn threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PAIRLIM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PAIRLIM_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    threads()?;
    let from_file = cli.config.is_some();
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if matches!(cli.command, Command::Verify) => ExperimentConfig::default(),
        None => return Err(ConfigError::Invalid("--config is required".into()).into()),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(r) = cli.replications {
        config.replications = r;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Context {
        config,
        from_file,
        out,
        quiet: cli.quiet,
    };
    let claim = || {
        cli.claim
            .clone()
            .ok_or_else(|| CliError::Usage("--claim is required".into()))
    };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Limit { which } => commands::limit(&ctx, which),
        Command::Verify => commands::verify(&ctx, &claim()?),
        Command::Sweep => commands::sweep(&ctx, &cli.claim.clone().unwrap_or_else(|| "mass-lln".into())),
        Command::Equilibria => commands::equilibria(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let record = commands::error_record(&e);
            eprintln!("{record}");
            if let Some(dir) = out {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
