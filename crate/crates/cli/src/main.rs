use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hmcseg::protocol::ProtocolName;
use hmcseg_cli::{run, CliError, CliResult, Command, Overrides, RunConfig};

/// Bayesian segmentation with cyclical SGHMC on synthetic cardiac scenes.
#[derive(Parser, Debug)]
#[command(name = "hmcseg", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// vanilla, mc-dropout, deep-ensembles, sgd-const, sghmc-single or sghmc-multi.
    #[arg(long, global = true)]
    protocol: Option<String>,
    /// Sampler temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Test-time samples M.
    #[arg(long, global = true)]
    samples: Option<usize>,
}

fn threads() -> CliResult<()> {
    let Ok(v) = std::env::var("HMCSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("HMCSEG_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn main_inner(args: Args) -> CliResult<()> {
    threads()?;
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let protocol = args
        .protocol
        .as_deref()
        .map(str::parse::<ProtocolName>)
        .transpose()?;
    cfg.apply(&Overrides {
        seed: args.seed,
        out: args.out,
        protocol,
        temperature: args.temperature,
        samples: args.samples,
    });
    run(args.command, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            // usage errors share the exit code of invalid configs
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match main_inner(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
