use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jlbo::harness::{emit, parse_baselines, run_monte_carlo, summarize, OutputFormat, Profile, SweepAxis, SystemConfig};
use jlbo::JlboError;

#[derive(Parser)]
#[command(name = "jlbo", version, about = "Joint localization and beamforming Monte-Carlo sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded sweep and write the per-iteration records.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file of flat keys laid over the profile.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// iterations, n_ris, snr or bs_ris_distance.
    #[arg(long, value_parser = parse_sweep)]
    sweep: SweepAxis,
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: OutputFormat,
    /// Comma list of `random` and `fixed-ris`.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value = "desk", value_parser = parse_profile)]
    profile: Profile,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_sweep(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: JlboError| e.to_string())
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: JlboError| e.to_string())
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: JlboError| e.to_string())
}

fn run(args: RunArgs) -> jlbo::Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        JlboError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.config.display())))
    })?;
    let mut cfg = SystemConfig::from_toml(&text, &SystemConfig::profile(args.profile))?;
    cfg.seed = args.seed;
    cfg.sweep = args.sweep;
    cfg.trials = args.trials;
    if let Some(b) = &args.baseline {
        cfg.baselines = parse_baselines(b)?;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate()?;

    let output = run_monte_carlo(&cfg)?;
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    for f in &output.failures {
        eprintln!(
            "trial {} ({} at {}) failed: {}",
            f.trial,
            f.algorithm.tag(),
            f.sweep_value,
            f.error
        );
    }
    for s in summarize(&output.records) {
        eprintln!(
            "{:>10} {:>12} median nmse {:.3e} over {} trials",
            s.algorithm.tag(),
            s.sweep_value,
            s.median_nmse_position,
            s.trials
        );
    }
    emit(&output, &cfg, args.format, &args.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_assumption_refusal() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
