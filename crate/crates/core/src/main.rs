use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aim_morl::harness::{self, ExperimentConfig};
use aim_morl::Result;

/// Exit status of `select` when no front point satisfies the caps.
const EXIT_NO_FEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "aim-morl", version, about = "Multi-objective TD3 for intersection management")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Sectioned TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed to run (repeatable; overrides run.seeds).
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// `section.key=value` override (repeatable).
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
    /// Continue training from each seed's checkpoint.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent per seed.
    Train,
    /// Evaluate each seed's checkpoint over the ω grid.
    Eval,
    /// Aggregate seeds and write the front report.
    Analyze,
    /// Pick the fairest front point within the configured caps.
    Select,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = harness::load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    if !cli.seeds.is_empty() {
        cfg.run.seeds = cli.seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load(cli)?;
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train => harness::run_train(&cfg, cli.resume, &mut out)?,
        Command::Eval => {
            harness::run_eval(&cfg, &mut out)?;
        }
        Command::Analyze => {
            harness::run_analyze(&cfg, &mut out)?;
        }
        Command::Select => match harness::run_select(&cfg)? {
            Some(p) => {
                let df = p.delta_f.map_or_else(|| "absent".to_string(), |d| d.to_string());
                writeln!(
                    out,
                    "omega={} mean_speed={} mean_emission={} delta_f={} crashes={}",
                    p.omega, p.obj_speed, p.obj_emission, df, p.crashes
                )?;
            }
            None => {
                writeln!(out, "no feasible policy")?;
                return Ok(ExitCode::from(EXIT_NO_FEASIBLE));
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
