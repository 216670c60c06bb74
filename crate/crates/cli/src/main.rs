use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ouu_cli::{commands, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ouu", about = "Optimization under uncertainty experiments on a 1D heat problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed, overriding `seeds.train`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the state equation for one field sample.
    SolvePde(Common),
    /// Write conductivity samples on a grid.
    SampleField(Common),
    /// Risk measures of a discrete distribution.
    Risk {
        #[command(subcommand)]
        action: RiskAction,
    },
    /// Run the staged approximation loop and write a gap certificate.
    Optimize(Common),
    /// Run the property and oracle batteries.
    Verify(Common),
    /// Optimality-gap demo on synthetic problems.
    EpiDemo(Common),
}

#[derive(Subcommand)]
enum RiskAction {
    Eval(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seeds.train = seed;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&ExperimentConfig) -> Result<commands::Report, CliError>) =
        match &cli.command {
            Command::SolvePde(c) => (c, commands::solve_pde),
            Command::SampleField(c) => (c, commands::sample_field),
            Command::Risk {
                action: RiskAction::Eval(c),
            } => (c, commands::risk_eval),
            Command::Optimize(c) => (c, commands::optimize),
            Command::Verify(c) => (c, commands::verify),
            Command::EpiDemo(c) => (c, commands::epi_demo),
        };
    let result = load(common).and_then(|cfg| run(&cfg));
    match result {
        Ok(report) => {
            let mut stdout = std::io::stdout().lock();
            for line in &report.lines {
                // A closed pipe (e.g. `| head`) is not an error worth reporting.
                if writeln!(stdout, "{line}").is_err() {
                    break;
                }
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("one or more checks failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
