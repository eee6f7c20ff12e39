//! `quasipot`: sample → train → regress → analyze, with every intermediate
//! artifact on disk.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quasipot::{Error, Pipeline, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "quasipot", version, about = "Symbolic quasipotentials from trajectory data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate trajectories and write the snapshot dataset.
    Sample(Common),
    /// Train the potential and circulation networks.
    Train(Common),
    /// Sparse regression of the trained networks onto polynomials.
    Regress(Common),
    /// Residuals, holdout prediction, normalization constants and densities.
    Analyze(Common),
    /// All stages in order.
    Run(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `run.out` from the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Global seed; overrides `run.seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Continue training from this checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Use upstream artifacts even if their recorded hash does not match.
    #[arg(long)]
    force: bool,
}

/// 2 for configuration problems, 3 for numerical failures, 4 for I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 4,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn pipeline(c: &Common) -> quasipot::Result<Pipeline> {
    let mut config = PipelineConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.run.seed = seed;
    }
    let out = c.out.clone().or_else(|| config.run.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Pipeline::new(config, out, c.force))
}

fn execute(command: &Command) -> quasipot::Result<()> {
    let (Command::Sample(c) | Command::Train(c) | Command::Regress(c) | Command::Analyze(c) | Command::Run(c)) = command;
    if c.resume.is_some() && !matches!(command, Command::Train(_) | Command::Run(_)) {
        return Err(Error::Config("--resume only applies to `train` and `run`".into()));
    }
    let p = pipeline(c)?;
    let resume = c.resume.as_deref();
    match command {
        Command::Sample(_) => {
            p.sample()?;
        }
        Command::Train(_) => {
            p.train(resume)?;
        }
        Command::Regress(_) => {
            let r = p.regress()?;
            println!("U = {}", r.model.quasipotential_string());
        }
        Command::Analyze(_) => {
            p.analyze()?;
            print_summary(&p)?;
        }
        Command::Run(_) => {
            p.run(resume)?;
            print_summary(&p)?;
        }
    }
    Ok(())
}

fn print_summary(p: &Pipeline) -> quasipot::Result<()> {
    let text = quasipot::io::read_text(&p.layout.report().join("summary.txt"))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
