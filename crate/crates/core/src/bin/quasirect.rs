use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use quasirect::cli::{run, ExperimentConfig, Subcommand};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    SymbolCheck,
    ToyOde,
    LinearField,
    Packets,
    InterferenceScan,
    Profiles,
    GaugeSweep,
    NonlinearProfile,
    Accept,
}

impl From<Cmd> for Subcommand {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::SymbolCheck => Subcommand::SymbolCheck,
            Cmd::ToyOde => Subcommand::ToyOde,
            Cmd::LinearField => Subcommand::LinearField,
            Cmd::Packets => Subcommand::Packets,
            Cmd::InterferenceScan => Subcommand::InterferenceScan,
            Cmd::Profiles => Subcommand::Profiles,
            Cmd::GaugeSweep => Subcommand::GaugeSweep,
            Cmd::NonlinearProfile => Subcommand::NonlinearProfile,
            Cmd::Accept => Subcommand::Accept,
        }
    }
}

/// Experiment runner for the semiclassical source problem.
#[derive(Debug, Parser)]
#[command(name = "quasirect", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML experiment file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set source.gamma=0.15`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Multiplies every numerical tolerance.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let mut cfg = ExperimentConfig::load(args.config.as_deref(), &args.set)?;
    if args.tol_scale != 1.0 {
        anyhow::ensure!(args.tol_scale > 0.0, "--tol-scale must be positive");
        cfg.scale_tolerances(args.tol_scale);
        cfg.validate()?;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global()
        .context("thread pool")?;
    let cmd = Subcommand::from(args.command);
    let paths = run(cmd, &cfg, &args.out).with_context(|| format!("{} failed", cmd.name()))?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
