use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lstmcaps_cli::commands::{run, Command};
use lstmcaps_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "lstmcaps", version, about = "LSTM-capsule autoencoders for multivariate anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a model on clean data and calibrate its thresholds.
    Train(Common),
    /// Flag anomalies in a series with a trained model.
    Detect(Common),
    /// Train, detect and score over a set of labeled series.
    Benchmark(Common),
    /// Train all four designs over several seeds and tabulate their losses.
    CompareDesigns(Common),
    /// Write the synthetic benchmark series as CSV files.
    Generate(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "lstmcaps-out")]
    out: PathBuf,
    /// Seed for initialization, shuffling and dropout (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Threshold multiplier on the maximum training error.
    #[arg(long)]
    sensitivity: Option<f64>,
    /// Model design: A, B, C or D.
    #[arg(long)]
    design: Option<String>,
    /// Read inputs in the SKAB layout.
    #[arg(long)]
    skab_preset: bool,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Verb::Train(c) => (Command::Train, c),
        Verb::Detect(c) => (Command::Detect, c),
        Verb::Benchmark(c) => (Command::Benchmark, c),
        Verb::CompareDesigns(c) => (Command::CompareDesigns, c),
        Verb::Generate(c) => (Command::Generate, c),
    };
    match execute(cmd, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cmd: Command, c: Common) -> anyhow::Result<()> {
    let mut overrides = Vec::new();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{s}'"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = c.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = c.sensitivity {
        overrides.push(("sensitivity".into(), s.to_string()));
    }
    if let Some(d) = c.design {
        overrides.push(("design".into(), d));
    }
    if c.skab_preset {
        overrides.push(("skab_preset".into(), "true".into()));
    }
    let cfg = RunConfig::load(c.config.as_deref(), overrides)?;
    run(cmd, &cfg, &c.out)
}
