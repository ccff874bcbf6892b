//! `stact`: generate synthetic cine clips, train, evaluate and cross-validate
//! the decoder variants, and check gradients.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "stact", version, about = "Segmentation-augmented attention over cine-clip embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds generation, training and the gradient check.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Further `--key value` overrides of any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    rest: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(Common),
    /// Train encoders and the decoder on a manifest; writes a checkpoint.
    Train(Common),
    /// Score a manifest with a checkpoint (`--checkpoint PATH`).
    Evaluate(Common),
    /// Stratified k-fold cross-validation of the selected variants.
    Crossval(Common),
    /// Cross-validation of all four decoder variants on shared folds.
    Ablate(Common),
    /// Finite-difference check of every analytic gradient.
    GradCheck(Common),
}

fn init_logging() {
    let style = if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        env_logger::WriteStyle::Never
    } else {
        env_logger::WriteStyle::Auto
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .write_style(style)
        .format_timestamp(None)
        .init();
}

fn assignments(common: &Common) -> Result<Vec<config::Assignment>, CliError> {
    let mut out = match &common.config {
        Some(p) => config::parse_file(p)?,
        None => Vec::new(),
    };
    let mut push = |key: &str, value: String| {
        out.push(config::Assignment {
            key: key.into(),
            value,
            origin: format!("--{key}"),
        })
    };
    if let Some(s) = common.seed {
        push("seed", s.to_string());
    }
    if let Some(p) = &common.out {
        push("out", p.display().to_string());
    }
    if let Some(p) = &common.manifest {
        push("manifest", p.display().to_string());
    }
    out.extend(config::parse_flags(&common.rest)?);
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Train(c) => ("train", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Crossval(c) => ("crossval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::GradCheck(c) => ("grad-check", c),
    };
    let cfg = config::resolve(&assignments(common)?)?;
    match cli.command {
        Command::Generate(_) => commands::generate(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Crossval(_) => commands::crossval(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::GradCheck(_) => commands::grad_check(&cfg),
    }
    .map_err(|e| e.context(name))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
