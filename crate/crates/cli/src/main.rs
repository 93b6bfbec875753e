//! `pmgan`: synthesize data, train, evaluate, gradient-check and summarize.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const OUT_DIR_ENV: &str = "PMGAN_OUT_DIR";

#[derive(Parser)]
#[command(name = "pmgan", version, about = "Partial-modal feature generation and fusion experiments")]
struct Cli {
    /// Output directory [env: PMGAN_OUT_DIR, default: .]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset
    Synth(commands::SynthArgs),
    /// Train the generator and discriminator (plus ablation heads)
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Eval(commands::EvalArgs),
    /// Compare analytic gradients against central differences
    Gradcheck(commands::GradcheckArgs),
    /// Summarize a training log and/or an evaluation table
    Report(commands::ReportArgs),
}

#[derive(Args)]
pub struct ConfigArg {
    /// Flat TOML config, or a manifest from an earlier run of the same command
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub detail: String,
    pub code: u8,
}

impl CliError {
    pub fn config(detail: impl Into<String>) -> Self {
        Self { kind: "config", detail: detail.into(), code: 2 }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { kind: "io", detail: format!("{}: {e}", path.display()), code: 3 }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Self { kind: "contract", detail: detail.into(), code: 6 }
    }
}

impl From<pmgan_core::Error> for CliError {
    fn from(e: pmgan_core::Error) -> Self {
        use pmgan_core::Error as E;
        let (kind, code) = match &e {
            E::Config(_) => ("config", 2),
            E::Io { .. } => ("io", 3),
            E::Format(_) => ("format", 4),
            E::NonFinite { .. } => ("numeric", 5),
            E::Dimension { .. } => ("dimension", 6),
            E::Contract(_) | E::VisibleWithheld => ("contract", 6),
        };
        Self { kind, detail: e.to_string(), code }
    }
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = out_dir(cli.out_dir)?;
    match cli.command {
        Command::Synth(a) => commands::synth(a, &out),
        Command::Train(a) => commands::train(a, &out),
        Command::Eval(a) => commands::eval(a, &out),
        Command::Gradcheck(a) => commands::gradcheck(a, &out),
        Command::Report(a) => commands::report(a, &out),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            eprint!("{rendered}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, one_line(&e.detail));
            ExitCode::from(e.code)
        }
    }
}
