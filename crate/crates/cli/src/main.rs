mod commands;
mod plots;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iceg::IcegError;

#[derive(Parser)]
#[command(name = "iceg", version, about = "Camouflaged object detection toolkit")]
struct Cli {
    /// Directory under which run directories are created. Overrides
    /// `ICEG_RUN_ROOT`.
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural dataset of textured scenes with hidden objects.
    Synth(SynthArgs),
    /// Pretrain the detector on real images.
    Train(TrainArgs),
    /// Alternate generator and detector training from a pretrained detector.
    Advtrain(AdvArgs),
    /// Score a checkpoint or a directory of predictions against masks.
    Eval(EvalArgs),
    /// Run the generator over images.
    Camouflage(CamoArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Colour gap between object and background (0 hides it completely).
    #[arg(long, default_value_t = 0.15)]
    pub contrast: f64,
    /// Fraction of samples written to `test/`. With 0 the layout is flat.
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// File with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.beta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct AdvArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint of a pretrained detector.
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "pred_dir")]
    pub ckpt: Option<PathBuf>,
    /// Directory of `<id>.png` grayscale predictions.
    #[arg(long)]
    pub pred_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Also write loss curves, a score chart and prediction panels.
    #[arg(long)]
    pub plots: bool,
    /// Training log for the loss curves. Defaults to `train_log.jsonl` next
    /// to the checkpoint.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct CamoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long)]
    pub input: PathBuf,
}

/// Failure of a command, split by who has to fix it.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl From<IcegError> for CliError {
    fn from(e: IcegError) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let root = cli
        .run_root
        .or_else(|| std::env::var_os("ICEG_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let argv: Vec<String> = std::env::args().collect();
    let ctx = run::Context { root, argv };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Advtrain(a) => commands::advtrain(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Camouflage(a) => commands::camouflage(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert!(matches!(CliError::from(IcegError::Config("x".into())), CliError::User(_)));
        assert!(matches!(CliError::from(IcegError::Diverged("x".into())), CliError::Internal(_)));
        assert_eq!(one_line("a\n  b\tc"), "a b c");
    }
}
