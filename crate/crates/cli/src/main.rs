mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcgans_core::error::Error;

#[derive(Debug, Parser)]
#[command(name = "pcgans", version, about = "Pan-sharpening with guided pre-fusion and pyramid GAN compensation")]
struct Cli {
    /// Write the resampling kernel taps as CSV (to `--out` when the command
    /// has one, otherwise to stdout).
    #[arg(long, global = true)]
    dump_kernels: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of full-resolution scenes.
    Synth(SynthArgs),
    /// Write the reduced-resolution version of a corpus.
    Degrade(DegradeArgs),
    /// Train on the reduced-resolution training split.
    Train(TrainArgs),
    /// Fuse the test split with a trained checkpoint.
    Fuse(FuseArgs),
    /// Apply a trained coarse-to-fine generator to externally fused images.
    Refine(RefineArgs),
    /// Assess fused products.
    Eval(EvalArgs),
    /// Train and assess one ablation variant.
    Ablate(TrainArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Seed of the first scene; later scenes use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    /// PAN side length of each scene.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Training settings. Flags override `--set` pairs, which override the
/// config file, which overrides the defaults.
#[derive(Debug, Args, Clone, Default)]
struct Settings {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long = "guided-lambda")]
    guided_lambda: Option<f64>,
    #[arg(long)]
    nblocks: Option<usize>,
    /// Ablation case 1..4 (0 or omitted for the complete model).
    #[arg(long)]
    case: Option<usize>,
    #[arg(long = "dmg-adv-joint")]
    dmg_adv_joint: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written under the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Dmg,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Resolution {
    /// Degraded inputs, compared with the original MS.
    Reduced,
    /// Original inputs, no-reference indices.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Resolution::Reduced)]
    resolution: Resolution,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Settings the checkpoint was trained with; defaults to the
    /// `config.resolved` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Fused PSR1 image; may be repeated.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Exp,
    Average,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory of `{scene id}.psr` products to assess.
    #[arg(long, conflicts_with_all = ["checkpoint", "method"])]
    fused: Option<PathBuf>,
    /// Fuse with this checkpoint before assessing.
    #[arg(long, conflicts_with = "method")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    mode: Mode,
    /// Assess a fixed baseline product instead.
    #[arg(long, value_enum)]
    method: Option<Baseline>,
    #[arg(long, value_enum, default_value_t = Resolution::Reduced)]
    resolution: Resolution,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F64,
    F32,
    Both,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Precision::Both)]
    precision: Precision,
    /// Also write the reports as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status for a failure: 2 for unusable arguments or settings,
/// 3 for files, 4 for numerical breakdown.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Size(_) | Error::Shape(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numerical(_) | Error::Singular(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
