//! `keyfield`: train occupancy/saliency fields, extract keypoints and run
//! the evaluation protocols from the shell.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "keyfield", version, about = "Joint surface-occupancy and keypoint-saliency fields for point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config; a `preset` key inside it is applied first.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named hyperparameter preset.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or directory for `train`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Gradient worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// `section.key=value` override, applied after the config; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a synthetic shape shell.
    Synth {
        #[arg(long, default_value = "box")]
        kind: String,
        #[arg(long, default_value_t = 2048)]
        n: usize,
    },
    /// Train a model; writes one checkpoint per epoch.
    Train {
        /// Training clouds (PLY or XYZ).
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Manifest whose `train` rows are used instead of `--input`.
        #[arg(long, conflicts_with = "input")]
        manifest: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs of this run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract keypoints from one cloud.
    Extract {
        #[command(flatten)]
        model: ModelInput,
    },
    /// Marching-cubes mesh of the occupancy field.
    Reconstruct {
        #[command(flatten)]
        model: ModelInput,
        #[arg(long, default_value_t = keyfield::inference::DEFAULT_ISO)]
        iso: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// 2D image of a field; CSV, or PGM when `--out` ends in `.pgm`.
    Slice {
        #[command(flatten)]
        model: ModelInput,
        #[arg(long, default_value = "saliency")]
        field: String,
        #[arg(long, default_value = "z")]
        axis: String,
        /// `mid` or `max`.
        #[arg(long, default_value = "mid")]
        mode: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Repeatability under random rigid views and a perturbation sweep.
    EvalRepeat {
        #[command(flatten)]
        model: ModelInput,
        #[arg(long, value_enum, default_value_t = SweepKind::Threshold)]
        sweep: SweepKind,
        /// Sweep values (thresholds, downsample rates or noise sigmas).
        #[arg(long, alias = "sigmas", alias = "rates", alias = "epsilons", value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        views: usize,
        /// Largest view rotation in degrees.
        #[arg(long, default_value_t = 180.0)]
        max_rotation_deg: f64,
        /// Largest view translation in canonical units.
        #[arg(long, default_value_t = 0.1)]
        max_translation: f64,
    },
    /// Semantic-consistency mIoU over a manifest's test rows.
    EvalSemantic {
        #[arg(long, default_value = "run")]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::Annotated)]
        protocol: Protocol,
    },
    /// Registration recall over a manifest's test rows with partners.
    EvalRegister {
        #[arg(long, default_value = "run")]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = DescriptorKind::Histogram)]
        descriptor: DescriptorKind,
        /// Histogram descriptor radius in raw units.
        #[arg(long, default_value_t = 0.15)]
        descriptor_radius: f64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ModelInput {
    /// Checkpoint file, or a training directory (its latest epoch is used).
    #[arg(long, default_value = "run")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "synth.ply")]
    pub input: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Threshold,
    Downsample,
    Noise,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Predicted keypoints against annotated ones, geodesic distances.
    Annotated,
    /// Keypoints of paired instances through their point correspondence.
    Pairwise,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    Histogram,
    Random,
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            // Keep only clap's headline; the usage block spans lines.
            let text = e.to_string();
            let head = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", one_line(head));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
