//! Command-line surface: dataset generation, training, simulation/rendering,
//! evaluation and a self-check battery.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "modalstring",
    about = "Energy-stable modal synthesis of nonlinear strings with a learnable coupling term",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file or preset.
    Generate(GenerateArgs),
    /// Train a gradient network on a generated dataset.
    Train(TrainArgs),
    /// Simulate a string and render trajectories, audio or spectrograms.
    Simulate(SimulateArgs),
    /// Evaluate a checkpoint against a dataset (includes the linear baseline).
    Evaluate(EvaluateArgs),
    /// Run the built-in numerical self-checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file holding a dataset spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in spec preset: desk-train, desk-val, desk-test, full-train,
    /// full-val, full-test.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// Output directory for the trajectory files and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of retained modes.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Override the spec's RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the spec's trajectory count.
    #[arg(long)]
    pub count: Option<usize>,
    /// Configuration file with a [generate] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding the training dataset.
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    /// Directory holding the validation dataset.
    #[arg(long)]
    pub val_dir: Option<PathBuf>,
    /// Output directory for checkpoint, log and config sidecar.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Teacher-forcing segment length in milliseconds.
    #[arg(long)]
    pub segment_ms: Option<f64>,
    /// Validate every this many epochs.
    #[arg(long)]
    pub val_period: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden dimension of the gradient network.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Leaky-ReLU negative slope.
    #[arg(long)]
    pub neg_slope: Option<f64>,
    /// Drift-control gain during training forwards.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// SAV gauge constant.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Configuration file with a [train] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// GradNet checkpoint providing the nonlinearity.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the closed-form spectral nonlinearity.
    #[arg(long)]
    pub oracle: bool,
    /// Disable the nonlinearity entirely.
    #[arg(long)]
    pub linear: bool,
    #[arg(long)]
    pub modes: Option<usize>,
    /// Sampling rate in Hz.
    #[arg(long)]
    pub fs: Option<f64>,
    /// Simulation length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Scaled wave speed (fundamental is gamma/2 Hz).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Scaled stiffness.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Nonlinearity strength.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Frequency-independent loss.
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Scaled frequency-dependent loss.
    #[arg(long)]
    pub sigma1_hat: Option<f64>,
    /// String length in metres (physical entry; requires density, radius,
    /// tension and young).
    #[arg(long)]
    pub length: Option<f64>,
    /// Material density in kg/m^3.
    #[arg(long)]
    pub density: Option<f64>,
    /// String radius in metres.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Tension in newtons.
    #[arg(long)]
    pub tension: Option<f64>,
    /// Young's modulus in N/m^2.
    #[arg(long)]
    pub young: Option<f64>,
    /// Physical frequency-dependent loss in m^2/s (with physical entry).
    #[arg(long)]
    pub sigma1: Option<f64>,
    /// Excitation amplitude in scaled force units.
    #[arg(long)]
    pub famp: Option<f64>,
    /// Excitation duration in seconds.
    #[arg(long)]
    pub te: Option<f64>,
    /// Excitation position in (0, 1).
    #[arg(long)]
    pub xe: Option<f64>,
    /// Output position in (0, 1).
    #[arg(long)]
    pub xo: Option<f64>,
    /// Drift-control gain.
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// SAV gauge constant.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Write the audio output as a WAV file.
    #[arg(long)]
    pub wav: Option<PathBuf>,
    /// Render 16-bit PCM (peak-normalised) instead of float32.
    #[arg(long)]
    pub pcm16: bool,
    /// Write the full trajectory container.
    #[arg(long)]
    pub traj: Option<PathBuf>,
    /// Write a magnitude spectrogram CSV of the audio output.
    #[arg(long)]
    pub spectrogram: Option<PathBuf>,
    /// Spectrogram window length in samples.
    #[arg(long)]
    pub window: Option<usize>,
    /// Spectrogram hop in samples.
    #[arg(long)]
    pub hop: Option<usize>,
    /// Configuration file with a [simulate] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory for metrics.csv and per_mode_mse.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Initial evaluation window in milliseconds.
    #[arg(long)]
    pub window_ms: Option<f64>,
    /// Configuration file with an [evaluate] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Seed for the randomised checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Errors that should exit with the usage code rather than the runtime code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Check(args) => commands::check(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            if let Some(usage) = err.downcast_ref::<UsageError>() {
                eprintln!("error: {usage}");
                ExitCode::from(1)
            } else {
                eprintln!("error: {err:#}");
                ExitCode::from(2)
            }
        }
    }
}
