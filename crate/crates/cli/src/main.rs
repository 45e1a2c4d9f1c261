//! `spineseg` — volumetric spine-phantom segmentation toolkit.
//!
//! Exit codes: 0 ok, 1 config/usage, 2 io, 3 divergence, 4 gradcheck
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use spineseg_cli::{commands, CliError, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "spineseg", version, about = "Volumetric segmentation on synthetic spine phantoms")]
struct Cli {
    /// Intra-op worker threads (attention windows, fusion branches).
    /// Results are bit-identical for any value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Override the model seed from the config file (also the dataset
    /// seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        /// Number of (volume, label) pairs.
        #[arg(long)]
        n: usize,
        /// Cubic volume edge length in voxels.
        #[arg(long, default_value_t = 32)]
        dims: usize,
        /// Vertebral bodies per phantom.
        #[arg(long, default_value_t = 3)]
        vertebrae: usize,
        /// Gaussian intensity noise sigma.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an SSCK checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (manifest.txt + SSV1 pairs).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report means over foreground classes only.
        #[arg(long)]
        exclude_background: bool,
    },
    /// Train and evaluate all four architecture variants.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the end-to-end gradients.
    Gradcheck {
        /// Config file; defaults to the built-in tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Probed coordinates per parameter tensor.
        #[arg(long, default_value_t = 5)]
        probes: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Cubic input edge length.
        #[arg(long, default_value_t = 8)]
        dims: usize,
        /// Test hook: corrupt one analytic gradient to force a failure.
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Predict labels for one SSV1 volume.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export mid-volume input/truth/prediction slice images.
        #[arg(long)]
        export_slices: bool,
        /// Ground-truth labels for the truth panel of the slice export.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Slice axis for the export (0=H, 1=W, 2=D).
        #[arg(long, default_value_t = 2)]
        axis: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    spineseg_core::threading::set_threads(cli.threads);
    match cli.command {
        Command::Synth {
            n,
            dims,
            vertebrae,
            noise,
            out,
        } => commands::cmd_synth(
            n,
            [dims, dims, dims],
            vertebrae,
            noise,
            cli.seed.unwrap_or(0),
            &out,
        ),
        Command::Train {
            config,
            out,
            resume,
        } => commands::cmd_train(&config, cli.seed, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            exclude_background,
        } => commands::cmd_eval(&checkpoint, &data, &out, exclude_background),
        Command::Ablation { config, out } => commands::cmd_ablation(&config, cli.seed, &out),
        Command::Gradcheck {
            config,
            probes,
            step,
            dims,
            corrupt_grad,
        } => commands::cmd_gradcheck(config.as_deref(), cli.seed, probes, step, dims, corrupt_grad)
            .map(|_| ()),
        Command::Infer {
            checkpoint,
            volume,
            out,
            export_slices,
            labels,
            axis,
        } => commands::cmd_infer(
            &checkpoint,
            &volume,
            &out,
            export_slices,
            labels.as_deref(),
            axis,
        )
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code as u8)
        }
    }
}
