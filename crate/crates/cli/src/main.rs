use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sbss_cli::commands::{self, Globals};

#[derive(Parser)]
#[command(
    name = "sbss",
    version,
    about = "Multi-scale segmentation fusion with budgeted error correction"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus (PPM images, PGM labels, manifest).
    Synth,
    /// Train one correction network per scale transition.
    TrainEcn,
    /// Segment an image (.ppm) or a corpus directory; defaults to the configured scenes.
    Infer { input: Option<PathBuf> },
    /// Score predicted label maps against ground truth.
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Class count; defaults to the ground-truth manifest or the largest label seen.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Per-class IoU at each scale and the preferred scale of every class.
    Profile {
        /// Comma-separated scales; defaults to `profile_scales`, then the schedule's scales.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Print the processed-area ratio of the preset schedules, or of the configured one.
    Budget,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SBSS_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    let result = match cli.command {
        Command::Synth => commands::synth(&g),
        Command::TrainEcn => commands::train_ecn(&g),
        Command::Infer { input } => commands::infer(&g, input.as_deref()),
        Command::Eval {
            pred_dir,
            gt_dir,
            classes,
        } => commands::eval(&g, &pred_dir, &gt_dir, classes),
        Command::Profile { scales } => commands::profile(&g, scales),
        Command::Budget => commands::budget(&g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
