mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "paintransfer", version, about = "Two-stream ConvLSTM pain classification: training, transfer, MIL evaluation and Grad-CAM")]
struct Cli {
    /// Debug-level logging.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DomainKind {
    Dense,
    Sparse,
}

#[derive(Subcommand)]
enum Command {
    /// Subsample and resize raw image sequences into frame directories and a manifest.
    PrepareFrames {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV: video_id,subject_id,domain_id,phase,raw_score,source_dir,source_fps.
        #[arg(long)]
        listing: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute Horn-Schunck flow images for every video of a manifest.
    ComputeFlow {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset (frames, masks, manifest, ground truth).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        kind: Option<DomainKind>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also compute the flow stream.
        #[arg(long)]
        with_flow: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated leave-one-subject-out cross-validation.
    TrainCv {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all subjects for a fixed or CV-derived number of epochs.
    TrainFull {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Cross-validation run whose mean best epoch is scaled to the full dataset.
        #[arg(long)]
        cv_run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation of a trained model on another domain.
    Transfer {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file or train-full run directory.
        #[arg(long)]
        source: PathBuf,
        /// Target-domain manifest.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out fine-tuning of the classification head on a target domain.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Video-level F1 from clip predictions, with and without the top-k% filter.
    MilEval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expert accuracies per pain threshold.
    RaterAnalysis {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV: rater_id,clip_id,rating.
        #[arg(long)]
        ratings: PathBuf,
        /// CSV: clip_id,label.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        thresholds: Vec<u8>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM overlays for confidently classified clips.
    Explain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file or train-full run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Explain these clips (`<video_id>:<start_frame>`) instead of choosing.
        #[arg(long = "clip")]
        clips: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print result tables from run directories or a clip-comparison CSV.
    Report {
        paths: Vec<PathBuf>,
        /// Rater count for clip-comparison CSVs.
        #[arg(long, default_value_t = 27)]
        n_raters: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run::init_logging(cli.verbose);
    let result = match cli.command {
        Command::PrepareFrames { config, listing, out } => commands::prepare_frames(config, listing, &out),
        Command::ComputeFlow { config, manifest, out } => commands::compute_flow(config, manifest, &out),
        Command::Synth {
            config,
            kind,
            seed,
            with_flow,
            out,
        } => commands::synth(config, kind, seed, with_flow, &out),
        Command::TrainCv { config, manifest, out } => commands::train_cv(config, manifest, &out),
        Command::TrainFull {
            config,
            manifest,
            epochs,
            cv_run,
            out,
        } => commands::train_full(config, manifest, epochs, cv_run, &out),
        Command::Transfer { config, source, target, out } => commands::transfer(config, &source, &target, &out),
        Command::Finetune { config, source, target, out } => commands::finetune(config, &source, &target, &out),
        Command::MilEval {
            config,
            predictions,
            manifest,
            out,
        } => commands::mil_eval(config, &predictions, manifest, &out),
        Command::RaterAnalysis {
            config,
            ratings,
            labels,
            thresholds,
            out,
        } => commands::rater_analysis(config, &ratings, &labels, &thresholds, &out),
        Command::Explain {
            config,
            checkpoint,
            manifest,
            clips,
            out,
        } => commands::explain(config, &checkpoint, manifest, &clips, &out),
        Command::Report { paths, n_raters } => commands::report(&paths, n_raters),
    };
    match result {
        Ok(()) => {
            log::logger().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
