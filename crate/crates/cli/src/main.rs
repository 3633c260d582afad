//! `prnufuse`: simulate a corpus, train the per-model detectors, calibrate
//! thresholds, localize forgeries and run the benchmark suite.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prnufuse_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "prnufuse",
    version,
    about = "PRNU and camera-model fusion for forgery localization"
)]
pub struct Cli {
    /// Worker threads for all parallel stages (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic corpus a plan describes, with its manifest.
    Simulate {
        #[command(flatten)]
        plan: PlanArgs,
        /// Output directory for images, manifest.csv and plan.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the PRNU fingerprint of every device from its flat images.
    Fingerprint {
        #[command(flatten)]
        io: StoreArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Train the camera-model classifiers.
    TrainCmi {
        #[command(flatten)]
        io: StoreArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// Train only these models (repeatable); default is every model.
        #[arg(long = "model", value_name = "ID")]
        models: Vec<String>,
    },
    /// Train the fusion networks; needs fingerprints and classifiers.
    TrainFusion {
        #[command(flatten)]
        io: StoreArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Pick per-model map thresholds on forgeries built from the `f` set.
    Calibrate {
        #[command(flatten)]
        io: StoreArgs,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Produce a tamper map and binary mask for one image.
    Detect {
        /// Artifact store holding fingerprints, networks and thresholds.
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        /// Image to analyze (PPM).
        #[arg(long)]
        image: PathBuf,
        /// Camera model the image claims to come from.
        #[arg(long)]
        model: String,
        /// Device whose fingerprint is used; default is the model's
        /// training device.
        #[arg(long)]
        device: Option<String>,
        /// Ground-truth mask (PGM); adds F-score counts to the metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Threshold override; default is the calibrated one.
        #[arg(long)]
        tau: Option<f64>,
        /// Output path of the probability map (PGM plus a .txt sidecar).
        #[arg(long)]
        map: PathBuf,
        /// Output path of the binary mask (PGM).
        #[arg(long)]
        mask: PathBuf,
    },
    /// Run the AUC, recompression, unseen-device and forgery experiments.
    Bench {
        #[command(flatten)]
        io: StoreArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// Report directory for results.csv and summary.txt.
        #[arg(long)]
        out: PathBuf,
        /// Train and store any artifact that is missing instead of failing.
        #[arg(long)]
        train: bool,
    },
}

#[derive(Args, Debug)]
pub struct StoreArgs {
    /// Corpus directory (or its manifest.csv).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Artifact store directory.
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Reduced set sizes and a narrow classifier.
    Desk,
    /// Full set sizes, block counts and classifier width.
    Full,
}

/// Plan source and overrides. Flags win over the plan file.
#[derive(Args, Debug, Default)]
pub struct PlanArgs {
    /// Plan file; default is the corpus's plan.txt, else the desk plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Root seed for every stage.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Sliding-window stride in pixels.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Denoiser noise level.
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Classifier training epochs.
    #[arg(long)]
    pub cmi_epochs: Option<u32>,
    /// Fusion training epochs.
    #[arg(long)]
    pub fusion_epochs: Option<u32>,
}

/// Process exit status for a failed run.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dependency(_) => 3,
        Error::Invariant(_) => 5,
        _ => 4,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::Format(_) | Error::Truncated { .. } => "format",
        Error::Bounds(_) => "bounds",
        Error::Dimension(_) => "dimension",
        Error::Argument(_) => "argument",
        Error::Shape { .. } => "shape",
        Error::Dependency(_) => "dependency",
        Error::Plan(_) => "plan",
        Error::Invariant(_) => "invariant",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!(
                "{}",
                serde_json::json!({"error": "usage", "message": e.to_string()})
            );
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": error_kind(&e), "message": e.to_string()})
            );
            ExitCode::from(exit_code(&e))
        }
    }
}
