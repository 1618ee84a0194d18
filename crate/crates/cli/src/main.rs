//! `lnsynth`: phantom generation, preprocessing, diffusion training and
//! sampling, segmentation training, prediction, evaluation and slice
//! previews.

mod commands;
mod slices;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lnsynth_core::seg::Strategy;
use lnsynth_core::Error;

#[derive(Parser)]
#[command(name = "lnsynth", version, about = "Lymph-node CT synthesis with mask-conditioned diffusion")]
struct Cli {
    /// Worker threads for per-case work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom cases and a manifest.
    Phantom {
        /// Phantom spec (TOML); defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Crop, resample, build anatomy masks and window a raw dataset.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional denoiser.
    TrainDiffusion {
        #[arg(long)]
        config: PathBuf,
        /// Prepared dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a diffusion checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate paired image and mask cases from prepared conditions.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prepared dataset whose masks serve as conditions.
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long, value_enum, default_value = "on")]
        transform: Switch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the sampling section of the checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the segmenter on real, synthetic or mixed data.
    TrainSeg {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Synthetic draws per real case in one epoch.
        #[arg(long, default_value_t = 1)]
        multiplier: usize,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        synt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the epoch's cases in imagesTr/labelsTr layout here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Segment prepared cases with a trained segmenter.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ROI margin around the node box in mm; defaults to the config's test margin.
        #[arg(long)]
        roi_mm: Option<f64>,
        /// Segment the whole volume.
        #[arg(long, conflicts_with = "roi_mm")]
        no_roi: bool,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// Directory of `{id}.nii.gz` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Prepared dataset with ground-truth node masks.
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = lnsynth_core::metrics::DEFAULT_NODE_DSC_THRESHOLD)]
        node_threshold: f64,
    },
    /// Write orthogonal mid-slices of a volume as PNG.
    Slices {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label volume drawn in red over the image.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Display window `LO,HI`; the volume range when omitted.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        window: Option<Vec<f64>>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::Numeric(_) => 4,
        Error::Shape { .. } | Error::Timestep { .. } | Error::Data(_) | Error::Io { .. } | Error::Grad(_) => 3,
    }
}

fn run(cli: Cli) -> lnsynth_core::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| Error::Invalid(format!("--jobs: {e}")))?;
    match cli.command {
        Command::Phantom { spec, out, count } => commands::phantom(spec.as_deref(), &out, count),
        Command::Prepare { manifest, config, out } => commands::prepare(&manifest, &config, &out),
        Command::TrainDiffusion { config, data, out, resume } => commands::train_diffusion(&config, &data, &out, resume.as_deref()),
        Command::Sample { checkpoint, conditions, transform, seed, count, out, config } => commands::sample(commands::SampleArgs {
            checkpoint: &checkpoint,
            conditions: &conditions,
            transform: matches!(transform, Switch::On),
            seed,
            count,
            out: &out,
            config: config.as_deref(),
        }),
        Command::TrainSeg { config, strategy, multiplier, real, synt, out, export } => commands::train_seg(commands::TrainSegArgs {
            config: &config,
            strategy,
            multiplier,
            real: real.as_deref(),
            synt: synt.as_deref(),
            out: &out,
            export: export.as_deref(),
        }),
        Command::Predict { checkpoint, data, out, roi_mm, no_roi } => commands::predict(&checkpoint, &data, &out, roi_mm, no_roi),
        Command::Evaluate { pred, gt, out, node_threshold } => commands::evaluate(&pred, &gt, &out, node_threshold),
        Command::Slices { case, out, labels, window } => {
            slices::write_slices(&case, labels.as_deref(), &out, window.map(|w| [w[0], w[1]]))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
