mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "se-explain", version, about = "SE channel attention as an explanation signal for CNN classifiers")]
struct Cli {
    /// Worker threads (default: number of cores).
    #[arg(long, global = true, value_parser = positive_usize)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train SmallCNN with or without an SE block.
    Train(TrainArgs),
    /// Render a saliency heatmap for one image.
    Explain(ExplainArgs),
    /// Deletion/insertion AUCs over test images.
    Metrics(MetricsArgs),
    /// Test accuracy when only the top SE channels are kept.
    Ablate(AblateArgs),
    /// Histogram and moments of pooled, centred SE values.
    Distfit(DistfitArgs),
    /// Write a procedural dataset in the CIFAR-10 binary layout.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset: cifar10, cifar100 or mnist.
    #[arg(long, default_value = "cifar10")]
    data: String,
    /// Dataset directory (default: $SE_EXPLAIN_DATA_DIR).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Include the SE block (default).
    #[arg(long, overrides_with = "no_se")]
    se: bool,
    /// Train the plain baseline.
    #[arg(long)]
    no_se: bool,
    #[arg(long, default_value_t = se_explain::train::DEFAULT_EPOCHS, value_parser = positive_usize)]
    epochs: usize,
    #[arg(long, default_value_t = se_explain::train::DEFAULT_LR, allow_negative_numbers = true, value_parser = non_negative)]
    lr: f64,
    #[arg(long, default_value_t = se_explain::train::DEFAULT_MOMENTUM, allow_negative_numbers = true, value_parser = non_negative)]
    momentum: f64,
    #[arg(long, default_value_t = se_explain::train::DEFAULT_WEIGHT_DECAY, allow_negative_numbers = true, value_parser = non_negative)]
    weight_decay: f64,
    #[arg(long, default_value_t = se_explain::train::DEFAULT_BATCH_SIZE, value_parser = positive_usize)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the training split to use.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true, value_parser = fraction)]
    subset: f64,
    /// SE reduction ratio.
    #[arg(long, default_value_t = se_explain::se::DEFAULT_REDUCTION, value_parser = positive_usize)]
    reduction: usize,
    /// Disable flip/crop augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Checkpoint path (default: model_<data>_<se|nose>.ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// PPM or PNG image matching the model input size.
    #[arg(long, conflicts_with = "index", required_unless_present = "index")]
    image: Option<PathBuf>,
    /// Test-split image index (needs --data/--dir).
    #[arg(long)]
    index: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "se")]
    method: String,
    #[arg(long, default_value_t = se_explain::se::DEFAULT_TOP_FRACTION, allow_negative_numbers = true, value_parser = fraction)]
    top_frac: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true, value_parser = unit_interval)]
    alpha: f64,
    /// Seed for the random method.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image; `.png` selects PNG, anything else PPM.
    #[arg(long, default_value = "heatmap.ppm")]
    out: PathBuf,
    /// Also write the saliency grid as CSV beside the image.
    #[arg(long)]
    dump_saliency: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "se")]
    method: String,
    #[arg(long, default_value_t = 200, value_parser = positive_usize)]
    n: usize,
    #[arg(long, default_value_t = se_explain::metrics::DEFAULT_STEPS, value_parser = at_least_two)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = se_explain::se::DEFAULT_TOP_FRACTION, allow_negative_numbers = true, value_parser = fraction)]
    top_frac: f64,
    #[arg(long, default_value_t = se_explain::metrics::DEFAULT_BLUR_SIGMA, allow_negative_numbers = true, value_parser = positive)]
    blur_sigma: f64,
    #[arg(long, default_value_t = se_explain::metrics::DEFAULT_BLUR_RADIUS)]
    blur_radius: usize,
    /// JSON summary path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-image CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.10,0.25,0.50,0.75,1.0", allow_negative_numbers = true, value_parser = fraction)]
    fractions: Vec<f64>,
    /// `random` adds a column with random channel subsets of the same size.
    #[arg(long, default_value = "none", value_parser = ["none", "random"])]
    control: String,
    /// Number of random control draws averaged per fraction.
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    control_seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistfitArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 2000, value_parser = positive_usize)]
    max_samples: usize,
    #[arg(long, default_value_t = 61, value_parser = positive_usize)]
    bins: usize,
    /// Histogram CSV path (default: distfit_hist.csv).
    #[arg(long, default_value = "distfit_hist.csv")]
    hist: PathBuf,
    /// Moments JSON path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; receives data_batch_1..5.bin and test_batch.bin.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 5000, value_parser = positive_usize)]
    train: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive_usize)]
    test: usize,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..=10))]
    classes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        Ok(_) => Err("must be at least 2".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| if v >= 0.0 { Ok(v) } else { Err("must be >= 0".into()) })
}

fn positive(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| if v > 0.0 { Ok(v) } else { Err("must be > 0".into()) })
}

fn fraction(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| if v > 0.0 && v <= 1.0 { Ok(v) } else { Err("must be in (0, 1]".into()) })
}

fn unit_interval(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| if (0.0..=1.0).contains(&v) { Ok(v) } else { Err("must be in [0, 1]".into()) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Explain(a) => commands::explain(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Distfit(a) => commands::distfit(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
