use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "gridfree",
    version,
    about = "Grid-free PM2.5 interpolation from sparse sensors",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.\n\
                  GRIDFREE_THREADS caps the number of worker threads."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration file (`key = value` lines)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic station dataset with a known ground truth
    Synth(SynthArgs),
    /// Clean, split and scale a station CSV into a prepared directory
    Preprocess(PreprocessArgs),
    /// Train a model on a prepared directory
    Train(TrainArgs),
    /// Predict PM2.5 (µg/m³) at query points
    Predict(QueryArgs),
    /// Ensemble mean, variance and CV at query points
    Uq(UqArgs),
    /// Score a model on one split of its prepared directory
    Evaluate(EvaluateArgs),
    /// Train with and without a region and score both on it
    Loso(LosoArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Layout {
    Uniform,
    DenseSparse,
    TwoRegion,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub sites: usize,
    #[arg(long, default_value_t = 120)]
    pub days: usize,
    #[arg(long, default_value_t = 3)]
    pub sources: usize,
    /// Measurement noise standard deviation, µg/m³
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = Layout::Uniform)]
    pub layout: Layout,
    /// Fraction of (site, day) observations to drop
    #[arg(long, default_value_t = 0.0)]
    pub missing: f64,
}


#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Record,
    Site,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Station CSV, or a directory holding stations.csv
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Covariate grid CSV to attach
    #[arg(long, value_name = "FILE")]
    pub covariates: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Site)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Model artifact to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Training log CSV [default: <out>.log.csv]
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Checkpoint file, written every epoch and resumed from when present
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Model artifact
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Prepared directory supplying the sensors
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Query point `lat,lon,YYYY-MM-DD`; repeatable
    #[arg(long, value_name = "LAT,LON,DATE", allow_hyphen_values = true)]
    pub query: Vec<String>,
    /// CSV of query points with columns lat,lon,date and optional covariates
    #[arg(long, value_name = "FILE")]
    pub query_file: Option<PathBuf>,
    /// Write the CSV here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Gaussian,
    Nearest,
    All,
}

#[derive(Debug, Args)]
pub struct UqArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Ensemble size, at least 2 [default: mc_samples from the configuration]
    #[arg(long)]
    pub m: Option<usize>,
    /// How each member draws its sensors
    #[arg(long, value_enum, default_value_t = PolicyArg::Gaussian)]
    pub policy: PolicyArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model artifact
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Prepared directory the model was trained on
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Report directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Extra observed-value range `MIN-MAX` to report on; repeatable
    #[arg(long, value_name = "MIN-MAX")]
    pub range: Vec<String>,
}

#[derive(Debug, Args)]
pub struct LosoArgs {
    /// Station CSV, or a directory holding stations.csv
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Held-out box `lat_min,lat_max,lon_min,lon_max`
    #[arg(long, value_name = "BOX", allow_hyphen_values = true)]
    pub region: String,
    /// Report directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
