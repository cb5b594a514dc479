//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{FallbackArg, MeasureArg, Method, OptimizerArg, PoolModeArg};

/// Camera-aware test-time adaptation over pre-extracted ReID embeddings.
///
/// Typical pipeline: `gen` a synthetic biased dataset (or bring your own
/// NPY + manifest pairs), `init-stats` the per-camera statistics, `adapt`
/// the query stream, then `eval` the result. `sweep` grids hyperparameters
/// and `curve` exports error-rate-vs-distance tables.
#[derive(Debug, Parser)]
#[command(name = "dart3", version, max_term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic camera-biased dataset with ground truth.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: GenArgs,
    },
    /// Compute per-camera mean/scale statistics from query+gallery files.
    InitStats {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: InitStatsArgs,
    },
    /// Transform the query stream (and gallery) with the chosen method.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: AdaptArgs,
    },
    /// Retrieval metrics (mAP, CMC) plus the camera-bias NMI.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Run adapt+eval over a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: SweepArgs,
    },
    /// Export an error-rate-vs-nearest-distance curve table.
    Curve {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        args: CurveArgs,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file (TOML); flags override file values.
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
    /// Master seed; every randomized stage derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n_ids: Option<usize>,
    #[arg(long)]
    pub samples_per_id_query: Option<usize>,
    #[arg(long)]
    pub samples_per_id_gallery: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_cameras: Option<usize>,
    #[arg(long)]
    pub id_center_sigma: Option<f64>,
    #[arg(long)]
    pub within_id_sigma: Option<f64>,
    /// Log-normal spread of the per-camera scale vectors.
    #[arg(long)]
    pub alpha_log_sigma: Option<f64>,
    /// Per-coordinate standard deviation of the per-camera shift vectors.
    #[arg(long)]
    pub beta_sigma: Option<f64>,
    /// Per-sample noise on the bias parameters.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InitStatsArgs {
    /// Query array file (manifest expected at <stem>.manifest.json).
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery array file.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, value_enum)]
    pub pool_mode: Option<PoolModeArg>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Query array file.
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery array file.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Precomputed statistics file; computed from the inputs when omitted.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Reset parameters to their initialization before every batch.
    #[arg(long)]
    pub episodic: bool,
    /// Grounding samples appended to each batch (drawn from the gallery).
    #[arg(long)]
    pub grounding: Option<usize>,
    #[arg(long, value_enum)]
    pub fallback: Option<FallbackArg>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    pub pool_mode: Option<PoolModeArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Query array file (labels required).
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery array file.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Deepest CMC rank to report.
    #[arg(long)]
    pub max_rank: Option<usize>,
    /// Skip the k-means camera-bias NMI.
    #[arg(long)]
    pub no_nmi: bool,
    /// Cluster count for the NMI (default: number of distinct cameras).
    #[arg(long)]
    pub nmi_clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub adapt: AdaptArgs,
    /// Comma-separated tau values.
    #[arg(long, value_delimiter = ',')]
    pub tau_list: Option<Vec<f64>>,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Comma-separated step counts.
    #[arg(long, value_delimiter = ',')]
    pub steps_list: Option<Vec<usize>>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batch_size_list: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Query array file (labels required).
    #[arg(long)]
    pub query: PathBuf,
    /// Gallery array file.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long, value_enum)]
    pub measure: Option<MeasureArg>,
    /// Number of equal-count bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Top-k for the entropy proxy.
    #[arg(long)]
    pub k: Option<usize>,
    /// Temperature for the entropy proxy.
    #[arg(long)]
    pub tau: Option<f64>,
}
