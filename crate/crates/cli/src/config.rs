//! Run configuration: optional TOML file sections merged with CLI flags.
//!
//! Resolution order is flag > file > default. Every command writes its fully
//! resolved section (plus the seed) next to its outputs; feeding that file
//! back through `--config` reproduces the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dart3_core::adapter::{AdaptMode, AdapterConfig, FallbackKind, ObjectiveKind, OptimizerKind};
use dart3_core::camnorm::PoolMode;
use dart3_core::error::{Error, Result};
use dart3_core::metrics::CurveMeasure;
use dart3_core::synth_bias::SynthConfig;

/// Which transformation `adapt` applies to the query stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Method {
    Noadapt,
    Norm,
    Dart3Lite,
    TempLite,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Noadapt => write!(f, "noadapt"),
            Method::Norm => write!(f, "norm"),
            Method::Dart3Lite => write!(f, "dart3_lite"),
            Method::TempLite => write!(f, "temp_lite"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lower")]
pub enum FallbackArg {
    Global,
    Identity,
}

impl From<FallbackArg> for FallbackKind {
    fn from(value: FallbackArg) -> Self {
        match value {
            FallbackArg::Global => FallbackKind::GlobalStats,
            FallbackArg::Identity => FallbackKind::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lower")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(value: OptimizerArg) -> Self {
        match value {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lower")]
pub enum PoolModeArg {
    Pooled,
    Separate,
}

impl From<PoolModeArg> for PoolMode {
    fn from(value: PoolModeArg) -> Self {
        match value {
            PoolModeArg::Pooled => PoolMode::Pooled,
            PoolModeArg::Separate => PoolMode::Separate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum MeasureArg {
    Euclidean,
    Cosine,
    EntropyProxy,
}

impl From<MeasureArg> for CurveMeasure {
    fn from(value: MeasureArg) -> Self {
        match value {
            MeasureArg::Euclidean => CurveMeasure::Euclidean,
            MeasureArg::Cosine => CurveMeasure::Cosine,
            MeasureArg::EntropyProxy => CurveMeasure::EntropyProxy,
        }
    }
}

/// The on-disk configuration file: every field optional, sections per
/// subcommand.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub gen: GenSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub curve: CurveSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub n_ids: Option<usize>,
    pub samples_per_id_query: Option<usize>,
    pub samples_per_id_gallery: Option<usize>,
    pub dim: Option<usize>,
    pub n_cameras: Option<usize>,
    pub id_center_sigma: Option<f64>,
    pub within_id_sigma: Option<f64>,
    pub alpha_log_sigma: Option<f64>,
    pub beta_sigma: Option<f64>,
    pub noise_sigma: Option<f64>,
}

/// Fully resolved generation parameters (serialized beside the outputs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub n_ids: usize,
    pub samples_per_id_query: usize,
    pub samples_per_id_gallery: usize,
    pub dim: usize,
    pub n_cameras: usize,
    pub id_center_sigma: f64,
    pub within_id_sigma: f64,
    pub alpha_log_sigma: f64,
    pub beta_sigma: f64,
    pub noise_sigma: f64,
}

impl GenParams {
    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_ids: self.n_ids,
            samples_per_id_query: self.samples_per_id_query,
            samples_per_id_gallery: self.samples_per_id_gallery,
            dim: self.dim,
            n_cameras: self.n_cameras,
            id_center_sigma: self.id_center_sigma,
            within_id_sigma: self.within_id_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub method: Option<Method>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub episodic: Option<bool>,
    pub grounding: Option<usize>,
    pub fallback: Option<FallbackArg>,
    pub optimizer: Option<OptimizerArg>,
    pub pool_mode: Option<PoolModeArg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptParams {
    pub method: Method,
    pub tau: f64,
    pub k: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub episodic: bool,
    pub grounding: usize,
    pub fallback: FallbackArg,
    pub optimizer: OptimizerArg,
    pub pool_mode: PoolModeArg,
}

impl AdaptParams {
    pub fn adapter_config(&self, seed: u64) -> AdapterConfig {
        AdapterConfig {
            tau: self.tau,
            k: self.k,
            lr: self.lr,
            steps_per_batch: self.steps,
            batch_size: self.batch_size,
            mode: if self.episodic {
                AdaptMode::Episodic
            } else {
                AdaptMode::NonEpisodic
            },
            objective: match self.method {
                Method::TempLite => ObjectiveKind::Temp,
                _ => ObjectiveKind::Dart3,
            },
            grounding_per_batch: self.grounding,
            optimizer: self.optimizer.into(),
            seed,
            unseen_camera_fallback: self.fallback.into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub max_rank: Option<usize>,
    pub nmi: Option<bool>,
    pub nmi_clusters: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalParams {
    pub max_rank: usize,
    pub nmi: bool,
    /// 0 means "one cluster per distinct camera".
    pub nmi_clusters: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSection {
    pub measure: Option<MeasureArg>,
    pub bins: Option<usize>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveParams {
    pub measure: MeasureArg,
    pub bins: usize,
    pub k: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub tau: Option<Vec<f64>>,
    pub k: Option<Vec<usize>>,
    pub steps: Option<Vec<usize>>,
    pub batch_size: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepParams {
    pub tau: Vec<f64>,
    pub k: Vec<usize>,
    pub steps: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub adapt: AdaptParams,
}

/// `seed` plus one resolved section, in the same shape `FileConfig` parses.
#[derive(Debug, Serialize)]
pub struct Resolved<T: Serialize> {
    pub seed: u64,
    #[serde(flatten)]
    pub section: T,
}

pub fn write_resolved<T: Serialize>(path: &Path, seed: u64, section: T) -> Result<()> {
    let resolved = Resolved { seed, section };
    let text = toml::to_string(&resolved)
        .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_parses() {
        let config: FileConfig = toml::from_str("").unwrap();
        assert!(config.seed.is_none());
        assert!(config.adapt.tau.is_none());
    }

    #[test]
    fn sections_parse_with_snake_case_enums() {
        let text = r#"
seed = 7
[adapt]
method = "dart3_lite"
tau = 50.0
fallback = "identity"
[curve]
measure = "entropy_proxy"
"#;
        let config: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, Some(7));
        assert_eq!(config.adapt.method, Some(Method::Dart3Lite));
        assert_eq!(config.adapt.fallback, Some(FallbackArg::Identity));
        assert_eq!(config.curve.measure, Some(MeasureArg::EntropyProxy));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = "[adapt]\nnot_a_field = 1\n";
        assert!(toml::from_str::<FileConfig>(text).is_err());
    }
}
