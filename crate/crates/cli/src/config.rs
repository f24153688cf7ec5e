use std::path::{Path, PathBuf};

use fedml_core::analysis::ProbeConfig;
use fedml_core::data::{MnistPartitionSpec, SizeSpec, WeightMode};
use fedml_core::federation::FedConfig;
use fedml_core::model::LossSpec;
use fedml_core::robust::RobustConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the directory that relative MNIST paths
/// are resolved against.
pub const DATA_DIR_ENV: &str = "FEDML_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const MNIST_IMAGES: &str = "desk-images-idx3-ubyte.gz";
pub const MNIST_LABELS: &str = "desk-labels-idx1-ubyte.gz";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    Fedml,
    Fedavg,
    RobustFedml,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        alpha_tilde: f64,
        beta_tilde: f64,
        #[serde(default = "default_synthetic_nodes")]
        num_nodes: usize,
        #[serde(default = "SizeSpec::synthetic_default")]
        size: SizeSpec,
    },
    Mnist {
        #[serde(default = "default_images")]
        images: PathBuf,
        #[serde(default = "default_labels")]
        labels: PathBuf,
        #[serde(default = "default_mnist_nodes")]
        num_nodes: usize,
        #[serde(default)]
        partition: MnistPartitionSpec,
    },
    /// A federation JSON written by `generate`.
    File { path: PathBuf },
}

fn default_synthetic_nodes() -> usize {
    50
}

fn default_mnist_nodes() -> usize {
    100
}

fn default_images() -> PathBuf {
    PathBuf::from(MNIST_IMAGES)
}

fn default_labels() -> PathBuf {
    PathBuf::from(MNIST_LABELS)
}

fn default_source_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Probe points used to fit the dissimilarity constant, and again for the holdout.
    #[serde(default = "default_c_probes")]
    pub c_probes: usize,
    /// Reference run length as a multiple of `T`.
    #[serde(default = "default_reference_factor")]
    pub reference_factor: usize,
}

fn default_c_probes() -> usize {
    30
}

fn default_reference_factor() -> usize {
    10
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            c_probes: default_c_probes(),
            reference_factor: default_reference_factor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub fed: FedConfig,
    #[serde(default)]
    pub robust: Option<RobustConfig>,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default = "default_source_fraction")]
    pub source_fraction: f64,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    /// Master seed; copied into `fed.seed` and the probe seed on resolution.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the master seed, resolves data paths and checks consistency.
    pub fn resolve(mut self, data_dir: &Path) -> Result<Self, CliError> {
        self.fed.seed = self.seed;
        self.analysis.probe.seed = self.seed;
        if let DatasetSpec::Mnist { images, labels, .. } = &mut self.dataset {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = data_dir.join(&*p);
                }
            }
        }
        self.fed.validate()?;
        self.loss.validate()?;
        if !(self.source_fraction > 0.0 && self.source_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "source_fraction must be in (0, 1), got {}",
                self.source_fraction
            )));
        }
        match (self.algorithm, &self.robust) {
            (Algorithm::RobustFedml, None) => {
                return Err(CliError::Config("algorithm robust-fedml needs a `robust` section".into()))
            }
            (Algorithm::RobustFedml, Some(rc)) => rc.validate()?,
            (_, Some(_)) => {
                return Err(CliError::Config(
                    "a `robust` section is only valid with algorithm robust-fedml".into(),
                ))
            }
            _ => {}
        }
        Ok(self)
    }
}

/// `$FEDML_DATA_DIR`, or `data/mnist` relative to the working directory.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}
