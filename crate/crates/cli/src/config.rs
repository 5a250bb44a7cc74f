//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use medm::data::{self, DomainPairDataset, GeneratorSpec, SplitConfig};
use medm::network::MlpConfig;
use medm::selection::SweepGrid;
use medm::trainer::HyperConfig;
use serde::Deserialize;

use crate::CliError;

/// Layer sizes and init seed. Input width and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub init_seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = MlpConfig::default();
        Self {
            hidden_dim: d.hidden_dim,
            feature_dim: d.feature_dim,
            init_seed: d.init_seed,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: Option<GeneratorSpec>,
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default)]
    pub grid: SweepGrid,
    #[serde(default)]
    pub split: SplitConfig,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid {}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Reads a config file; a relative `dataset` path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = read_toml(path)?;
        if let (Some(ds), Some(dir)) = (&cfg.dataset, path.parent()) {
            if ds.is_relative() {
                cfg.dataset = Some(dir.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.hyper.seed = seed;
        if let Some(g) = &mut self.generator {
            g.seed = seed;
        }
    }

    pub fn dataset(&self) -> Result<DomainPairDataset, CliError> {
        match (&self.generator, &self.dataset) {
            (Some(spec), None) => Ok(data::generate_with_split(spec, self.split)?),
            (None, Some(path)) => Ok(data::load_csv_with_split(path, self.split)?),
            _ => Err(CliError::usage(
                "config must set exactly one of `dataset` or a [generator] section",
            )),
        }
    }

    pub fn network_for(&self, ds: &DomainPairDataset) -> MlpConfig {
        MlpConfig {
            input_dim: ds.feature_dim(),
            hidden_dim: self.network.hidden_dim,
            feature_dim: self.network.feature_dim,
            num_classes: ds.num_classes(),
            dropout_rate: self.hyper.dropout_rate,
            init_seed: self.network.init_seed,
        }
    }
}
