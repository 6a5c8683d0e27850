//! Run configuration: a TOML file, overridden by flags, resolved once and
//! written to the output directory before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use rephrase::corpus::{load_dataset, Dataset, DatasetFormat, TsvColumns};
use rephrase::metrics::MetricConfig;
use rephrase::models::{DecodeStrategy, NoisePolicy, PointerGenConfig, TaggerConfig, TransformerConfig};
use rephrase::train::{CopyLossConfig, DistillConfig, GridSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random component: data generation, initialization,
    /// shuffling, dropout, noise.
    pub seed: u64,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub decode: DecodeConfig,
    pub pointer_lstm: PointerGenConfig,
    pub mini_transformer: TransformerConfig,
    pub tagger: TaggerConfig,
    /// Phrase vocabulary size for the tagger.
    pub phrases_top_k: usize,
    pub train: TrainConfig,
    pub copy: CopyLossConfig,
    pub noise: NoisePolicy,
    pub distill: DistillConfig,
    pub grid: GridConfig,
    pub metrics: MetricConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `jsonl` or `tsv`; inferred from the file extension when empty.
    pub format: String,
    /// Column layout for `tsv` files.
    pub tsv: Option<TsvColumns>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { max_size: 8000, min_count: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { strategy: DecodeStrategy::Greedy, max_len: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Epochs per cell; the winning cell is retrained with `train.epochs`.
    pub epochs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let GridSpec { lambdas, thresholds } = GridSpec::default();
        GridConfig { lambdas, thresholds, epochs: 5 }
    }
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec { lambdas: self.lambdas.clone(), thresholds: self.thresholds.clone() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        if cfg.phrases_top_k == 0 {
            cfg.phrases_top_k = 500;
        }
        Ok(cfg)
    }

    /// Propagates the top-level seed and checks every section.
    pub fn resolve(&mut self, seed: Option<u64>) -> Result<(), CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.pointer_lstm.init_seed = self.seed;
        self.mini_transformer.init_seed = self.seed;
        self.tagger.init_seed = self.seed;
        self.train.validate()?;
        self.copy.validate()?;
        if self.decode.max_len == 0 || self.distill.max_decode_len == 0 {
            return Err(CliError::Usage("decode max_len must be positive".into()));
        }
        if self.grid.epochs == 0 {
            return Err(CliError::Usage("grid.epochs must be positive".into()));
        }
        Ok(())
    }

    /// Writes the resolved config as `config.toml` under `out`.
    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.into()))?;
        let text = toml::to_string(self).map_err(|e| CliError::Runtime(e.into()))?;
        fs::write(out.join(RESOLVED_CONFIG), text).map_err(|e| CliError::Runtime(e.into()))
    }

    pub fn format_for(&self, path: &Path) -> Result<DatasetFormat, CliError> {
        let format = if self.data.format.is_empty() {
            match path.extension().and_then(|e| e.to_str()) {
                Some("tsv") => "tsv",
                _ => "jsonl",
            }
        } else {
            self.data.format.as_str()
        };
        match format {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "tsv" => {
                self.data.tsv.clone().map(DatasetFormat::Tsv).ok_or_else(|| {
                    CliError::Usage("tsv data needs column indices (--tsv-query, --tsv-class, ...)".into())
                })
            }
            other => Err(CliError::Usage(format!("unknown data format {other:?}"))),
        }
    }

    pub fn dataset(&self, path: &Path) -> Result<Dataset, CliError> {
        existing(path)?;
        Ok(load_dataset(path, &self.format_for(path)?)?)
    }
}

pub fn existing(path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}
