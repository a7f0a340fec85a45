use std::fs;
use std::path::{Path, PathBuf};

use deal_core::explain::Backend;
use deal_core::metrics::{MetricSelection, DEFAULT_THRESHOLD};
use deal_core::model::MiniClipConfig;
use deal_core::objective::{DealConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run can be configured with. Each command reads the sections
/// it needs; flags given on the command line override the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: MiniClipConfig,
    pub deal: DealConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
    /// Checkpoint directory read by `eval` and `explain`.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root written by `datagen`.
    pub dir: Option<PathBuf>,
    /// Concept file; defaults to `concepts.json` under the dataset root.
    pub concepts: Option<PathBuf>,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub seed: u64,
    /// Share of each category's training samples held out for validation.
    pub validation_fraction: f64,
    pub spurious: Vec<SpuriousConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            concepts: None,
            train_per_category: 25,
            test_per_category: 10,
            seed: 0,
            validation_fraction: 0.2,
            spurious: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousConfig {
    pub category: String,
    pub train_probability: f64,
    pub test_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn dir_name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub backend: Backend,
    pub threshold: f64,
    pub split: SplitName,
    pub metrics: MetricSelection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            backend: Backend::default(),
            threshold: DEFAULT_THRESHOLD,
            split: SplitName::Test,
            metrics: MetricSelection::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub samples: Vec<usize>,
    /// Empty means every concept of the sample's category.
    pub concepts: Vec<String>,
    pub split: SplitName,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            samples: vec![0],
            concepts: Vec::new(),
            split: SplitName::Test,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.data
            .dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset directory: pass --data or set data.dir".into()))
    }

    pub fn concepts_path(&self) -> Result<PathBuf, CliError> {
        match &self.data.concepts {
            Some(p) => Ok(p.clone()),
            None => Ok(self.data_dir()?.join(crate::commands::CONCEPTS_FILE)),
        }
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set out".into()))
    }

    pub fn checkpoint_dir(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Config("no checkpoint: pass --checkpoint or set checkpoint".into()))
    }
}
