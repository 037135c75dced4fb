use std::fs;
use std::path::{Path, PathBuf};

use maskbench::eval::ProbeConfig;
use maskbench::synthdata::{CorpusConfig, QaConfig};
use maskbench::trainer::TrainConfig;
use maskbench::Strategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Which pairs a training run consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PairSet {
    Behavior,
    Qa,
    All,
}

/// Everything a command needs, as written to `config.toml` in its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives corpus generation, pair sampling, init, batching and the probe split.
    pub seed: u64,
    /// Corpus directory. When unset, `compare` generates the corpus in memory.
    pub data: Option<PathBuf>,
    pub sample_k: usize,
    pub pairs: PairSet,
    /// Probe tasks by label index; all when unset.
    pub tasks: Option<Vec<usize>>,
    pub strategies: Vec<Strategy>,
    pub smoothing_window: usize,
    pub corpus: CorpusConfig,
    pub qa: QaConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: None,
            sample_k: 10,
            pairs: PairSet::Behavior,
            tasks: None,
            strategies: vec![
                Strategy::Causal,
                Strategy::HybridBlock,
                Strategy::Bidirectional,
                Strategy::SchedulerLinear,
                Strategy::Ggsm,
            ],
            smoothing_window: 100,
            corpus: CorpusConfig::default(),
            qa: QaConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Built-in defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.corpus.seed = self.seed;
        self.qa.seed = self.seed;
        self.train.seed = self.seed;
        self.train.encoder.seed = self.seed;
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Data(format!("serialising config: {e}")))
    }

    /// Hash of everything except the mask choice, shared by all rows of a comparison.
    pub fn hash(&self) -> String {
        let mut shared = self.clone();
        shared.strategies.clear();
        shared.train.strategy = Strategy::Causal;
        let json = serde_json::to_string(&shared).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}
