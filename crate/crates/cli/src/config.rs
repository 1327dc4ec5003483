use std::fs;
use std::path::{Path, PathBuf};

use mmphone::corpus::GeneratorSpec;
use mmphone::metrics::Attribution;
use mmphone::model::ModelConfig;
use mmphone::training::TrainConfig;
use mmphone::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MMPHONE_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    #[default]
    WholeSequence,
    Aligned,
}

impl From<AttributionMode> for Attribution {
    fn from(m: AttributionMode) -> Self {
        match m {
            AttributionMode::WholeSequence => Attribution::WholeSequence,
            AttributionMode::Aligned => Attribution::Aligned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_iterations: usize,
    pub level: f64,
    pub attribution: AttributionMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_iterations: 1000,
            level: 0.95,
            attribution: AttributionMode::WholeSequence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub perplexity: f64,
    pub tsne_iterations: usize,
    /// Cap on phoneme tokens fed to t-SNE (first tokens of the test split).
    pub max_tokens: Option<usize>,
    /// Layer whose attention is profiled; `None` means the last.
    pub attention_layer: Option<usize>,
    pub context_ms: f64,
    pub bins: usize,
    pub bootstrap_iterations: usize,
    /// Utterances drawn as attention heatmaps; empty means the first test utterance.
    pub heatmap_utterances: Vec<String>,
    /// 1-based inclusive bin ranges compared in the contrast table.
    pub early_bins: (usize, usize),
    pub late_bins: (usize, usize),
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            tsne_iterations: 1000,
            max_tokens: None,
            attention_layer: None,
            context_ms: 25.0,
            bins: 10,
            bootstrap_iterations: 1000,
            heatmap_utterances: Vec::new(),
            early_bins: (1, 3),
            late_bins: (5, 7),
        }
    }
}

/// One JSON document describing an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub generator: GeneratorSpec,
    /// `input_dim` and `vocab_size` are taken from the corpus at train time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fraction of the train split held out for model selection.
    pub dev_fraction: f64,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: Paths::default(),
            generator: GeneratorSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dev_fraction: 0.1,
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// `--seed` flag, then `MMPHONE_SEED`, then the config file, then 0.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env {
        return v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")));
    }
    Ok(config.unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), Some(3)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some("2"), Some(3)).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some(3)).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, Some("x"), None).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed": 3, "train": {"learning_rate": 0.01}}"#).is_ok());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"lr": 0.01}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"generator": {"noise": 1}}"#).is_err());
    }

    #[test]
    fn default_config_roundtrips() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
    }
}
