//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendKind, REFERENCE_LEARNING_RATE};
use crate::baselines::FrozenConfig;
use crate::corpus::{CleanConfig, ImagePolicy, RuleSet};
use crate::error::{Error, Result};
use crate::harness::synth::SynthConfig;
use crate::metrics::MetricConfig;
use crate::rasch::RaschConfig;
use crate::templating::PromptConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_N_VALUES: [usize; 9] = [0, 1, 3, 5, 7, 10, 25, 50, 80];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    NewResponses,
    NewQuestions,
    Ablation,
    ErrorAnalysis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Math-adapted encoder checkpoint (directory for the transformer backend).
    pub checkpoint: String,
    /// General-domain encoder used by the encoder ablation row.
    pub vanilla_checkpoint: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Reference,
            checkpoint: "math".into(),
            vanilla_checkpoint: "vanilla".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub cache: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { dim: 256, cache: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanSection {
    pub min_responses: usize,
    pub exclusion_list: Option<PathBuf>,
    pub image_policy: ImagePolicy,
    pub drop_empty_after_markup: bool,
    pub max_disallowed_ratio: Option<f64>,
}

impl Default for CleanSection {
    fn default() -> Self {
        let rules = RuleSet::default();
        CleanSection {
            min_responses: CleanConfig::default().min_responses,
            exclusion_list: None,
            image_policy: rules.image_policy,
            drop_empty_after_markup: rules.drop_empty_after_markup,
            max_disallowed_ratio: rules.max_disallowed_ratio,
        }
    }
}

impl CleanSection {
    pub fn to_clean_config(&self) -> Result<CleanConfig> {
        let exclusion_ids = match &self.exclusion_list {
            Some(p) => crate::corpus::load_exclusion_list(p)?,
            None => Default::default(),
        };
        Ok(CleanConfig {
            rules: RuleSet {
                drop_empty_after_markup: self.drop_empty_after_markup,
                image_policy: self.image_policy,
                max_disallowed_ratio: self.max_disallowed_ratio,
            },
            exclusion_ids,
            min_responses: self.min_responses,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    /// JSONL dataset.
    pub corpus: Option<PathBuf>,
    /// Generate a synthetic corpus instead of loading one.
    pub synth: Option<SynthConfig>,
    /// Reuse a saved fold plan instead of drawing one.
    pub fold_plan: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub n_values: Vec<usize>,
    pub response_folds: usize,
    pub question_folds: usize,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    /// Per-question fine-tuning; defaults to `train`.
    pub finetune: Option<TrainConfig>,
    pub backend: BackendConfig,
    pub metrics: MetricConfig,
    pub rasch: RaschConfig,
    pub embedding: EmbeddingConfig,
    pub frozen: FrozenConfig,
    pub clean: CleanSection,
    /// Question label key used for per-group error analysis.
    pub group_label: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::NewResponses,
            corpus: None,
            synth: None,
            fold_plan: None,
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            n_values: DEFAULT_N_VALUES.to_vec(),
            response_folds: 10,
            question_folds: 5,
            prompt: PromptConfig::default(),
            train: TrainConfig {
                learning_rate: REFERENCE_LEARNING_RATE,
                ..TrainConfig::default()
            },
            finetune: None,
            backend: BackendConfig::default(),
            metrics: MetricConfig::default(),
            rasch: RaschConfig::default(),
            embedding: EmbeddingConfig::default(),
            frozen: FrozenConfig::default(),
            clean: CleanSection::default(),
            group_label: "topic".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn finetune_config(&self) -> &TrainConfig {
        self.finetune.as_ref().unwrap_or(&self.train)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_values must be strictly increasing".into()));
        }
        if self.response_folds < 3 {
            return Err(Error::Config("response-level CV needs at least 3 folds".into()));
        }
        if self.question_folds < 2 {
            return Err(Error::Config("question-level CV needs at least 2 folds".into()));
        }
        self.prompt.validate()?;
        self.train.validate()?;
        self.finetune_config().validate()
    }
}

/// Dotted paths of every leaf value that differs between two configs.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<Vec<String>> {
    let va = serde_json::to_value(a)?;
    let vb = serde_json::to_value(b)?;
    let mut out = Vec::new();
    diff_values("", &va, &vb, &mut out);
    Ok(out)
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => diff_values(&path, x, y, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}
