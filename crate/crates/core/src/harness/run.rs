//! A single training run written to disk: config snapshot, per-epoch
//! metrics, parameter snapshots and the seeds that produced them.
//!
//! Layout of `out_dir`:
//!
//! ```text
//! config.toml
//! seeds.json
//! metrics.json
//! epoch_0/manifest.json, params...
//! epoch_1/...
//! final/...
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendFactory, ClassProbs, ScoringBackend};
use crate::corpus::{Corpus, ScoredResponse};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::new_responses::predict_all;
use crate::metrics::{self, MetricReport};
use crate::score::Score;
use crate::seeding;
use crate::trainer::{train_unified_with, PromptStats, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub fingerprint: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricReport>,
    pub snapshot: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub base_seed: u64,
    pub train_seed: u64,
    pub backend_seed: u64,
    pub prediction_seed: u64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub epochs: Vec<EpochMetrics>,
    pub seeds: SeedManifest,
    pub stats: PromptStats,
    pub n_train: usize,
    pub n_validation: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Train one model on `train` with `cfg.seeds[0]`, scoring `validation`
/// after each epoch when given. Predictions on validation responses draw
/// their examples from the training pool of the same question.
pub fn run_training<F: BackendFactory>(
    train: &Corpus,
    validation: Option<&Corpus>,
    cfg: &ExperimentConfig,
    factory: &F,
    out_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let base = cfg.seeds[0];
    let seeds = SeedManifest {
        base_seed: base,
        train_seed: seeding::derive_seed(base, "train"),
        backend_seed: seeding::derive_seed(base, "backend"),
        prediction_seed: seeding::derive_seed(base, "predict"),
        checkpoint: cfg.backend.checkpoint.clone(),
    };
    write_json(&out_dir.join("seeds.json"), &seeds)?;

    let train_cfg = TrainConfig {
        seed: seeds.train_seed,
        ..cfg.train.clone()
    };
    let val: Vec<&ScoredResponse> = validation.map(|v| v.responses().iter().collect()).unwrap_or_default();
    let val_labels: Vec<Score> = val.iter().map(|r| r.score).collect();
    let init = factory.create(&cfg.backend.checkpoint, seeds.backend_seed)?;
    let mut epochs = Vec::new();
    let outcome = train_unified_with(train, &init, &cfg.prompt, &train_cfg, |epoch, model, loss| {
        let dir = out_dir.join(format!("epoch_{epoch}"));
        model.save(&dir)?;
        let validation = if val.is_empty() {
            None
        } else {
            let probs: Vec<ClassProbs> = predict_all(model, &val, train, &cfg.prompt, seeds.prediction_seed)?;
            Some(metrics::report(&probs, &val_labels, cfg.metrics)?)
        };
        log::info!("epoch {epoch}: loss {loss:.4}");
        epochs.push(EpochMetrics {
            epoch,
            mean_loss: loss,
            fingerprint: model.fingerprint(),
            validation,
            snapshot: dir,
        });
        write_json(&out_dir.join("metrics.json"), &epochs)
    })?;
    outcome.backend.save(&out_dir.join("final"))?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        epochs,
        seeds,
        stats: outcome.stats,
        n_train: train.responses().len(),
        n_validation: val.len(),
    })
}
