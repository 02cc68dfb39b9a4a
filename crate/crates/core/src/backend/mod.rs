//! Scoring-model abstraction: a prompt goes in, a 5-way score distribution
//! comes out, and a batch of (prompt, score) pairs can update the parameters.

mod reference;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{Score, SCALE_SIZE};
use crate::templating::{PromptBundle, Tokenizer};

pub use reference::{tokens as reference_tokens, ReferenceBackend, ReferenceFactory, HASH_BUCKETS, REFERENCE_LEARNING_RATE};

/// Predicted distribution over the five score classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs([f64; SCALE_SIZE]);

impl ClassProbs {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(p: [f64; SCALE_SIZE]) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Validation(format!("invalid probabilities {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Validation(format!("probabilities sum to {sum}")));
        }
        Ok(ClassProbs(p))
    }

    /// Normalise non-negative weights onto the simplex.
    pub fn normalized(p: [f64; SCALE_SIZE]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if !(sum > 0.0) || p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::Validation(format!("cannot normalise {p:?}")));
        }
        Ok(ClassProbs(p.map(|x| x / sum)))
    }

    pub fn uniform() -> Self {
        ClassProbs([1.0 / SCALE_SIZE as f64; SCALE_SIZE])
    }

    pub fn one_hot(score: Score) -> Self {
        let mut p = [0.0; SCALE_SIZE];
        p[score.index()] = 1.0;
        ClassProbs(p)
    }

    pub fn softmax(logits: &[f64; SCALE_SIZE]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.map(|z| (z - max).exp());
        let sum: f64 = exp.iter().sum();
        ClassProbs(exp.map(|e| e / sum))
    }

    /// Arithmetic mean of several distributions, renormalised.
    pub fn mean(items: &[ClassProbs]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("no distributions to average"));
        }
        if let [single] = items {
            return Ok(*single);
        }
        let mut acc = [0.0; SCALE_SIZE];
        for p in items {
            for (a, x) in acc.iter_mut().zip(p.0) {
                *a += x;
            }
        }
        ClassProbs::normalized(acc)
    }

    pub fn as_array(&self) -> &[f64; SCALE_SIZE] {
        &self.0
    }

    pub fn get(&self, score: Score) -> f64 {
        self.0[score.index()]
    }

    /// Most probable class; ties go to the lower class.
    pub fn argmax(&self) -> Score {
        let mut best = 0;
        for k in 1..SCALE_SIZE {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        Score::new(best as i64).expect("index within scale")
    }

    pub fn expected_score(&self) -> f64 {
        self.0.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Transformer,
    Reference,
}

/// Written next to parameter snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendManifest {
    pub kind: BackendKind,
    pub checkpoint_id: String,
    /// (input width, classes) of the classification head.
    pub head_shape: [usize; 2],
    pub seed: u64,
}

impl BackendManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A trainable scorer. `classify` is safe to call concurrently on a shared
/// reference; `train_batch` needs exclusive access.
pub trait ScoringBackend: Tokenizer + Send + Sync {
    fn kind(&self) -> BackendKind;

    fn checkpoint_id(&self) -> &str;

    fn classify(&self, prompt: &PromptBundle) -> Result<ClassProbs>;

    /// One optimiser step on the mean cross-entropy of the batch. Returns
    /// the pre-update loss.
    fn train_batch(&mut self, batch: &[(PromptBundle, Score)]) -> Result<f64>;

    /// Fresh optimiser state with the given step size.
    fn reset_optimizer(&mut self, learning_rate: f64);

    /// When frozen, only the classification head is updated.
    fn set_encoder_frozen(&mut self, frozen: bool);

    fn save(&self, dir: &Path) -> Result<()>;

    /// Hash of all trainable parameters.
    fn fingerprint(&self) -> u64;
}

/// Creates backends from a checkpoint identifier, so protocols can swap
/// encoders (e.g. math-adapted vs vanilla) through configuration alone.
pub trait BackendFactory: Sync {
    type Backend: ScoringBackend + Clone;

    fn create(&self, checkpoint_id: &str, seed: u64) -> Result<Self::Backend>;
}

pub(crate) fn check_finite_loss(loss: f64, batch: &[(PromptBundle, Score)]) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss {
            ids: batch.iter().map(|(p, _)| p.target_id.clone()).collect(),
        })
    }
}
