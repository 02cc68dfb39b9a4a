//! Training regimes and test-time prediction.
//!
//! - [`train_unified`]: one model over the training responses of every
//!   question, with in-context examples redrawn each epoch from the target's
//!   own question.
//! - [`meta_finetune`]: adapt a copy of a trained model to one new question
//!   from `n` scored responses; each response is the target once with the
//!   other `n - 1` as its examples.
//! - [`predict`]: average the class distributions of several prompts with
//!   independently sampled examples.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ClassProbs, ScoringBackend};
use crate::corpus::{Corpus, Question, ScoredResponse};
use crate::error::{Error, Result};
use crate::score::Score;
use crate::seeding;
use crate::templating::{assemble_prompt, observed_scale, sample_examples, PromptBundle, PromptConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once an epoch's mean loss drops below this value.
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            batch_size: 16,
            learning_rate: 1e-5,
            epochs: 5,
            seed: 0,
            early_stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Counters over every prompt built during a run; used to audit ablations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub prompts: usize,
    pub example_segments: usize,
    pub max_examples_in_prompt: usize,
    pub truncated_segments: usize,
}

impl PromptStats {
    pub fn record(&mut self, p: &PromptBundle) {
        let n = p.example_ids.len();
        self.prompts += 1;
        self.example_segments += n;
        self.max_examples_in_prompt = self.max_examples_in_prompt.max(n);
        self.truncated_segments += p.segments.iter().filter(|s| s.truncated).count();
    }

    pub fn merge(&mut self, other: &PromptStats) {
        self.prompts += other.prompts;
        self.example_segments += other.example_segments;
        self.max_examples_in_prompt = self.max_examples_in_prompt.max(other.max_examples_in_prompt);
        self.truncated_segments += other.truncated_segments;
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<B> {
    pub backend: B,
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Every response id that appeared in a training prompt, as target or example.
    pub touched: BTreeSet<String>,
    pub stats: PromptStats,
}

fn pools(c: &Corpus) -> HashMap<&str, Vec<&ScoredResponse>> {
    c.questions()
        .iter()
        .map(|q| (q.id.as_str(), c.responses_for(&q.id).collect()))
        .collect()
}

fn build_prompt<B: ScoringBackend, R: Rng + ?Sized>(
    backend: &B,
    target: &ScoredResponse,
    question: &Question,
    pool: &[&ScoredResponse],
    cfg: &PromptConfig,
    rng: &mut R,
) -> PromptBundle {
    let examples = sample_examples(pool, Some(&target.id), cfg, rng);
    let others: Vec<&ScoredResponse> = pool.iter().copied().filter(|r| r.id != target.id).collect();
    let scale = observed_scale(&others);
    assemble_prompt(target, question, &examples, &scale, cfg, backend)
}

/// Shared epoch loop. `items` are (target, question, pool) triples.
fn run_epochs<B, F>(
    mut backend: B,
    items: &[(&ScoredResponse, &Question, &[&ScoredResponse])],
    prompt_cfg: &PromptConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome<B>>
where
    B: ScoringBackend,
    F: FnMut(usize, &B, f64) -> Result<()>,
{
    train_cfg.validate()?;
    prompt_cfg.validate()?;
    let mut rng = seeding::rng(train_cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut out_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut touched = BTreeSet::new();
    let mut stats = PromptStats::default();
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<(PromptBundle, Score)> = chunk
                .iter()
                .map(|&i| {
                    let (target, q, pool) = items[i];
                    let p = build_prompt(&backend, target, q, pool, prompt_cfg, &mut rng);
                    touched.insert(target.id.clone());
                    touched.extend(p.example_ids.iter().cloned());
                    stats.record(&p);
                    (p, target.score)
                })
                .collect();
            let loss = backend.train_batch(&batch)?;
            out_losses.push(loss);
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let mean = sum / count.max(1) as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, &backend, mean)?;
        if train_cfg.early_stop_loss.is_some_and(|t| mean < t) {
            break;
        }
    }
    Ok(TrainOutcome {
        backend,
        batch_losses: out_losses,
        epoch_losses,
        touched,
        stats,
    })
}

pub fn train_unified<B: ScoringBackend + Clone>(
    c_train: &Corpus,
    backend: &B,
    prompt_cfg: &PromptConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome<B>> {
    train_unified_with(c_train, backend, prompt_cfg, train_cfg, |_, _, _| Ok(()))
}

/// [`train_unified`] with a callback after each epoch (epoch index, model,
/// mean epoch loss), e.g. for checkpointing or validation.
pub fn train_unified_with<B, F>(
    c_train: &Corpus,
    backend: &B,
    prompt_cfg: &PromptConfig,
    train_cfg: &TrainConfig,
    on_epoch: F,
) -> Result<TrainOutcome<B>>
where
    B: ScoringBackend + Clone,
    F: FnMut(usize, &B, f64) -> Result<()>,
{
    if c_train.responses().is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let pools = pools(c_train);
    let items: Vec<(&ScoredResponse, &Question, &[&ScoredResponse])> = c_train
        .responses()
        .iter()
        .map(|r| {
            let q = c_train.question(&r.question_id).expect("corpus invariant");
            (r, q, pools[r.question_id.as_str()].as_slice())
        })
        .collect();
    let mut model = backend.clone();
    model.reset_optimizer(train_cfg.learning_rate);
    run_epochs(model, &items, prompt_cfg, train_cfg, on_epoch)
}

/// Scored responses for one unseen question.
#[derive(Clone, Debug)]
pub struct FinetuneJob {
    pub question: Question,
    pub new_examples: Vec<ScoredResponse>,
    pub config: TrainConfig,
}

impl FinetuneJob {
    pub fn new(question: Question, new_examples: Vec<ScoredResponse>, config: TrainConfig) -> Result<Self> {
        if let Some(r) = new_examples.iter().find(|r| r.question_id != question.id) {
            return Err(Error::Validation(format!(
                "response {} belongs to {}, not {}",
                r.id, r.question_id, question.id
            )));
        }
        Ok(FinetuneJob {
            question,
            new_examples,
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.new_examples.len()
    }
}

/// Fine-tune a copy of `backend`; the input handle is left untouched.
pub fn meta_finetune<B: ScoringBackend + Clone>(
    backend: &B,
    job: &FinetuneJob,
    prompt_cfg: &PromptConfig,
) -> Result<TrainOutcome<B>> {
    if job.n() == 0 {
        return Err(Error::Config("meta-finetune needs n >= 1 scored responses".into()));
    }
    let pool: Vec<&ScoredResponse> = job.new_examples.iter().collect();
    let items: Vec<(&ScoredResponse, &Question, &[&ScoredResponse])> =
        pool.iter().map(|r| (*r, &job.question, pool.as_slice())).collect();
    let mut model = backend.clone();
    model.reset_optimizer(job.config.learning_rate);
    run_epochs(model, &items, prompt_cfg, &job.config, |_, _, _| Ok(()))
}

/// Average of `resamples_at_test` prompts with freshly drawn examples. When
/// the pool cannot vary (examples off, or the whole pool fits) a single
/// prompt is classified.
pub fn predict<B: ScoringBackend, R: Rng + ?Sized>(
    backend: &B,
    target: &ScoredResponse,
    question: &Question,
    pool: &[&ScoredResponse],
    prompt_cfg: &PromptConfig,
    rng: &mut R,
) -> Result<ClassProbs> {
    let pool: Vec<&ScoredResponse> = pool.iter().copied().filter(|r| r.id != target.id).collect();
    let varies = prompt_cfg.use_examples && pool.len() > prompt_cfg.max_examples;
    let rounds = if varies { prompt_cfg.resamples_at_test } else { 1 };
    let mut probs = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let p = build_prompt(backend, target, question, &pool, prompt_cfg, rng);
        probs.push(backend.classify(&p)?);
    }
    ClassProbs::mean(&probs)
}

/// [`predict`] with an RNG stream keyed by (seed, response id), so results do
/// not depend on evaluation order.
pub fn predict_seeded<B: ScoringBackend>(
    backend: &B,
    target: &ScoredResponse,
    question: &Question,
    pool: &[&ScoredResponse],
    prompt_cfg: &PromptConfig,
    seed: u64,
) -> Result<ClassProbs> {
    let mut rng = seeding::rng_for(seed, &target.id);
    predict(backend, target, question, pool, prompt_cfg, &mut rng)
}
