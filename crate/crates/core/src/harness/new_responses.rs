//! Response-level cross-validation: every question is seen in training; the
//! held-out responses are new.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendFactory, ClassProbs, ScoringBackend};
use crate::corpus::{make_folds, Corpus, FoldMode, FoldPlan, ScoredResponse};
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::{check_leak, par_map};
use crate::metrics::{self, MetricConfig, MetricReport, MetricSummary};
use crate::rasch::{self, RaschConfig, RaschObservation};
use crate::score::Score;
use crate::seeding;
use crate::templating::PromptConfig;
use crate::trainer::{predict_seeded, train_unified_with, PromptStats, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub response_id: String,
    pub question_id: String,
    pub seed: u64,
    pub fold: usize,
    pub probs: ClassProbs,
    pub label: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub seed: u64,
    pub fold: usize,
    pub best_epoch: usize,
    pub val_kappa: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub raw: MetricReport,
    /// Constant prediction of the most frequent training score.
    pub majority: MetricReport,
    pub rasch: Option<MetricReport>,
    pub rasch_baseline: Option<MetricReport>,
    pub rasch_word_count: Option<MetricReport>,
    pub stats: PromptStats,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewResponsesReport {
    pub folds: Vec<FoldResult>,
    pub raw: MetricSummary,
    pub majority: MetricSummary,
    pub rasch: Option<MetricSummary>,
    pub rasch_baseline: Option<MetricSummary>,
    pub rasch_word_count: Option<MetricSummary>,
    pub predictions: Vec<Prediction>,
}

/// Settings shared by the plain protocol and the ablation rows.
pub(crate) struct FoldSetup<'a> {
    pub prompt: &'a PromptConfig,
    pub train: &'a TrainConfig,
    pub checkpoint: &'a str,
    pub metrics: MetricConfig,
    pub rasch: Option<&'a RaschConfig>,
}

/// Fold plans per seed: the given plan for every seed, or a fresh stratified
/// plan drawn with each seed.
pub(crate) fn response_plans(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    plan: Option<&FoldPlan>,
) -> Result<Vec<(u64, FoldPlan)>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let p = match plan {
                Some(p) => p.clone(),
                None => make_folds(corpus, FoldMode::ByResponse, cfg.response_folds, seed)?,
            };
            Ok((seed, p))
        })
        .collect()
}

pub fn run_new_responses<F: BackendFactory>(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    factory: &F,
    plan: Option<&FoldPlan>,
) -> Result<NewResponsesReport> {
    cfg.validate()?;
    let plans = response_plans(corpus, cfg, plan)?;
    let setup = FoldSetup {
        prompt: &cfg.prompt,
        train: &cfg.train,
        checkpoint: &cfg.backend.checkpoint,
        metrics: cfg.metrics,
        rasch: Some(&cfg.rasch),
    };
    let (folds, predictions) = run_folds(corpus, &plans, &setup, factory)?;
    Ok(summarise(folds, predictions))
}

pub(crate) fn summarise(folds: Vec<FoldResult>, predictions: Vec<Prediction>) -> NewResponsesReport {
    let collect = |f: &dyn Fn(&FoldResult) -> Option<MetricReport>| -> Option<MetricSummary> {
        let rs: Vec<MetricReport> = folds.iter().filter_map(f).collect();
        (!rs.is_empty()).then(|| MetricSummary::of(&rs))
    };
    NewResponsesReport {
        raw: MetricSummary::of(&folds.iter().map(|f| f.raw.clone()).collect::<Vec<_>>()),
        majority: MetricSummary::of(&folds.iter().map(|f| f.majority.clone()).collect::<Vec<_>>()),
        rasch: collect(&|f| f.rasch.clone()),
        rasch_baseline: collect(&|f| f.rasch_baseline.clone()),
        rasch_word_count: collect(&|f| f.rasch_word_count.clone()),
        folds,
        predictions,
    }
}

pub(crate) fn run_folds<F: BackendFactory>(
    corpus: &Corpus,
    plans: &[(u64, FoldPlan)],
    setup: &FoldSetup<'_>,
    factory: &F,
) -> Result<(Vec<FoldResult>, Vec<Prediction>)> {
    let jobs: Vec<(u64, &FoldPlan, usize)> = plans
        .iter()
        .flat_map(|(seed, p)| (0..p.k).map(move |i| (*seed, p, i)))
        .collect();
    let results = par_map(jobs, |(seed, plan, i)| run_fold(corpus, plan, i, seed, setup, factory));
    let mut folds = Vec::new();
    let mut predictions = Vec::new();
    for r in results {
        let (f, p) = r?;
        folds.push(f);
        predictions.extend(p);
    }
    Ok((folds, predictions))
}

pub(crate) fn predict_all<B: ScoringBackend>(
    backend: &B,
    targets: &[&ScoredResponse],
    pool_corpus: &Corpus,
    prompt: &PromptConfig,
    seed: u64,
) -> Result<Vec<ClassProbs>> {
    let pools: BTreeMap<&str, Vec<&ScoredResponse>> = pool_corpus
        .questions()
        .iter()
        .map(|q| (q.id.as_str(), pool_corpus.responses_for(&q.id).collect()))
        .collect();
    targets
        .iter()
        .map(|r| {
            let q = pool_corpus
                .question(&r.question_id)
                .cloned()
                .unwrap_or_else(|| crate::corpus::Question::new(r.question_id.clone(), ""));
            let pool = pools.get(r.question_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            predict_seeded(backend, r, &q, pool, prompt, seed)
        })
        .collect()
}

fn run_fold<F: BackendFactory>(
    corpus: &Corpus,
    plan: &FoldPlan,
    i: usize,
    seed: u64,
    setup: &FoldSetup<'_>,
    factory: &F,
) -> Result<(FoldResult, Vec<Prediction>)> {
    let j = (i + 1) % plan.k;
    let test_ids = plan.fold(i);
    let val_ids = plan.fold(j);
    let train_ids = plan.complement(&[i, j]);
    let c_train = corpus.subset_responses(&train_ids);
    let val: Vec<&ScoredResponse> = corpus.responses().iter().filter(|r| val_ids.contains(&r.id)).collect();
    let test: Vec<&ScoredResponse> = corpus.responses().iter().filter(|r| test_ids.contains(&r.id)).collect();
    let mut notes = Vec::new();
    let missing: BTreeSet<&str> = test
        .iter()
        .map(|r| r.question_id.as_str())
        .filter(|q| c_train.response_count(q) == 0)
        .collect();
    if !missing.is_empty() {
        notes.push(format!("{} test questions have no training responses", missing.len()));
    }

    let job_seed = seeding::derive_seed(seed, &format!("fold{i}"));
    let train_cfg = TrainConfig {
        seed: job_seed,
        ..setup.train.clone()
    };
    let init = factory.create(setup.checkpoint, job_seed)?;
    let mut val_kappa = Vec::new();
    let mut best: Option<(usize, f64, F::Backend)> = None;
    let val_labels: Vec<Score> = val.iter().map(|r| r.score).collect();
    let outcome = train_unified_with(&c_train, &init, setup.prompt, &train_cfg, |epoch, model, _| {
        let kappa = if val.is_empty() {
            0.0
        } else {
            let probs = predict_all(model, &val, &c_train, setup.prompt, job_seed)?;
            let preds: Vec<Score> = probs.iter().map(ClassProbs::argmax).collect();
            metrics::cohen_kappa(&preds, &val_labels, setup.metrics.kappa_weighting)?
        };
        val_kappa.push(kappa);
        if best.as_ref().is_none_or(|(_, k, _)| kappa > *k) {
            best = Some((epoch, kappa, model.clone()));
        }
        Ok(())
    })?;
    let eval_ids: BTreeSet<String> = test_ids.union(&val_ids).cloned().collect();
    check_leak(&outcome.touched, &eval_ids)?;
    let (best_epoch, _, model) = match best {
        Some(b) => b,
        None => (0, 0.0, outcome.backend.clone()),
    };

    let probs = predict_all(&model, &test, &c_train, setup.prompt, job_seed)?;
    let labels: Vec<Score> = test.iter().map(|r| r.score).collect();
    let raw = metrics::report(&probs, &labels, setup.metrics)?;

    let mut counts = [0usize; crate::SCALE_SIZE];
    for r in c_train.responses() {
        counts[r.score.index()] += 1;
    }
    let top = (0..counts.len()).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
    let majority_probs = vec![ClassProbs::one_hot(Score::new(top as i64)?); test.len()];
    let majority = metrics::report(&majority_probs, &labels, setup.metrics)?;

    let (mut rasch_full, mut rasch_base, mut rasch_wc) = (None, None, None);
    if let Some(rcfg) = setup.rasch {
        let train_refs: Vec<&ScoredResponse> = c_train.responses().iter().collect();
        let train_probs = predict_all(&model, &train_refs, &c_train, setup.prompt, job_seed)?;
        let train_obs: Vec<RaschObservation> = train_refs
            .iter()
            .zip(&train_probs)
            .map(|(r, p)| RaschObservation::from_response(r, *p))
            .collect();
        let test_obs: Vec<RaschObservation> = test
            .iter()
            .zip(&probs)
            .map(|(r, p)| RaschObservation::from_response(r, *p))
            .collect();
        let variants = [
            ("rasch", *rcfg),
            (
                "rasch baseline",
                RaschConfig {
                    use_probs: false,
                    use_word_count: false,
                    ..*rcfg
                },
            ),
            (
                "rasch word count",
                RaschConfig {
                    use_probs: false,
                    use_word_count: true,
                    ..*rcfg
                },
            ),
        ];
        let mut out = Vec::new();
        for (name, vcfg) in variants {
            match rasch::evaluate_with_rasch(&train_obs, &test_obs, &vcfg, setup.metrics) {
                Ok(r) => out.push(Some(r)),
                Err(e) => {
                    log::warn!("{name} failed on seed {seed} fold {i}: {e}");
                    notes.push(format!("{name}: {e}"));
                    out.push(None);
                }
            }
        }
        rasch_wc = out.pop().flatten();
        rasch_base = out.pop().flatten();
        rasch_full = out.pop().flatten();
    }

    let predictions = test
        .iter()
        .zip(&probs)
        .map(|(r, p)| Prediction {
            response_id: r.id.clone(),
            question_id: r.question_id.clone(),
            seed,
            fold: i,
            probs: *p,
            label: r.score,
        })
        .collect();
    Ok((
        FoldResult {
            seed,
            fold: i,
            best_epoch,
            val_kappa,
            epoch_losses: outcome.epoch_losses,
            raw,
            majority,
            rasch: rasch_full,
            rasch_baseline: rasch_base,
            rasch_word_count: rasch_wc,
            stats: outcome.stats,
            notes,
        },
        predictions,
    ))
}
