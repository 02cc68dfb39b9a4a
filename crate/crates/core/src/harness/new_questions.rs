//! Unseen-question protocol: question-level folds, then for each held-out
//! question `n` scored responses are revealed and the rest are scored.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendFactory, ClassProbs};
use crate::baselines::{nn_score_embedded, EmbeddingFn, FrozenClassifier, FrozenExample};
use crate::corpus::{make_folds, Corpus, FoldMode, FoldPlan, Question, ScoredResponse};
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::{check_leak, par_map};
use crate::metrics::{self, MetricReport, MetricSummary};
use crate::score::Score;
use crate::seeding;
use crate::trainer::{meta_finetune, predict_seeded, train_unified, FinetuneJob, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "Meta")]
    Meta,
    #[serde(rename = "Meta-finetune")]
    MetaFinetune,
    #[serde(rename = "SBERT-C")]
    SbertC,
    #[serde(rename = "SBERT-P")]
    SbertP,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Meta, Method::MetaFinetune, Method::SbertC, Method::SbertP];

    pub fn label(self) -> &'static str {
        match self {
            Method::Meta => "Meta",
            Method::MetaFinetune => "Meta-finetune",
            Method::SbertC => "SBERT-C",
            Method::SbertP => "SBERT-P",
        }
    }

    /// Nearest-neighbour scoring and fine-tuning need at least one example.
    pub fn supports(self, n: usize) -> bool {
        n > 0 || matches!(self, Method::Meta | Method::SbertP)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub method: Method,
    pub n: usize,
    pub summary: MetricSummary,
    /// One report per (seed, fold), in job order.
    pub reports: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub rows: Vec<FewShotRow>,
    /// n -> number of (question, seed) pairs skipped for lack of responses.
    pub skipped: BTreeMap<usize, usize>,
}

impl FewShotResult {
    pub fn row(&self, method: Method, n: usize) -> Option<&FewShotRow> {
        self.rows.iter().find(|r| r.method == method && r.n == n)
    }

    pub fn kappa(&self, method: Method, n: usize) -> Option<f64> {
        self.row(method, n).map(|r| r.summary.kappa.mean)
    }
}

type JobOutput = (Vec<((Method, usize), MetricReport)>, BTreeMap<usize, usize>);

pub fn run_new_questions<F: BackendFactory>(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    factory: &F,
    emb: &dyn EmbeddingFn,
    plan: Option<&FoldPlan>,
) -> Result<FewShotResult> {
    cfg.validate()?;
    let plans: Vec<(u64, FoldPlan)> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let p = match plan {
                Some(p) => p.clone(),
                None => make_folds(corpus, FoldMode::ByQuestion, cfg.question_folds, seed)?,
            };
            Ok((seed, p))
        })
        .collect::<Result<_>>()?;
    let mut embeddings: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in corpus.responses() {
        embeddings.insert(r.id.as_str(), emb.embed(&r.text));
    }
    let q_embeddings: BTreeMap<&str, Vec<f64>> =
        corpus.questions().iter().map(|q| (q.id.as_str(), emb.embed(&q.text))).collect();
    let ctx = Context {
        corpus,
        cfg,
        embeddings: &embeddings,
        q_embeddings: &q_embeddings,
    };
    let jobs: Vec<(u64, &FoldPlan, usize)> = plans
        .iter()
        .flat_map(|(seed, p)| (0..p.k).map(move |i| (*seed, p, i)))
        .collect();
    let outputs = par_map(jobs, |(seed, p, i)| ctx.run_fold(p, i, seed, factory));

    let mut grouped: BTreeMap<(Method, usize), Vec<MetricReport>> = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for out in outputs {
        let (reports, skip) = out?;
        for (key, r) in reports {
            grouped.entry(key).or_default().push(r);
        }
        for (n, c) in skip {
            *skipped.entry(n).or_insert(0) += c;
        }
    }
    let mut rows = Vec::new();
    for &n in &cfg.n_values {
        for m in Method::ALL {
            if let Some(reports) = grouped.remove(&(m, n)) {
                rows.push(FewShotRow {
                    method: m,
                    n,
                    summary: MetricSummary::of(&reports),
                    reports,
                });
            }
        }
    }
    Ok(FewShotResult { rows, skipped })
}

struct Context<'a> {
    corpus: &'a Corpus,
    cfg: &'a ExperimentConfig,
    embeddings: &'a BTreeMap<&'a str, Vec<f64>>,
    q_embeddings: &'a BTreeMap<&'a str, Vec<f64>>,
}

impl Context<'_> {
    fn frozen_example(&self, r: &ScoredResponse) -> FrozenExample {
        FrozenExample {
            response: self.embeddings[r.id.as_str()].clone(),
            question: self.q_embeddings[r.question_id.as_str()].clone(),
            label: r.score,
        }
    }

    fn run_fold<F: BackendFactory>(&self, plan: &FoldPlan, i: usize, seed: u64, factory: &F) -> Result<JobOutput> {
        let cfg = self.cfg;
        let test_q = plan.fold(i);
        let train_q = plan.complement(&[i]);
        let c_train = self.corpus.subset_questions(&train_q);
        let job_seed = seeding::derive_seed(seed, &format!("question-fold{i}"));
        let train_cfg = TrainConfig {
            seed: job_seed,
            ..cfg.train.clone()
        };
        let init = factory.create(&cfg.backend.checkpoint, job_seed)?;
        let outcome = train_unified(&c_train, &init, &cfg.prompt, &train_cfg)?;
        let eval_all: BTreeSet<String> = self
            .corpus
            .responses()
            .iter()
            .filter(|r| test_q.contains(&r.question_id))
            .map(|r| r.id.clone())
            .collect();
        check_leak(&outcome.touched, &eval_all)?;
        let model = outcome.backend;

        let train_examples: Vec<FrozenExample> = c_train.responses().iter().map(|r| self.frozen_example(r)).collect();
        let classifier = FrozenClassifier::train(&train_examples, &cfg.frozen)?;

        let questions: Vec<&Question> = self.corpus.questions().iter().filter(|q| test_q.contains(&q.id)).collect();
        let mut out = Vec::new();
        let mut skipped = BTreeMap::new();
        for &n in &cfg.n_values {
            let mut preds: BTreeMap<Method, (Vec<ClassProbs>, Vec<Score>)> = BTreeMap::new();
            for q in &questions {
                let all: Vec<&ScoredResponse> = self.corpus.responses_for(&q.id).collect();
                if all.len() < n + 1 {
                    log::warn!("skipping {} at n = {n}: only {} responses", q.id, all.len());
                    *skipped.entry(n).or_insert(0) += 1;
                    continue;
                }
                let mut rng = seeding::rng_for(seed, &format!("support/{i}/{}/{n}", q.id));
                let support: Vec<&ScoredResponse> = all.choose_multiple(&mut rng, n).copied().collect();
                let support_ids: BTreeSet<&str> = support.iter().map(|r| r.id.as_str()).collect();
                let targets: Vec<&ScoredResponse> =
                    all.iter().copied().filter(|r| !support_ids.contains(r.id.as_str())).collect();
                let labels: Vec<Score> = targets.iter().map(|r| r.score).collect();
                let mut push = |m: Method, probs: Vec<ClassProbs>| {
                    let e = preds.entry(m).or_default();
                    e.0.extend(probs);
                    e.1.extend(labels.iter().copied());
                };

                let meta: Vec<ClassProbs> = targets
                    .iter()
                    .map(|t| predict_seeded(&model, t, q, &support, &cfg.prompt, job_seed))
                    .collect::<Result<_>>()?;
                push(Method::Meta, meta);

                if n > 0 {
                    let ft_cfg = TrainConfig {
                        seed: seeding::derive_seed(job_seed, &format!("finetune/{}/{n}", q.id)),
                        ..cfg.finetune_config().clone()
                    };
                    let job = FinetuneJob::new((*q).clone(), support.iter().map(|r| (*r).clone()).collect(), ft_cfg)?;
                    let tuned = meta_finetune(&model, &job, &cfg.prompt)?;
                    let target_ids: BTreeSet<String> = targets.iter().map(|r| r.id.clone()).collect();
                    check_leak(&tuned.touched, &target_ids)?;
                    let ft: Vec<ClassProbs> = targets
                        .iter()
                        .map(|t| predict_seeded(&tuned.backend, t, q, &support, &cfg.prompt, job_seed))
                        .collect::<Result<_>>()?;
                    push(Method::MetaFinetune, ft);

                    let pool: Vec<(Vec<f64>, Score)> = support
                        .iter()
                        .map(|r| (self.embeddings[r.id.as_str()].clone(), r.score))
                        .collect();
                    let nn: Vec<ClassProbs> = targets
                        .iter()
                        .map(|t| nn_score_embedded(&self.embeddings[t.id.as_str()], &pool).map(ClassProbs::one_hot))
                        .collect::<Result<_>>()?;
                    push(Method::SbertC, nn);
                }

                let adapted;
                let clf = if n > 0 {
                    let support_examples: Vec<FrozenExample> = support.iter().map(|r| self.frozen_example(r)).collect();
                    adapted = classifier.adapt(&support_examples, &cfg.frozen)?;
                    &adapted
                } else {
                    &classifier
                };
                let sp: Vec<ClassProbs> = targets
                    .iter()
                    .map(|t| clf.predict(&self.embeddings[t.id.as_str()], &self.q_embeddings[q.id.as_str()]))
                    .collect::<Result<_>>()?;
                push(Method::SbertP, sp);
            }
            for (m, (probs, labels)) in preds {
                if !probs.is_empty() {
                    out.push(((m, n), metrics::report(&probs, &labels, cfg.metrics)?));
                }
            }
        }
        Ok((out, skipped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceFactory;
    use crate::baselines::HashedTrigramEmbedding;
    use crate::harness::synth::{generate, SynthConfig};

    fn tiny() -> (Corpus, ExperimentConfig) {
        let c = generate(&SynthConfig {
            questions: 6,
            responses_per_question: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = ExperimentConfig {
            question_folds: 3,
            n_values: vec![0, 1, 3, 20],
            train: TrainConfig {
                epochs: 1,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        (c, cfg)
    }

    #[test]
    fn method_rows_and_skips() {
        let (c, cfg) = tiny();
        let emb = HashedTrigramEmbedding::new(32);
        let r = run_new_questions(&c, &cfg, &ReferenceFactory::default(), &emb, None).unwrap();
        assert!(r.row(Method::SbertC, 0).is_none());
        assert!(r.row(Method::MetaFinetune, 0).is_none());
        assert!(r.row(Method::Meta, 0).is_some());
        assert!(r.row(Method::SbertP, 0).is_some());
        assert!(r.row(Method::SbertC, 1).is_some());
        assert!(r.row(Method::Meta, 20).is_none());
        assert_eq!(r.skipped.get(&20), Some(&6));
        assert_eq!(r.row(Method::Meta, 3).unwrap().reports.len(), 3);
    }

    #[test]
    fn corrupted_plan_aborts() {
        let (c, cfg) = tiny();
        let emb = HashedTrigramEmbedding::new(32);
        let mut plan = make_folds(&c, FoldMode::ByQuestion, 3, 0).unwrap();
        let q = plan.folds[0][0].clone();
        plan.folds[1].push(q);
        let err = run_new_questions(&c, &cfg, &ReferenceFactory::default(), &emb, Some(&plan)).unwrap_err();
        assert!(matches!(err, crate::Error::Leak { .. }), "{err}");
    }
}
