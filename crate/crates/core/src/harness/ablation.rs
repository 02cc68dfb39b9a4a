//! The six-row component ablation, scored without the Rasch layer.

use serde::{Deserialize, Serialize};

use crate::backend::BackendFactory;
use crate::corpus::{Corpus, FoldPlan};
use crate::error::{Error, Result};
use crate::harness::config::{config_diff, ExperimentConfig};
use crate::harness::new_responses::{response_plans, run_folds, FoldSetup};
use crate::metrics::MetricSummary;
use crate::trainer::PromptStats;

/// Which components a row uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub question_text: bool,
    pub question_id: bool,
    pub scale: bool,
    pub examples: bool,
    pub math_encoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub components: Components,
    pub config: ExperimentConfig,
    /// Config paths this row is allowed to change relative to the first row.
    pub allowed_diff: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub components: Components,
    pub summary: MetricSummary,
    pub stats: PromptStats,
    pub config_diff: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub fold_plans: Vec<FoldPlan>,
}

fn apply(base: &ExperimentConfig, c: Components) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.prompt.use_question_text = c.question_text;
    cfg.prompt.use_question_id = c.question_id;
    cfg.prompt.use_scale = c.scale;
    cfg.prompt.use_examples = c.examples;
    if !c.math_encoder {
        cfg.backend.checkpoint = base.backend.vanilla_checkpoint.clone();
    }
    cfg
}

/// Full model first, then one row per removed or swapped component.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<AblationVariant> {
    let full = Components {
        question_text: true,
        question_id: false,
        scale: true,
        examples: true,
        math_encoder: true,
    };
    let rows: [(&str, Components, &[&str]); 6] = [
        ("full", full, &[]),
        (
            "question id instead of text",
            Components {
                question_text: false,
                question_id: true,
                ..full
            },
            &["prompt.use_question_text", "prompt.use_question_id"],
        ),
        (
            "no examples",
            Components {
                examples: false,
                ..full
            },
            &["prompt.use_examples"],
        ),
        (
            "no question text",
            Components {
                question_text: false,
                ..full
            },
            &["prompt.use_question_text"],
        ),
        (
            "no scale",
            Components { scale: false, ..full },
            &["prompt.use_scale"],
        ),
        (
            "general-domain encoder",
            Components {
                math_encoder: false,
                ..full
            },
            &["backend.checkpoint"],
        ),
    ];
    let reference = apply(base, full);
    rows.iter()
        .map(|(name, c, allowed)| AblationVariant {
            name: name.to_string(),
            components: *c,
            config: if *c == full { reference.clone() } else { apply(&reference, *c) },
            allowed_diff: allowed.iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

pub fn run_ablation<F: BackendFactory>(
    corpus: &Corpus,
    base: &ExperimentConfig,
    factory: &F,
    plan: Option<&FoldPlan>,
) -> Result<AblationReport> {
    base.validate()?;
    let variants = ablation_variants(base);
    let reference = &variants[0].config;
    let plans = response_plans(corpus, reference, plan)?;
    let mut rows = Vec::new();
    for v in &variants {
        let diff = config_diff(reference, &v.config)?;
        let mut expected = v.allowed_diff.clone();
        expected.sort();
        if diff != expected {
            return Err(Error::Config(format!(
                "ablation row '{}' changes {:?}, expected {:?}",
                v.name, diff, expected
            )));
        }
        let setup = FoldSetup {
            prompt: &v.config.prompt,
            train: &v.config.train,
            checkpoint: &v.config.backend.checkpoint,
            metrics: v.config.metrics,
            rasch: None,
        };
        let (folds, _) = run_folds(corpus, &plans, &setup, factory)?;
        let mut stats = PromptStats::default();
        for f in &folds {
            stats.merge(&f.stats);
        }
        rows.push(AblationRow {
            name: v.name.clone(),
            components: v.components,
            summary: MetricSummary::of(&folds.iter().map(|f| f.raw.clone()).collect::<Vec<_>>()),
            stats,
            config_diff: diff,
        });
    }
    Ok(AblationReport {
        rows,
        fold_plans: plans.into_iter().map(|(_, p)| p).collect(),
    })
}
