//! Experiment protocols: response-level CV, unseen-question few-shot sweeps,
//! the ablation grid, training runs and error analysis.

pub mod ablation;
pub mod analysis;
pub mod config;
pub mod new_questions;
pub mod new_responses;
pub mod run;
pub mod synth;

use std::collections::BTreeSet;

use crate::baselines::HashedTrigramEmbedding;
use crate::error::{Error, Result};

pub use ablation::{ablation_variants, run_ablation, AblationReport, AblationRow};
pub use analysis::{
    classify_tokens, compare_groups, extract_features, is_math_response, math_token_pct, partition_math_text,
    per_group_metrics, split_by_correctness, token_class, FeatureComparison, FeatureRow, GroupRow,
    MathTextPartition, TestKind, TokenClass,
};
pub use config::{config_diff, ExperimentConfig, Protocol};
pub use new_questions::{run_new_questions, FewShotResult, FewShotRow, Method};
pub use new_responses::{run_new_responses, FoldResult, NewResponsesReport, Prediction};
pub use run::{run_training, EpochMetrics, RunSummary, SeedManifest};

/// Abort when any evaluation target was used in a training prompt, either
/// as target or as an in-context example.
pub fn check_leak(touched: &BTreeSet<String>, eval_targets: &BTreeSet<String>) -> Result<()> {
    let leaked: Vec<&String> = touched.intersection(eval_targets).collect();
    match leaked.first() {
        None => Ok(()),
        Some(first) => Err(Error::Leak {
            count: leaked.len(),
            example: (*first).clone(),
        }),
    }
}

/// Order-preserving map, parallel when the `parallel` feature is on.
pub(crate) fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// The sentence embedding used by the baselines.
pub fn default_embedding(cfg: &ExperimentConfig) -> HashedTrigramEmbedding {
    HashedTrigramEmbedding::new(cfg.embedding.dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leak_check() {
        let a: BTreeSet<String> = ["r1", "r2"].iter().map(|s| s.to_string()).collect();
        let b: BTreeSet<String> = ["r3"].iter().map(|s| s.to_string()).collect();
        assert!(check_leak(&a, &b).is_ok());
        let c: BTreeSet<String> = ["r2", "r3"].iter().map(|s| s.to_string()).collect();
        match check_leak(&a, &c) {
            Err(Error::Leak { count, example }) => {
                assert_eq!(count, 1);
                assert_eq!(example, "r2");
            }
            other => panic!("{other:?}"),
        }
    }
}
