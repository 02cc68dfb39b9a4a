use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    /// Partition responses; every question is spread across folds.
    ByResponse,
    /// Partition questions; a question's responses share one fold.
    ByQuestion,
}

impl FoldMode {
    pub fn default_k(self) -> usize {
        match self {
            FoldMode::ByResponse => 10,
            FoldMode::ByQuestion => 5,
        }
    }
}

/// Cross-validation partition of response ids or question ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: FoldMode,
    pub k: usize,
    pub seed: u64,
    /// `folds[i]` lists the item ids held out in fold `i`.
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// item id → fold index. Items listed twice keep their last fold.
    pub fn assignment(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for (i, f) in self.folds.iter().enumerate() {
            for id in f {
                m.insert(id.as_str(), i);
            }
        }
        m
    }

    pub fn fold(&self, i: usize) -> BTreeSet<String> {
        self.folds[i].iter().cloned().collect()
    }

    /// Items of every fold not in `exclude`.
    pub fn complement(&self, exclude: &[usize]) -> BTreeSet<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(i))
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    /// Checks that the folds are pairwise disjoint.
    pub fn is_partition(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.folds.iter().flatten().all(|id| seen.insert(id.as_str()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: FoldPlan = serde_json::from_str(&text)?;
        if plan.folds.len() != plan.k {
            return Err(Error::Validation(format!(
                "fold plan lists {} folds but k = {}",
                plan.folds.len(),
                plan.k
            )));
        }
        Ok(plan)
    }
}

/// Deterministic k-fold partition.
///
/// `ByResponse` shuffles questions and the responses inside each question,
/// then deals the concatenation round-robin, so fold sizes differ by at most
/// one and each question lands in as many folds as it has responses (up to k).
pub fn make_folds(c: &Corpus, mode: FoldMode, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = seeding::rng(seed);
    let items: Vec<String> = match mode {
        FoldMode::ByQuestion => {
            let mut ids: Vec<String> = c.questions().iter().map(|q| q.id.clone()).collect();
            ids.shuffle(&mut rng);
            ids
        }
        FoldMode::ByResponse => {
            let mut qids: Vec<&str> = c.questions().iter().map(|q| q.id.as_str()).collect();
            qids.shuffle(&mut rng);
            let mut out = Vec::with_capacity(c.responses().len());
            for q in qids {
                let mut rs: Vec<String> = c.responses_for(q).map(|r| r.id.clone()).collect();
                rs.shuffle(&mut rng);
                out.extend(rs);
            }
            out
        }
    };
    if items.len() < k {
        return Err(Error::Validation(format!(
            "cannot split {} items into {k} folds",
            items.len()
        )));
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in items.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { mode, k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Question, ScoredResponse};
    use crate::Score;

    fn corpus(nq: usize, per_q: usize) -> Corpus {
        let qs = (0..nq).map(|i| Question::new(format!("q{i}"), "")).collect();
        let rs = (0..nq * per_q)
            .map(|i| ScoredResponse::new(format!("r{i}"), format!("q{}", i % nq), "x", Score::MIN))
            .collect();
        Corpus::new(qs, rs).unwrap()
    }

    #[test]
    fn exact_division_by_response() {
        let plan = make_folds(&corpus(4, 25), FoldMode::ByResponse, 10, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 10));
        assert!(plan.is_partition());
    }

    #[test]
    fn one_question_per_fold() {
        let plan = make_folds(&corpus(5, 3), FoldMode::ByQuestion, 5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 1));
    }

    #[test]
    fn deterministic_given_seed() {
        let c = corpus(7, 13);
        let a = make_folds(&c, FoldMode::ByResponse, 10, 42).unwrap();
        let b = make_folds(&c, FoldMode::ByResponse, 10, 42).unwrap();
        let d = make_folds(&c, FoldMode::ByResponse, 10, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn too_few_items() {
        assert!(make_folds(&corpus(3, 2), FoldMode::ByQuestion, 5, 0).is_err());
        assert!(make_folds(&corpus(3, 2), FoldMode::ByResponse, 1, 0).is_err());
    }

    #[test]
    fn every_question_keeps_training_data() {
        let c = corpus(9, 30);
        let plan = make_folds(&c, FoldMode::ByResponse, 10, 3).unwrap();
        for test in 0..10 {
            let train = plan.complement(&[test, (test + 1) % 10]);
            for q in c.questions() {
                assert!(c.responses_for(&q.id).any(|r| train.contains(&r.id)));
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let plan = make_folds(&corpus(5, 4), FoldMode::ByQuestion, 5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.json");
        plan.save(&p).unwrap();
        assert_eq!(FoldPlan::load(&p).unwrap(), plan);
    }
}
