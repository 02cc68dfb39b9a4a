#![allow(dead_code)]

use std::path::PathBuf;

use asag_core::backend::{ClassProbs, ReferenceBackend};
use asag_core::corpus::{Question, ScoredResponse};
use asag_core::harness::{ablation_variants, ExperimentConfig};
use asag_core::rasch::{self, RaschObservation};
use asag_core::templating::{assemble_prompt, PromptConfig};
use asag_core::{Score, SCALE_SIZE};
use rand::Rng;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// (file stem, prompt config) for every golden prompt.
pub fn golden_cases() -> Vec<(String, PromptConfig)> {
    let mut cases: Vec<(String, PromptConfig)> = ablation_variants(&ExperimentConfig::default())
        .into_iter()
        .map(|v| (v.name.replace([' ', '-'], "_"), v.config.prompt))
        .collect();
    cases.push((
        "text_and_id".into(),
        PromptConfig {
            use_question_id: true,
            ..PromptConfig::default()
        },
    ));
    cases.push((
        "response_only".into(),
        PromptConfig {
            use_question_text: false,
            use_scale: false,
            use_examples: false,
            ..PromptConfig::default()
        },
    ));
    cases
}

/// The sample target, question and example used by the golden prompts.
pub fn golden_inputs() -> (ScoredResponse, Question, ScoredResponse) {
    let target = ScoredResponse::new(
        "t",
        "21314",
        "expand the equation we get 2x+2 = 1 then x=-0.5",
        Score::new(3).unwrap(),
    );
    let q = Question::new("21314", "Solve the equation 2(x+1)=1");
    let ex = ScoredResponse::new("e", "21314", "move 2 to the right x=1/2", Score::new(2).unwrap());
    (target, q, ex)
}

/// (name, expected, actual) for every golden case.
pub fn golden_results() -> Vec<(String, String, String)> {
    let (target, q, ex) = golden_inputs();
    let scale: Vec<Score> = (1..=4).map(|s| Score::new(s).unwrap()).collect();
    let tok = ReferenceBackend::new("math", 0);
    golden_cases()
        .into_iter()
        .map(|(name, cfg)| {
            let expected = std::fs::read_to_string(fixture(&format!("golden/{name}.txt")))
                .unwrap_or_else(|e| panic!("golden/{name}.txt: {e}"));
            let examples = if cfg.use_examples { vec![&ex] } else { vec![] };
            let p = assemble_prompt(&target, &q, &examples, &scale, &cfg, &tok);
            (name, expected, p.assembled)
        })
        .collect()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Pairwise AUC: share of (positive, negative) pairs ordered correctly, ties half.
pub fn brute_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut hit, mut pairs) = (0.0, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    hit += 1.0;
                } else if scores[i] == scores[j] {
                    hit += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| hit / pairs as f64)
}

pub fn brute_ovr_auc(probs: &[ClassProbs], labels: &[Score]) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in Score::all() {
        if !labels.contains(&c) {
            continue;
        }
        let s: Vec<f64> = probs.iter().map(|p| p.as_array()[c.index()]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        aucs.push(brute_auc(&s, &pos)?);
    }
    (aucs.len() >= 2).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Unweighted kappa as (p_o - p_e) / (1 - p_e) from raw counts.
pub fn direct_kappa(preds: &[Score], labels: &[Score]) -> f64 {
    let n = preds.len() as f64;
    let agree = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    let mut pe = 0.0;
    for c in Score::all() {
        let a = preds.iter().filter(|p| **p == c).count() as f64 / n;
        let b = labels.iter().filter(|l| **l == c).count() as f64 / n;
        pe += a * b;
    }
    if (1.0 - pe).abs() < 1e-15 {
        1.0
    } else {
        (agree - pe) / (1.0 - pe)
    }
}

/// Weighted kappa straight from the definition with weights `w(i, j)`.
pub fn direct_weighted_kappa(preds: &[Score], labels: &[Score], w: impl Fn(usize, usize) -> f64) -> f64 {
    let n = preds.len() as f64;
    let mut num = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        num += w(p.index(), l.index());
    }
    num /= n;
    let mut den = 0.0;
    for p in preds {
        for l in labels {
            den += w(p.index(), l.index());
        }
    }
    den /= n * n;
    if den <= f64::EPSILON {
        1.0
    } else {
        1.0 - num / den
    }
}

pub fn direct_rmse(probs: &[ClassProbs], labels: &[Score]) -> f64 {
    let mut s = 0.0;
    for (p, l) in probs.iter().zip(labels) {
        let e: f64 = p.as_array().iter().enumerate().map(|(k, pk)| k as f64 * pk).sum();
        s += (e - l.value() as f64).powi(2);
    }
    (s / probs.len() as f64).sqrt()
}

pub fn random_probs<R: Rng>(rng: &mut R) -> ClassProbs {
    let raw: [f64; SCALE_SIZE] = std::array::from_fn(|_| {
        // coarse values so ties occur
        (rng.random_range(0..8) as f64 + 0.5) / 8.0
    });
    ClassProbs::normalized(raw).unwrap()
}

pub struct RaschTruth {
    pub ability: Vec<f64>,
    pub difficulty: Vec<f64>,
    pub discrimination: Vec<f64>,
    pub observations: Vec<RaschObservation>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Every student answers every question; scores drawn from the cumulative
/// link model with uniform covariates.
pub fn simulate_rasch(students: usize, questions: usize, seed: u64) -> RaschTruth {
    let mut rng = asag_core::seeding::rng(seed);
    let ability: Vec<f64> = (0..students).map(|_| normal(&mut rng)).collect();
    let difficulty: Vec<f64> = (0..questions).map(|_| normal(&mut rng)).collect();
    let discrimination: Vec<f64> = (0..questions).map(|_| (0.3 * normal(&mut rng)).exp()).collect();
    let tau = [-1.5, -0.5, 0.5, 1.5];
    let mut observations = Vec::new();
    for (s, th) in ability.iter().enumerate() {
        for (q, (b, a)) in difficulty.iter().zip(&discrimination).enumerate() {
            let p = rasch::class_probs(&tau, a * (th - b));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = SCALE_SIZE - 1;
            for (c, pc) in p.as_array().iter().enumerate() {
                acc += pc;
                if u < acc {
                    k = c;
                    break;
                }
            }
            observations.push(RaschObservation {
                student_id: format!("s{s}"),
                question_id: format!("q{q}"),
                label: Some(Score::new(k as i64).unwrap()),
                probs: ClassProbs::uniform(),
                word_count: 10,
            });
        }
    }
    RaschTruth {
        ability,
        difficulty,
        discrimination,
        observations,
    }
}
