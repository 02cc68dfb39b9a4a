//! Synthetic math-response corpora with a known scoring rule.
//!
//! Each (question, score) pair owns a few random math-like key tokens; a response
//! with score `k` contains some of question's class-`k` key tokens buried in
//! filler words drawn from a large vocabulary. Scores come from an ordinal
//! item-response model over student ability and question difficulty.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Question, ScoredResponse};
use crate::error::{Error, Result};
use crate::rasch;
use crate::score::{Score, SCALE_SIZE};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub questions: usize,
    /// Also the number of students: student `i` answers every question.
    pub responses_per_question: usize,
    pub filler_vocab: usize,
    pub filler_min: usize,
    pub filler_max: usize,
    /// Extra filler words per score point (longer answers score higher).
    pub length_per_score: usize,
    pub key_tokens_per_class: usize,
    pub key_tokens_per_response: usize,
    /// Probability that a response also carries one key token of a
    /// neighbouring class.
    pub confusion: f64,
    /// Ordinal thresholds of the score model.
    pub thresholds: [f64; SCALE_SIZE - 1],
    pub ability_sd: f64,
    pub difficulty_sd: f64,
    /// Question topics assigned round-robin under the `topic` label.
    pub topics: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            questions: 30,
            responses_per_question: 60,
            filler_vocab: 4000,
            filler_min: 10,
            filler_max: 24,
            length_per_score: 1,
            key_tokens_per_class: 3,
            key_tokens_per_response: 2,
            confusion: 0.1,
            thresholds: [-2.2, -1.0, 0.0, 1.0],
            ability_sd: 1.0,
            difficulty_sd: 0.6,
            topics: vec!["algebra".into(), "geometry".into(), "fractions".into()],
            seed: 0,
        }
    }
}

/// Generating parameters, for recovery checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub ability: BTreeMap<String, f64>,
    pub difficulty: BTreeMap<String, f64>,
    pub key_tokens: BTreeMap<String, Vec<Vec<String>>>,
}

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "su", "ra", "te", "vo", "pi", "da", "go", "fu", "be", "zi", "ho", "wa", "je",
    "qu", "xi", "yo",
];

const COMMON: [&str; 12] = [
    "i", "think", "the", "answer", "is", "because", "so", "we", "get", "then", "it", "and",
];

fn filler_word(i: usize) -> String {
    let mut w = String::new();
    let mut x = i + 1;
    while x > 0 {
        w.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    w
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw a category from a probability vector.
pub fn sample_category<R: Rng + ?Sized>(p: &[f64; SCALE_SIZE], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    SCALE_SIZE - 1
}

pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    generate_with_truth(cfg).map(|(c, _)| c)
}

pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(Corpus, SynthTruth)> {
    if cfg.questions == 0 || cfg.responses_per_question == 0 || cfg.filler_max < cfg.filler_min {
        return Err(Error::Config("synthetic corpus needs questions, responses and a valid filler range".into()));
    }
    if cfg.key_tokens_per_response > cfg.key_tokens_per_class || cfg.key_tokens_per_class == 0 {
        return Err(Error::Config("key tokens per response must not exceed key tokens per class".into()));
    }
    let mut rng = seeding::rng(cfg.seed);
    let students: Vec<String> = (0..cfg.responses_per_question).map(|i| format!("s{i:03}")).collect();
    let ability: BTreeMap<String, f64> = students
        .iter()
        .map(|s| (s.clone(), cfg.ability_sd * standard_normal(&mut rng)))
        .collect();
    let vocab: Vec<String> = (0..cfg.filler_vocab.max(1)).map(filler_word).collect();

    let mut questions = Vec::new();
    let mut responses = Vec::new();
    let mut difficulty = BTreeMap::new();
    let mut key_tokens = BTreeMap::new();
    for qi in 0..cfg.questions {
        let qid = format!("q{qi:03}");
        let (a, b) = (rng.random_range(2..13), rng.random_range(1..30));
        let x = rng.random_range(2..20);
        let mut q = Question::new(
            qid.clone(),
            format!("solve for x when {a}x + {b} = {} and explain each step", a * x + b),
        );
        if !cfg.topics.is_empty() {
            q.labels.insert("topic".into(), cfg.topics[qi % cfg.topics.len()].clone());
        }
        let diff = cfg.difficulty_sd * standard_normal(&mut rng);
        difficulty.insert(qid.clone(), diff);
        let mut seen = BTreeSet::new();
        let keys: Vec<Vec<String>> = (0..SCALE_SIZE)
            .map(|_| {
                (0..cfg.key_tokens_per_class)
                    .map(|_| loop {
                        let t = format!(
                            "{}{}={}",
                            rng.random_range(2..99),
                            ["x", "y", "n"].choose(&mut rng).expect("non-empty"),
                            rng.random_range(10..1000)
                        );
                        if seen.insert(t.clone()) {
                            break t;
                        }
                    })
                    .collect()
            })
            .collect();
        for (si, student) in students.iter().enumerate() {
            let eta = ability[student] - diff;
            let p = rasch::class_probs(&cfg.thresholds, eta);
            let k = sample_category(p.as_array(), &mut rng);
            let n_filler = rng.random_range(cfg.filler_min..=cfg.filler_max) + k * cfg.length_per_score;
            let mut words: Vec<String> = (0..n_filler)
                .map(|_| {
                    if rng.random_bool(0.25) {
                        COMMON.choose(&mut rng).expect("non-empty").to_string()
                    } else {
                        vocab.choose(&mut rng).expect("non-empty").clone()
                    }
                })
                .collect();
            let mut chosen: Vec<&String> = keys[k].iter().collect();
            chosen.sort_by_key(|_| rng.random::<u32>());
            chosen.truncate(cfg.key_tokens_per_response);
            let mut extra = Vec::new();
            if rng.random_bool(cfg.confusion) {
                let other = if k == 0 { 1 } else if k == SCALE_SIZE - 1 { k - 1 } else if rng.random_bool(0.5) { k - 1 } else { k + 1 };
                extra.push(keys[other].choose(&mut rng).expect("non-empty").clone());
            }
            for t in chosen.into_iter().cloned().chain(extra) {
                let pos = rng.random_range(0..=words.len());
                words.insert(pos, t);
            }
            let mut r = ScoredResponse::new(
                format!("{qid}-r{si:03}"),
                qid.clone(),
                words.join(" "),
                Score::new(k as i64)?,
            );
            r.student_id = Some(student.clone());
            r.num_graders = Some(1 + (si % 3) as u32);
            responses.push(r);
        }
        key_tokens.insert(qid, keys);
        questions.push(q);
    }
    let corpus = Corpus::new(questions, responses)?;
    Ok((
        corpus,
        SynthTruth {
            ability,
            difficulty,
            key_tokens,
        },
    ))
}

/// Counts of planted defects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Copies of existing responses with a lower score (each is relabeled).
    pub duplicates: usize,
    /// Responses consisting only of image markup.
    pub image_only: usize,
    /// Extra questions with fewer responses than the cleaning minimum.
    pub small_questions: usize,
    pub small_question_size: usize,
    pub seed: u64,
}

/// Add planted defects to a clean corpus.
pub fn plant_noise(c: &Corpus, noise: &NoiseConfig) -> Result<Corpus> {
    let mut rng = seeding::rng(noise.seed);
    let mut questions = c.questions().to_vec();
    let mut responses = c.responses().to_vec();
    let candidates: Vec<&ScoredResponse> = c.responses().iter().filter(|r| r.score > Score::MIN).collect();
    if candidates.len() < noise.duplicates {
        return Err(Error::Config("not enough responses above the minimum score to duplicate".into()));
    }
    let mut picked: Vec<&ScoredResponse> = candidates.choose_multiple(&mut rng, noise.duplicates).copied().collect();
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    for (i, r) in picked.into_iter().enumerate() {
        let mut d = r.clone();
        d.id = format!("{}-dup{i}", r.id);
        d.score = Score::new(rng.random_range(0..r.score.value() as i64))?;
        responses.push(d);
    }
    for i in 0..noise.image_only {
        let q = &c.questions()[i % c.questions().len()];
        responses.push(ScoredResponse::new(
            format!("{}-img{i}", q.id),
            q.id.clone(),
            format!("<img src=\"upload_{i}.png\">"),
            Score::new(rng.random_range(0..SCALE_SIZE as i64))?,
        ));
    }
    for i in 0..noise.small_questions {
        let qid = format!("small{i}");
        questions.push(Question::new(qid.clone(), format!("short question {i}")));
        for j in 0..noise.small_question_size {
            responses.push(ScoredResponse::new(
                format!("{qid}-r{j}"),
                qid.clone(),
                format!("answer {j} for small question {i}"),
                Score::new(rng.random_range(0..SCALE_SIZE as i64))?,
            ));
        }
    }
    Corpus::new(questions, responses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{clean, CleanConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            questions: 4,
            responses_per_question: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.questions().len(), 4);
        assert_eq!(a.responses().len(), 120);
        assert!(a.responses().iter().all(|r| r.student_id.is_some()));
    }

    #[test]
    fn responses_carry_their_class_keys() {
        let (c, truth) = generate_with_truth(&small()).unwrap();
        for r in c.responses() {
            let keys = &truth.key_tokens[&r.question_id][r.score.index()];
            assert!(keys.iter().any(|k| r.text.split(' ').any(|w| w == k)));
        }
    }

    #[test]
    fn planted_noise_is_counted_exactly() {
        let c = generate(&small()).unwrap();
        let noise = NoiseConfig {
            duplicates: 7,
            image_only: 5,
            small_questions: 3,
            small_question_size: 4,
            seed: 1,
        };
        let noisy = plant_noise(&c, &noise).unwrap();
        let (_, report) = clean(&noisy, &CleanConfig::default());
        assert_eq!(report.relabeled, 7);
        assert_eq!(report.unusable_removed, 5);
        assert_eq!(report.small_questions, 3);
    }
}
