//! Error analysis: per-response features, correct-vs-incorrect significance
//! tests, the math/text partition and per-label metrics.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::backend::{reference_tokens, ClassProbs};
use crate::corpus::{has_image_markup, Corpus, Question, ScoredResponse};
use crate::error::{Error, Result};
use crate::harness::Prediction;
use crate::metrics::{self, MetricConfig, MetricReport};
use crate::score::Score;

/// Significance threshold for the star in comparison tables.
pub const SIGNIFICANCE: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Math,
    Text,
}

const OPERATORS: &[char] = &['+', '-', '−', '*', '×', '÷', '/', '=', '<', '>', '^', '%', '$', '(', ')'];

static TABLE_MARKUP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<table\b|(?m)^\s*\|.*\|\s*$").unwrap());

fn has_operator(token: &str) -> bool {
    token.chars().any(|c| OPERATORS.contains(&c))
}

fn is_single_letter(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if c.is_alphabetic())
}

/// Class of a token on its own: digits or operator symbols make it math.
pub fn token_class(token: &str) -> TokenClass {
    if token.chars().any(|c| c.is_ascii_digit()) || has_operator(token) {
        TokenClass::Math
    } else {
        TokenClass::Text
    }
}

/// Classes of a token sequence. A single letter next to a math token that
/// carries an operator also counts as math (`x + 3`, `y =`).
pub fn classify_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<TokenClass> {
    let base: Vec<TokenClass> = tokens.iter().map(|t| token_class(t.as_ref())).collect();
    let op: Vec<bool> = tokens.iter().map(|t| has_operator(t.as_ref())).collect();
    base.iter()
        .enumerate()
        .map(|(i, &c)| {
            if c == TokenClass::Text && is_single_letter(tokens[i].as_ref()) {
                let left = i > 0 && op[i - 1];
                let right = i + 1 < op.len() && op[i + 1];
                if left || right {
                    return TokenClass::Math;
                }
            }
            c
        })
        .collect()
}

/// Share of math tokens in percent; 0 for text without tokens.
pub fn math_token_pct(text: &str) -> f64 {
    let toks = reference_tokens(text);
    if toks.is_empty() {
        return 0.0;
    }
    let math = classify_tokens(&toks).iter().filter(|c| **c == TokenClass::Math).count();
    100.0 * math as f64 / toks.len() as f64
}

/// Strictly more than half of the tokens are math.
pub fn is_math_response(text: &str) -> bool {
    let toks = reference_tokens(text);
    let math = classify_tokens(&toks).iter().filter(|c| **c == TokenClass::Math).count();
    2 * math > toks.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub math_token_pct: f64,
    pub contains_img_table: bool,
    pub response_length: usize,
    pub score: u8,
    /// Unknown when the source did not record it.
    pub num_graders: Option<u32>,
    pub question_length: usize,
    pub question_math_token_pct: f64,
}

pub fn extract_features(resp: &ScoredResponse, q: &Question) -> FeatureRow {
    FeatureRow {
        math_token_pct: math_token_pct(&resp.text),
        contains_img_table: has_image_markup(&resp.text) || TABLE_MARKUP.is_match(&resp.text),
        response_length: reference_tokens(&resp.text).len(),
        score: resp.score.value(),
        num_graders: resp.num_graders,
        question_length: reference_tokens(&q.text).len(),
        question_math_token_pct: math_token_pct(&q.text),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Welch,
    TwoProportion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureComparison {
    pub feature: String,
    pub test: TestKind,
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub statistic: Option<f64>,
    /// `None` when the standard error is zero.
    pub p_value: Option<f64>,
    pub significant: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Welch two-sample t-test: (mean a, mean b, t, two-sided p).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, Option<f64>, Option<f64>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("welch test needs at least two values per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Ok((ma, mb, None, None));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Validation(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok((ma, mb, Some(t), Some(p)))
}

/// Pooled two-proportion z-test: (share a, share b, z, two-sided p).
pub fn two_proportion_z_test(a: &[bool], b: &[bool]) -> Result<(f64, f64, Option<f64>, Option<f64>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("proportion test needs at least two values per group".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pa = a.iter().filter(|x| **x).count() as f64 / na;
    let pb = b.iter().filter(|x| **x).count() as f64 / nb;
    let pooled = (pa * na + pb * nb) / (na + nb);
    let se = (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt();
    if se <= 0.0 {
        return Ok((pa, pb, None, None));
    }
    let z = (pa - pb) / se;
    let p = 2.0 * Normal::standard().cdf(-z.abs());
    Ok((pa, pb, Some(z), Some(p)))
}

fn continuous(name: &str, a: &[f64], b: &[f64]) -> Result<FeatureComparison> {
    let (ma, mb, t, p) = if a.len() < 2 || b.len() < 2 {
        let m = |x: &[f64]| if x.is_empty() { f64::NAN } else { mean_var(x).0 };
        (m(a), m(b), None, None)
    } else {
        welch_t_test(a, b)?
    };
    Ok(FeatureComparison {
        feature: name.into(),
        test: TestKind::Welch,
        mean_correct: ma,
        mean_incorrect: mb,
        statistic: t,
        p_value: p,
        significant: p.is_some_and(|p| p < SIGNIFICANCE),
    })
}

/// One row per feature. Means of the boolean feature are percentages.
pub fn compare_groups(correct: &[FeatureRow], incorrect: &[FeatureRow]) -> Result<Vec<FeatureComparison>> {
    if correct.len() < 2 || incorrect.len() < 2 {
        return Err(Error::Validation(format!(
            "each group needs at least two rows (got {} and {})",
            correct.len(),
            incorrect.len()
        )));
    }
    let col = |rows: &[FeatureRow], f: &dyn Fn(&FeatureRow) -> Option<f64>| -> Vec<f64> {
        rows.iter().filter_map(f).collect()
    };
    let features: [(&str, &dyn Fn(&FeatureRow) -> Option<f64>); 6] = [
        ("response_math_token_pct", &|r| Some(r.math_token_pct)),
        ("response_length", &|r| Some(r.response_length as f64)),
        ("score", &|r| Some(r.score as f64)),
        ("num_graders", &|r| r.num_graders.map(f64::from)),
        ("question_length", &|r| Some(r.question_length as f64)),
        ("question_math_token_pct", &|r| Some(r.question_math_token_pct)),
    ];
    let mut out = Vec::new();
    for (i, (name, f)) in features.iter().enumerate() {
        out.push(continuous(name, &col(correct, *f), &col(incorrect, *f))?);
        if i == 0 {
            let a: Vec<bool> = correct.iter().map(|r| r.contains_img_table).collect();
            let b: Vec<bool> = incorrect.iter().map(|r| r.contains_img_table).collect();
            let (pa, pb, z, p) = two_proportion_z_test(&a, &b)?;
            out.push(FeatureComparison {
                feature: "contains_img_table".into(),
                test: TestKind::TwoProportion,
                mean_correct: 100.0 * pa,
                mean_incorrect: 100.0 * pb,
                statistic: z,
                p_value: p,
                significant: p.is_some_and(|p| p < SIGNIFICANCE),
            });
        }
    }
    Ok(out)
}

/// Feature rows of predictions split by whether argmax equals the label.
pub fn split_by_correctness(corpus: &Corpus, predictions: &[Prediction]) -> Result<(Vec<FeatureRow>, Vec<FeatureRow>)> {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for p in predictions {
        let r = corpus
            .response(&p.response_id)
            .ok_or_else(|| Error::Validation(format!("unknown response '{}'", p.response_id)))?;
        let q = corpus
            .question(&r.question_id)
            .ok_or_else(|| Error::Validation(format!("unknown question '{}'", r.question_id)))?;
        let row = extract_features(r, q);
        if p.probs.argmax() == p.label {
            correct.push(row);
        } else {
            incorrect.push(row);
        }
    }
    Ok((correct, incorrect))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MathTextPartition {
    pub math_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub math: Option<MetricReport>,
    pub text: Option<MetricReport>,
    pub notes: Vec<String>,
}

fn partition_report(
    name: &str,
    probs: &[ClassProbs],
    labels: &[Score],
    cfg: MetricConfig,
    notes: &mut Vec<String>,
) -> Result<Option<MetricReport>> {
    if probs.is_empty() {
        notes.push(format!("{name} partition is empty; metrics omitted"));
        return Ok(None);
    }
    metrics::report(probs, labels, cfg).map(Some)
}

/// Split predictions into math-heavy and text-heavy responses and score each part.
pub fn partition_math_text(items: &[(&ScoredResponse, ClassProbs)], cfg: MetricConfig) -> Result<MathTextPartition> {
    let (mut mp, mut ml, mut tp, mut tl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut math_ids, mut text_ids) = (Vec::new(), Vec::new());
    for (r, p) in items {
        if is_math_response(&r.text) {
            math_ids.push(r.id.clone());
            mp.push(*p);
            ml.push(r.score);
        } else {
            text_ids.push(r.id.clone());
            tp.push(*p);
            tl.push(r.score);
        }
    }
    let mut notes = Vec::new();
    let math = partition_report("math", &mp, &ml, cfg, &mut notes)?;
    let text = partition_report("text", &tp, &tl, cfg, &mut notes)?;
    Ok(MathTextPartition {
        math_ids,
        text_ids,
        math,
        text,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    pub report: MetricReport,
}

pub const UNLABELED: &str = "unlabeled";

/// One report per value of the question label `label_key`, lowest Kappa first.
pub fn per_group_metrics(
    corpus: &Corpus,
    predictions: &[Prediction],
    label_key: &str,
    cfg: MetricConfig,
) -> Result<Vec<GroupRow>> {
    let label_of: HashMap<&str, &str> = corpus
        .questions()
        .iter()
        .map(|q| {
            let l = q.labels.get(label_key).map(String::as_str).unwrap_or(UNLABELED);
            (q.id.as_str(), l)
        })
        .collect();
    let mut groups: BTreeMap<&str, (Vec<ClassProbs>, Vec<Score>)> = BTreeMap::new();
    for p in predictions {
        let g = label_of.get(p.question_id.as_str()).copied().unwrap_or(UNLABELED);
        let e = groups.entry(g).or_default();
        e.0.push(p.probs);
        e.1.push(p.label);
    }
    let mut rows = groups
        .into_iter()
        .map(|(g, (probs, labels))| {
            Ok(GroupRow {
                group: g.to_string(),
                n: probs.len(),
                report: metrics::report(&probs, &labels, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.report.kappa.total_cmp(&b.report.kappa).then_with(|| a.group.cmp(&b.group)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn resp(id: &str, text: &str, score: i64) -> ScoredResponse {
        ScoredResponse::new(id, "q1", text, Score::new(score).unwrap())
    }

    #[test]
    fn token_classes() {
        assert_eq!(token_class("560"), TokenClass::Math);
        assert_eq!(token_class("the"), TokenClass::Text);
        assert_eq!(token_class("800-240=560"), TokenClass::Math);
        assert_eq!(token_class("x"), TokenClass::Text);
        let toks = ["x", "+", "3", "is", "a", "number"];
        let c = classify_tokens(&toks);
        assert_eq!(c[0], TokenClass::Math);
        assert_eq!(c[4], TokenClass::Text);
    }

    #[test]
    fn half_math_is_text() {
        assert!(!is_math_response("1 2 3 the cat sat"));
        assert!(is_math_response("1 2 3 4 the cat sat"));
        assert_eq!(math_token_pct("12 34 56"), 100.0);
    }

    #[test]
    fn empty_response_features() {
        let q = Question::new("q1", "what is 2+2");
        let f = extract_features(&resp("r", "", 0), &q);
        assert_eq!(f.response_length, 0);
        assert_eq!(f.math_token_pct, 0.0);
        assert_eq!(f.question_length, 3);
        assert!(!f.contains_img_table);
        let img = extract_features(&resp("r", "see <img src=\"a.png\">", 1), &q);
        assert!(img.contains_img_table);
        let table = extract_features(&resp("r", "| a | b |\n| 1 | 2 |", 1), &q);
        assert!(table.contains_img_table);
    }

    fn row(x: f64, flag: bool) -> FeatureRow {
        FeatureRow {
            math_token_pct: x,
            contains_img_table: flag,
            response_length: 10,
            score: 2,
            num_graders: Some(2),
            question_length: 8,
            question_math_token_pct: 20.0,
        }
    }

    #[test]
    fn identical_groups_not_significant() {
        let a: Vec<FeatureRow> = (0..50).map(|i| row(i as f64, i % 3 == 0)).collect();
        let table = compare_groups(&a, &a).unwrap();
        assert_eq!(table.len(), 7);
        for c in &table {
            assert!(!c.significant, "{}", c.feature);
            if let Some(p) = c.p_value {
                assert!((p - 1.0).abs() < 1e-12);
            }
        }
        let constant = table.iter().find(|c| c.feature == "response_length").unwrap();
        assert_eq!(constant.p_value, None);
    }

    #[test]
    fn five_sigma_shift_is_significant() {
        let mut rng = crate::seeding::rng(3);
        let mut noise = || rng.random::<f64>() * 12f64.sqrt() - 12f64.sqrt() / 2.0;
        let a: Vec<FeatureRow> = (0..200).map(|_| row(noise(), false)).collect();
        let b: Vec<FeatureRow> = (0..200).map(|_| row(5.0 + noise(), false)).collect();
        let table = compare_groups(&a, &b).unwrap();
        assert!(table[0].significant);
        assert!(table[0].p_value.unwrap() < 1e-10);
    }

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let (ma, mb, t, p) = welch_t_test(&a, &b).unwrap();
        assert_eq!((ma, mb), (2.5, 6.0));
        // var a = 5/3, var b = 10; se^2 = 5/12 + 2
        let se2: f64 = 5.0 / 12.0 + 2.0;
        assert!((t.unwrap() - (-3.5 / se2.sqrt())).abs() < 1e-12);
        // scipy.stats.ttest_ind(a, b, equal_var=False)
        assert!((p.unwrap() - 0.069_133_593_192_392_36).abs() < 1e-9);
    }

    #[test]
    fn small_group_is_an_error() {
        assert!(compare_groups(&[row(1.0, false)], &[row(1.0, false), row(2.0, true)]).is_err());
    }

    #[test]
    fn partition_by_hand_count() {
        let rs = [
            resp("a", "800-240=560", 4),
            resp("b", "the answer is 560", 3),
            resp("c", "x = 5 so", 2),
            resp("d", "because I said so", 0),
        ];
        let items: Vec<(&ScoredResponse, ClassProbs)> = rs.iter().map(|r| (r, ClassProbs::one_hot(r.score))).collect();
        let p = partition_math_text(&items, MetricConfig::default()).unwrap();
        assert_eq!(p.math_ids, vec!["a", "c"]);
        assert_eq!(p.text_ids, vec!["b", "d"]);
        assert_eq!(p.math.unwrap().kappa, 1.0);

        let all_math: Vec<(&ScoredResponse, ClassProbs)> = items[..1].to_vec();
        let p = partition_math_text(&all_math, MetricConfig::default()).unwrap();
        assert!(p.text.is_none());
        assert_eq!(p.notes.len(), 1);
    }

    fn pred(id: &str, q: &str, label: i64, guess: i64) -> Prediction {
        Prediction {
            response_id: id.into(),
            question_id: q.into(),
            seed: 0,
            fold: 0,
            probs: ClassProbs::one_hot(Score::new(guess).unwrap()),
            label: Score::new(label).unwrap(),
        }
    }

    #[test]
    fn groups_sorted_by_kappa() {
        let mut q1 = Question::new("q1", "a");
        q1.labels.insert("topic".into(), "good".into());
        let mut q2 = Question::new("q2", "b");
        q2.labels.insert("topic".into(), "bad".into());
        let q3 = Question::new("q3", "c");
        let corpus = Corpus::new(
            vec![q1, q2, q3],
            vec![
                resp("r1", "x", 0),
                ScoredResponse::new("r2", "q2", "y", Score::new(0).unwrap()),
                ScoredResponse::new("r3", "q3", "z", Score::new(0).unwrap()),
            ],
        )
        .unwrap();
        let preds = vec![
            pred("a", "q1", 0, 0),
            pred("b", "q1", 4, 4),
            pred("c", "q2", 0, 4),
            pred("d", "q2", 4, 0),
            pred("e", "q3", 1, 1),
            pred("f", "q3", 2, 1),
        ];
        let rows = per_group_metrics(&corpus, &preds, "topic", MetricConfig::default()).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(names, vec!["bad", "unlabeled", "good"]);
        assert!(rows[0].report.kappa <= 0.0);
        assert_eq!(rows[2].report.kappa, 1.0);
    }
}
