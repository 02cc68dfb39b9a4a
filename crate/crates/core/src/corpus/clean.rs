//! Raw-to-clean dataset pipeline: relabel inconsistent duplicates, drop
//! unusable responses, drop excluded and under-populated questions.

use std::collections::{BTreeSet, HashMap};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Corpus, ScoredResponse};

static IMAGE_MARKUP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)<img\b[^>]*>|!\[[^\]]*\]\([^)]*\)|\[(?:image|img|attachment|file)\b[^\]]*\]|<(?:object|embed|iframe)\b[^>]*>",
    )
    .unwrap()
});
static ANY_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^>]*>").unwrap());
static ENTITY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"&(?:nbsp|amp|lt|gt|quot|#\d+);").unwrap());

/// Lowercase, collapse whitespace, trim leading/trailing punctuation.
pub fn normalize_text(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Text left once image markup, HTML tags and common entities are removed.
pub fn strip_markup(text: &str) -> String {
    let no_img = IMAGE_MARKUP.replace_all(text, " ");
    let no_tags = ANY_TAG.replace_all(&no_img, " ");
    ENTITY.replace_all(&no_tags, " ").trim().to_string()
}

pub fn has_image_markup(text: &str) -> bool {
    IMAGE_MARKUP.is_match(text)
}

fn is_allowed_char(c: char) -> bool {
    c.is_ascii_alphanumeric()
        || c.is_ascii_punctuation()
        || "×÷−±≤≥≠≈∞√π°½¼¾²³∑∫∆θαβ·′″".contains(c)
}

/// Share of non-whitespace characters outside the allowed alphabet.
pub(crate) fn disallowed_ratio(text: &str) -> f64 {
    let (mut total, mut bad) = (0usize, 0usize);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if !is_allowed_char(c) {
            bad += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        bad as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagePolicy {
    /// Drop responses whose only content is image/attachment markup.
    OnlyImage,
    /// Drop any response carrying image/attachment markup.
    AnyImage,
    Keep,
}

/// Predicates deciding that a response carries no gradable text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleSet {
    pub drop_empty_after_markup: bool,
    pub image_policy: ImagePolicy,
    /// Drop when the disallowed-character share exceeds this value.
    pub max_disallowed_ratio: Option<f64>,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            drop_empty_after_markup: true,
            image_policy: ImagePolicy::OnlyImage,
            max_disallowed_ratio: Some(0.5),
        }
    }
}

impl RuleSet {
    pub fn is_unusable(&self, text: &str) -> bool {
        let stripped = strip_markup(text);
        let image = has_image_markup(text);
        if self.drop_empty_after_markup && stripped.is_empty() {
            return true;
        }
        match self.image_policy {
            ImagePolicy::OnlyImage if image && stripped.is_empty() => return true,
            ImagePolicy::AnyImage if image => return true,
            _ => {}
        }
        match self.max_disallowed_ratio {
            Some(t) => disallowed_ratio(&stripped) > t,
            None => false,
        }
    }
}

/// Within each question, responses with identical normalised text all take
/// the highest score observed among them. Returns the number of responses
/// whose score changed.
pub fn relabel_inconsistent(c: &Corpus) -> (Corpus, usize) {
    let mut best: HashMap<(&str, String), _> = HashMap::new();
    for r in c.responses() {
        let e = best
            .entry((r.question_id.as_str(), normalize_text(&r.text)))
            .or_insert(r.score);
        if r.score > *e {
            *e = r.score;
        }
    }
    let mut changed = 0;
    let responses: Vec<ScoredResponse> = c
        .responses()
        .iter()
        .map(|r| {
            let top = best[&(r.question_id.as_str(), normalize_text(&r.text))];
            let mut r = r.clone();
            if r.score != top {
                r.score = top;
                changed += 1;
            }
            r
        })
        .collect();
    let corpus = Corpus::new(c.questions().to_vec(), responses).expect("relabel keeps validity");
    (corpus, changed)
}

pub fn remove_unusable_responses(c: &Corpus, rules: &RuleSet) -> (Corpus, usize) {
    let before = c.responses().len();
    let kept: Vec<_> = c
        .responses()
        .iter()
        .filter(|r| !rules.is_unusable(&r.text))
        .cloned()
        .collect();
    let removed = before - kept.len();
    (
        Corpus::new(c.questions().to_vec(), kept).expect("filtering keeps validity"),
        removed,
    )
}

/// Drop excluded questions, then questions with fewer than `min_responses`
/// responses. Returns the number of removed questions.
pub fn remove_questions(
    c: &Corpus,
    exclusion_ids: &BTreeSet<String>,
    min_responses: usize,
) -> (Corpus, usize) {
    let (after_excl, excluded) = drop_questions(c, |q| exclusion_ids.contains(q));
    let (after_small, small) = drop_questions(&after_excl, |q| after_excl.response_count(q) < min_responses);
    (after_small, excluded + small)
}

fn drop_questions(c: &Corpus, mut drop: impl FnMut(&str) -> bool) -> (Corpus, usize) {
    let removed: BTreeSet<String> = c
        .questions()
        .iter()
        .filter(|q| drop(&q.id))
        .map(|q| q.id.clone())
        .collect();
    let questions = c
        .questions()
        .iter()
        .filter(|q| !removed.contains(&q.id))
        .cloned()
        .collect();
    let responses = c
        .responses()
        .iter()
        .filter(|r| !removed.contains(&r.question_id))
        .cloned()
        .collect();
    (
        Corpus::new(questions, responses).expect("filtering keeps validity"),
        removed.len(),
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub rules: RuleSet,
    pub exclusion_ids: BTreeSet<String>,
    pub min_responses: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            rules: RuleSet::default(),
            exclusion_ids: BTreeSet::new(),
            min_responses: 25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub relabeled: usize,
    pub unusable_removed: usize,
    pub excluded_questions: usize,
    pub excluded_question_responses: usize,
    pub small_questions: usize,
    pub small_question_responses: usize,
    pub final_questions: usize,
    pub final_responses: usize,
}

/// Full pipeline in fixed order: relabel, drop responses, drop excluded
/// questions, drop small questions.
pub fn clean(c: &Corpus, cfg: &CleanConfig) -> (Corpus, CleaningReport) {
    let (c1, relabeled) = relabel_inconsistent(c);
    let (c2, unusable_removed) = remove_unusable_responses(&c1, &cfg.rules);
    let n2 = c2.responses().len();
    let (c3, excluded_questions) = remove_questions(&c2, &cfg.exclusion_ids, 0);
    let n3 = c3.responses().len();
    let (c4, small_questions) = remove_questions(&c3, &BTreeSet::new(), cfg.min_responses);
    let report = CleaningReport {
        relabeled,
        unusable_removed,
        excluded_questions,
        excluded_question_responses: n2 - n3,
        small_questions,
        small_question_responses: n3 - c4.responses().len(),
        final_questions: c4.questions().len(),
        final_responses: c4.responses().len(),
    };
    (c4, report)
}
