//! In-context input construction.
//!
//! A prompt is the target response followed by optional question context,
//! the score scale and scored example responses from the same question:
//!
//! ```text
//! score this answer: {x} question text: {q} question id: {id} scale: {words} example: {x'}, score: {word} ...
//! ```
//!
//! Segments are joined with a single space; backends add their own special
//! tokens. The whole prompt must fit the backend's token budget, so each
//! example is prefix-truncated to `example_token_cap` tokens and trailing
//! examples are dropped until the total fits.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Question, ScoredResponse};
use crate::error::{Error, Result};
use crate::score::Score;

pub const SCORE_WORDS: [&str; 5] = ["bad", "poor", "fair", "good", "excellent"];

pub fn score_word(score: Score) -> &'static str {
    SCORE_WORDS[score.index()]
}

/// Checked variant for raw integers.
pub fn score_word_of(value: i64) -> Result<&'static str> {
    Score::new(value).map(score_word)
}

pub fn word_score(word: &str) -> Result<Score> {
    SCORE_WORDS
        .iter()
        .position(|w| *w == word)
        .map(|i| Score::new(i as i64).expect("index within scale"))
        .ok_or_else(|| Error::UnknownScoreWord(word.to_string()))
}

/// Token counting and prefix truncation, as done by a scoring backend.
pub trait Tokenizer {
    fn count_tokens(&self, text: &str) -> usize;

    /// Longest prefix of `text` holding at most `max_tokens` tokens.
    fn truncate_tokens(&self, text: &str, max_tokens: usize) -> String;

    /// Special tokens the backend adds around the prompt ([CLS], [SEP], ...).
    fn reserved_tokens(&self) -> usize {
        0
    }
}

/// Whitespace-delimited tokens. Reserves two slots to mirror `[CLS]`/`[SEP]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate_tokens(&self, text: &str, max_tokens: usize) -> String {
        let mut end = 0;
        let mut taken = 0;
        let mut in_token = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if in_token {
                    in_token = false;
                    end = i;
                    if taken == max_tokens {
                        break;
                    }
                }
            } else if !in_token {
                if taken == max_tokens {
                    break;
                }
                in_token = true;
                taken += 1;
            }
        }
        if in_token {
            end = text.len();
        }
        text[..end].trim_start().to_string()
    }

    fn reserved_tokens(&self) -> usize {
        2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Response,
    QuestionText,
    QuestionId,
    Scale,
    Example,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Render only the score words seen in the example pool.
    Observed,
    /// Always render all five words.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub use_question_text: bool,
    pub use_question_id: bool,
    pub use_scale: bool,
    pub use_examples: bool,
    pub max_examples: usize,
    pub example_token_cap: usize,
    pub total_token_cap: usize,
    pub resamples_at_test: usize,
    pub scale_mode: ScaleMode,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            use_question_text: true,
            use_question_id: false,
            use_scale: true,
            use_examples: true,
            max_examples: 25,
            example_token_cap: 70,
            total_token_cap: 512,
            resamples_at_test: 8,
            scale_mode: ScaleMode::Observed,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.example_token_cap == 0 || self.total_token_cap == 0 || self.resamples_at_test == 0 {
            return Err(Error::Config("token caps and resample count must be positive".into()));
        }
        Ok(())
    }
}

pub enum Payload<'a> {
    Response(&'a str),
    QuestionText(&'a str),
    QuestionId(&'a str),
    Scale(&'a [Score]),
    Example(&'a str, Score),
}

impl Payload<'_> {
    pub fn kind(&self) -> SegmentKind {
        match self {
            Payload::Response(_) => SegmentKind::Response,
            Payload::QuestionText(_) => SegmentKind::QuestionText,
            Payload::QuestionId(_) => SegmentKind::QuestionId,
            Payload::Scale(_) => SegmentKind::Scale,
            Payload::Example(..) => SegmentKind::Example,
        }
    }
}

pub fn render_segment(payload: &Payload<'_>) -> String {
    match payload {
        Payload::Response(x) => format!("score this answer: {x}"),
        Payload::QuestionText(q) => format!("question text: {q}"),
        Payload::QuestionId(id) => format!("question id: {id}"),
        Payload::Scale(scores) => {
            let words: Vec<&str> = scores.iter().map(|s| score_word(*s)).collect();
            format!("scale: {}", words.join(", "))
        }
        Payload::Example(x, s) => format!("example: {x}, score: {}", score_word(*s)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    /// Text slotted into the template (after truncation).
    pub payload: String,
    /// Score carried by an example segment.
    pub score: Option<Score>,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub target_id: String,
    pub question_id: String,
    pub segments: Vec<Segment>,
    pub assembled: String,
    /// Response ids of the examples that made it into the prompt.
    pub example_ids: Vec<String>,
}

impl PromptBundle {
    pub fn truncated_flags(&self) -> Vec<bool> {
        self.segments.iter().map(|s| s.truncated).collect()
    }

    pub fn example_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Example)
    }

    pub fn target_text(&self) -> &str {
        &self.segments[0].payload
    }
}

/// Distinct scores present in a pool, or the full scale for an empty pool.
pub fn observed_scale(pool: &[&ScoredResponse]) -> Vec<Score> {
    if pool.is_empty() {
        return Score::all().collect();
    }
    let mut v: Vec<Score> = pool.iter().map(|r| r.score).collect();
    v.sort();
    v.dedup();
    v
}

/// Draw in-context examples from a same-question pool.
///
/// One random example per score class present (class order shuffled), then a
/// uniform fill without replacement up to `max_examples`. When the whole pool
/// fits, it is returned in pool order and no randomness is consumed.
pub fn sample_examples<'a, R: Rng + ?Sized>(
    pool: &[&'a ScoredResponse],
    exclude_id: Option<&str>,
    cfg: &PromptConfig,
    rng: &mut R,
) -> Vec<&'a ScoredResponse> {
    if !cfg.use_examples {
        return Vec::new();
    }
    let candidates: Vec<&'a ScoredResponse> = pool
        .iter()
        .copied()
        .filter(|r| Some(r.id.as_str()) != exclude_id)
        .collect();
    let budget = cfg.max_examples.min(candidates.len());
    if budget == candidates.len() {
        return candidates;
    }
    let mut by_class: BTreeMap<Score, Vec<usize>> = BTreeMap::new();
    for (i, r) in candidates.iter().enumerate() {
        by_class.entry(r.score).or_default().push(i);
    }
    let mut classes: Vec<&Vec<usize>> = by_class.values().collect();
    classes.shuffle(rng);
    let mut taken = vec![false; candidates.len()];
    let mut chosen = Vec::with_capacity(budget);
    for members in classes {
        if chosen.len() == budget {
            break;
        }
        let &i = members.choose(rng).expect("class groups are non-empty");
        taken[i] = true;
        chosen.push(i);
    }
    let mut rest: Vec<usize> = (0..candidates.len()).filter(|&i| !taken[i]).collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(budget - chosen.len()));
    chosen.into_iter().map(|i| candidates[i]).collect()
}

fn make_segment(payload: Payload<'_>, raw: &str, truncated: bool) -> Segment {
    let score = match payload {
        Payload::Example(_, s) => Some(s),
        _ => None,
    };
    Segment {
        kind: payload.kind(),
        text: render_segment(&payload),
        payload: raw.to_string(),
        score,
        truncated,
    }
}

/// Shrink the slotted text until the rendered segment fits `cap` tokens.
fn fit_payload<T: Tokenizer + ?Sized>(
    tok: &T,
    raw: &str,
    cap: usize,
    render: impl Fn(&str) -> String,
) -> (String, bool) {
    if tok.count_tokens(&render(raw)) <= cap {
        return (raw.to_string(), false);
    }
    let overhead = tok.count_tokens(&render(""));
    let mut keep = cap.saturating_sub(overhead).min(tok.count_tokens(raw));
    loop {
        let cut = tok.truncate_tokens(raw, keep);
        if keep == 0 || tok.count_tokens(&render(&cut)) <= cap {
            return (cut, true);
        }
        keep -= 1;
    }
}

fn join(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build the prompt for `target`. Never fails: oversize inputs are truncated
/// and flagged instead.
pub fn assemble_prompt<T: Tokenizer + ?Sized>(
    target: &ScoredResponse,
    question: &Question,
    examples: &[&ScoredResponse],
    scale: &[Score],
    cfg: &PromptConfig,
    tok: &T,
) -> PromptBundle {
    let budget = cfg.total_token_cap.saturating_sub(tok.reserved_tokens());
    let full_scale: Vec<Score> = Score::all().collect();
    let scale = match cfg.scale_mode {
        ScaleMode::Full => full_scale.as_slice(),
        ScaleMode::Observed if scale.is_empty() => full_scale.as_slice(),
        ScaleMode::Observed => scale,
    };

    let mut head = vec![make_segment(Payload::Response(&target.text), &target.text, false)];
    if cfg.use_question_text {
        head.push(make_segment(Payload::QuestionText(&question.text), &question.text, false));
    }
    if cfg.use_question_id {
        head.push(make_segment(Payload::QuestionId(&question.id), &question.id, false));
    }
    if cfg.use_scale {
        head.push(make_segment(Payload::Scale(scale), "", false));
    }

    let mut head_tokens: usize = head.iter().map(|s| tok.count_tokens(&s.text)).sum();
    if head_tokens > budget {
        // question text gives way first, then the target itself
        for kind in [SegmentKind::QuestionText, SegmentKind::Response] {
            if head_tokens <= budget {
                break;
            }
            if let Some(pos) = head.iter().position(|s| s.kind == kind) {
                let own = tok.count_tokens(&head[pos].text);
                let others = head_tokens - own;
                let cap = budget.saturating_sub(others);
                let raw = head[pos].payload.clone();
                let (cut, _) = match kind {
                    SegmentKind::QuestionText => {
                        fit_payload(tok, &raw, cap, |p| render_segment(&Payload::QuestionText(p)))
                    }
                    _ => fit_payload(tok, &raw, cap, |p| render_segment(&Payload::Response(p))),
                };
                head[pos] = match kind {
                    SegmentKind::QuestionText => make_segment(Payload::QuestionText(&cut), &cut, true),
                    _ => make_segment(Payload::Response(&cut), &cut, true),
                };
                head_tokens = head.iter().map(|s| tok.count_tokens(&s.text)).sum();
            }
        }
    }

    let mut segments = head;
    let mut example_ids = Vec::new();
    let mut used = head_tokens;
    for ex in examples {
        let (cut, truncated) = fit_payload(tok, &ex.text, cfg.example_token_cap, |p| {
            render_segment(&Payload::Example(p, ex.score))
        });
        let seg = make_segment(Payload::Example(&cut, ex.score), &cut, truncated);
        let n = tok.count_tokens(&seg.text);
        if used + n > budget {
            break;
        }
        used += n;
        segments.push(seg);
        example_ids.push(ex.id.clone());
    }

    // Tokenizers that are not additive over the join may still overshoot.
    let mut assembled = join(&segments);
    while tok.count_tokens(&assembled) > budget && segments.len() > 1 {
        if segments.last().map(|s| s.kind) == Some(SegmentKind::Example) {
            segments.pop();
            example_ids.pop();
        } else {
            let cut = tok.truncate_tokens(&assembled, budget);
            for s in &mut segments {
                s.truncated = true;
            }
            assembled = cut;
            break;
        }
        assembled = join(&segments);
    }
    if tok.count_tokens(&assembled) > budget {
        assembled = tok.truncate_tokens(&assembled, budget);
        segments[0].truncated = true;
    }

    PromptBundle {
        target_id: target.id.clone(),
        question_id: question.id.clone(),
        segments,
        assembled,
        example_ids,
    }
}
