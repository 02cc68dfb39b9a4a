//! Dataset schema and JSONL ingestion.

mod clean;
mod folds;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{Score, SCALE_SIZE};

pub use clean::{
    clean, has_image_markup, normalize_text, relabel_inconsistent, remove_questions, remove_unusable_responses,
    strip_markup, CleanConfig, CleaningReport, ImagePolicy, RuleSet,
};
pub use folds::{make_folds, FoldMode, FoldPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub scale_size: usize,
    /// External tags such as topic or question type.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Question {
            id: id.into(),
            text: text.into(),
            scale_size: SCALE_SIZE,
            labels: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub id: String,
    pub question_id: String,
    pub text: String,
    pub score: Score,
    #[serde(default)]
    pub grader_id: Option<String>,
    #[serde(default)]
    pub student_id: Option<String>,
    #[serde(default)]
    pub num_graders: Option<u32>,
}

impl ScoredResponse {
    pub fn new(
        id: impl Into<String>,
        question_id: impl Into<String>,
        text: impl Into<String>,
        score: Score,
    ) -> Self {
        ScoredResponse {
            id: id.into(),
            question_id: question_id.into(),
            text: text.into(),
            score,
            grader_id: None,
            student_id: None,
            num_graders: None,
        }
    }
}

/// Immutable question/response collection with a question → responses index.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    questions: Vec<Question>,
    responses: Vec<ScoredResponse>,
    question_pos: HashMap<String, usize>,
    response_pos: HashMap<String, usize>,
    index: HashMap<String, Vec<usize>>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.questions == other.questions && self.responses == other.responses
    }
}

impl Corpus {
    pub fn new(questions: Vec<Question>, responses: Vec<ScoredResponse>) -> Result<Self> {
        let mut question_pos = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if q.scale_size != SCALE_SIZE {
                return Err(Error::Validation(format!(
                    "question {} has scale size {}, expected {SCALE_SIZE}",
                    q.id, q.scale_size
                )));
            }
            if question_pos.insert(q.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate question id {}", q.id)));
            }
        }
        let mut response_pos = HashMap::with_capacity(responses.len());
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in responses.iter().enumerate() {
            if !question_pos.contains_key(&r.question_id) {
                return Err(Error::Validation(format!(
                    "response {} refers to unknown question {}",
                    r.id, r.question_id
                )));
            }
            if response_pos.insert(r.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate response id {}", r.id)));
            }
            index.entry(r.question_id.clone()).or_default().push(i);
        }
        Ok(Corpus {
            questions,
            responses,
            question_pos,
            response_pos,
            index,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn responses(&self) -> &[ScoredResponse] {
        &self.responses
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_pos.get(id).map(|&i| &self.questions[i])
    }

    pub fn response(&self, id: &str) -> Option<&ScoredResponse> {
        self.response_pos.get(id).map(|&i| &self.responses[i])
    }

    /// Responses to one question, in corpus order.
    pub fn responses_for<'a>(&'a self, question_id: &str) -> impl Iterator<Item = &'a ScoredResponse> + 'a {
        self.index
            .get(question_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.responses[i])
    }

    pub fn response_count(&self, question_id: &str) -> usize {
        self.index.get(question_id).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty() && self.questions.is_empty()
    }

    /// Sub-corpus holding the given responses and the questions they refer to.
    pub fn subset_responses(&self, ids: &BTreeSet<String>) -> Corpus {
        let responses: Vec<_> = self
            .responses
            .iter()
            .filter(|r| ids.contains(&r.id))
            .cloned()
            .collect();
        let qids: BTreeSet<&str> = responses.iter().map(|r| r.question_id.as_str()).collect();
        let questions = self
            .questions
            .iter()
            .filter(|q| qids.contains(q.id.as_str()))
            .cloned()
            .collect();
        Corpus::new(questions, responses).expect("subset of a valid corpus is valid")
    }

    /// Sub-corpus holding the given questions with all their responses.
    pub fn subset_questions(&self, ids: &BTreeSet<String>) -> Corpus {
        let questions = self
            .questions
            .iter()
            .filter(|q| ids.contains(&q.id))
            .cloned()
            .collect();
        let responses = self
            .responses
            .iter()
            .filter(|r| ids.contains(&r.question_id))
            .cloned()
            .collect();
        Corpus::new(questions, responses).expect("subset of a valid corpus is valid")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for r in &self.responses {
            let q = &self.questions[self.question_pos[&r.question_id]];
            let record = Record {
                q_id: IdValue::Str(q.id.clone()),
                q_text: q.text.clone(),
                response: r.text.clone(),
                score: r.score.value() as i64,
                response_id: Some(IdValue::Str(r.id.clone())),
                grader_id: r.grader_id.clone().map(IdValue::Str),
                student_id: r.student_id.clone().map(IdValue::Str),
                num_graders: r.num_graders,
                labels: q.labels.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Ids appear as strings or bare numbers in exported datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum IdValue {
    Str(String),
    Int(i64),
}

impl IdValue {
    fn into_string(self) -> String {
        match self {
            IdValue::Str(s) => s,
            IdValue::Int(i) => i.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    q_id: IdValue,
    q_text: String,
    response: String,
    score: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response_id: Option<IdValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grader_id: Option<IdValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    student_id: Option<IdValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_graders: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<String, String>,
}

/// Parse a JSONL dataset: one response per line with `q_id`, `q_text`,
/// `response`, `score` and optional `response_id`, `grader_id`,
/// `student_id`, `num_graders`, `labels`. Question text is taken from the
/// first record of each question; labels are merged.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut questions: Vec<Question> = Vec::new();
    let mut qpos: HashMap<String, usize> = HashMap::new();
    let mut responses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let score = Score::new(rec.score).map_err(|_| {
            Error::Validation(format!("line {line_no}: score {} is outside 0-4", rec.score))
        })?;
        let qid = rec.q_id.into_string();
        match qpos.get(&qid) {
            Some(&p) => {
                for (k, v) in rec.labels {
                    questions[p].labels.entry(k).or_insert(v);
                }
            }
            None => {
                qpos.insert(qid.clone(), questions.len());
                let mut q = Question::new(qid.clone(), rec.q_text);
                q.labels = rec.labels;
                questions.push(q);
            }
        }
        responses.push(ScoredResponse {
            id: rec
                .response_id
                .map(IdValue::into_string)
                .unwrap_or_else(|| format!("r{line_no}")),
            question_id: qid,
            text: rec.response,
            score,
            grader_id: rec.grader_id.map(IdValue::into_string),
            student_id: rec.student_id.map(IdValue::into_string),
            num_graders: rec.num_graders,
        });
    }
    Corpus::new(questions, responses)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file))
}

/// Newline-delimited question ids; blank lines and `#` comments ignored.
pub fn load_exclusion_list(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_exclusion_list(&text))
}

pub fn parse_exclusion_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}
