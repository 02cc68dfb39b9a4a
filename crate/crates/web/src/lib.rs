//! Browser bindings. Every entry point takes and returns JSON strings so the
//! page needs no generated type definitions.

use asag_core::backend::{ClassProbs, ReferenceBackend};
use asag_core::corpus::{Question, ScoredResponse};
use asag_core::harness::{classify_tokens, is_math_response, math_token_pct, TokenClass};
use asag_core::metrics::{self, MetricConfig, MetricReport};
use asag_core::templating::{assemble_prompt, observed_scale, PromptBundle, PromptConfig, Tokenizer};
use asag_core::{backend, Score, SCALE_SIZE};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Deserialize)]
pub struct ExampleIn {
    pub text: String,
    pub score: u8,
}

#[derive(Debug, Deserialize)]
pub struct PromptRequest {
    pub question: String,
    #[serde(default)]
    pub question_id: String,
    pub response: String,
    #[serde(default)]
    pub examples: Vec<ExampleIn>,
    #[serde(default)]
    pub config: PromptConfig,
}

#[derive(Debug, Serialize)]
pub struct PromptOut {
    pub bundle: PromptBundle,
    pub tokens: usize,
    pub budget: usize,
}

pub fn prompt(req: &PromptRequest) -> Result<PromptOut, String> {
    req.config.validate().map_err(|e| e.to_string())?;
    let qid = if req.question_id.is_empty() { "q" } else { &req.question_id };
    let q = Question::new(qid, req.question.clone());
    let score = |s: u8| Score::new(s as i64).map_err(|e| e.to_string());
    let target = ScoredResponse::new("target", qid, req.response.clone(), Score::MIN);
    let examples: Vec<ScoredResponse> = req
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| Ok(ScoredResponse::new(format!("example-{i}"), qid, e.text.clone(), score(e.score)?)))
        .collect::<Result<_, String>>()?;
    let refs: Vec<&ScoredResponse> = examples.iter().collect();
    let tok = ReferenceBackend::new("math", 0);
    let bundle = assemble_prompt(&target, &q, &refs, &observed_scale(&refs), &req.config, &tok);
    Ok(PromptOut {
        tokens: tok.count_tokens(&bundle.assembled),
        budget: req.config.total_token_cap,
        bundle,
    })
}

#[derive(Debug, Deserialize)]
pub struct MetricsRequest {
    pub labels: Vec<u8>,
    pub probs: Vec<[f64; SCALE_SIZE]>,
    #[serde(default)]
    pub config: MetricConfig,
}

pub fn score(req: &MetricsRequest) -> Result<MetricReport, String> {
    let labels: Vec<Score> = req
        .labels
        .iter()
        .map(|&l| Score::new(l as i64))
        .collect::<asag_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let probs: Vec<ClassProbs> = req
        .probs
        .iter()
        .map(|p| ClassProbs::normalized(*p))
        .collect::<asag_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    metrics::report(&probs, &labels, req.config).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct TaggedToken {
    pub token: String,
    pub math: bool,
}

#[derive(Debug, Serialize)]
pub struct TokenReport {
    pub tokens: Vec<TaggedToken>,
    pub math_token_pct: f64,
    pub is_math: bool,
}

pub fn tag(text: &str) -> TokenReport {
    let tokens: Vec<String> = backend::reference_tokens(text);
    let classes = classify_tokens(&tokens);
    TokenReport {
        tokens: tokens
            .into_iter()
            .zip(classes)
            .map(|(token, c)| TaggedToken {
                token,
                math: c == TokenClass::Math,
            })
            .collect(),
        math_token_pct: math_token_pct(text),
        is_math: is_math_response(text),
    }
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

fn parse<'a, T: Deserialize<'a>>(s: &'a str) -> Result<T, String> {
    serde_json::from_str(s).map_err(|e| format!("bad request: {e}"))
}

/// `PromptRequest` JSON in, `PromptOut` JSON out.
#[wasm_bindgen(js_name = assemblePrompt)]
pub fn assemble_prompt_js(request: &str) -> Result<String, JsValue> {
    json(parse(request).and_then(|r| prompt(&r)))
}

/// `MetricsRequest` JSON in, `MetricReport` JSON out.
#[wasm_bindgen(js_name = scorePredictions)]
pub fn score_predictions_js(request: &str) -> Result<String, JsValue> {
    json(parse(request).and_then(|r| score(&r)))
}

#[wasm_bindgen(js_name = tagTokens)]
pub fn tag_tokens_js(text: &str) -> Result<String, JsValue> {
    json(Ok(tag(text)))
}
