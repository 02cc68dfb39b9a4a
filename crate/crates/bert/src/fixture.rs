//! Small randomly initialised checkpoints for tests and demos.

use std::path::Path;

use asag_core::{Error, Result};
use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use rand::Rng;
use serde_json::{json, Value};

use crate::{backend_err, BertConfig, BertEncoder};

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const PUNCT: &str = "+-*/=<>^%$().,;:!?'\"_";

#[derive(Clone, Debug)]
pub struct TinyConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate_size: usize,
    /// Whole words added to the vocabulary on top of single characters.
    pub words: Vec<String>,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            hidden_size: 32,
            layers: 2,
            heads: 4,
            intermediate_size: 64,
            words: ["score", "this", "answer", "question", "text", "scale", "example", "poor", "fair", "good", "excellent"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

fn vocab(words: &[String]) -> Vec<String> {
    let mut v: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let chars: Vec<char> = ('a'..='z').chain('0'..='9').chain(PUNCT.chars()).collect();
    for c in &chars {
        v.push(c.to_string());
    }
    for c in &chars {
        v.push(format!("##{c}"));
    }
    for w in words {
        let w = w.to_lowercase();
        if !v.contains(&w) {
            v.push(w);
        }
    }
    v
}

fn tokenizer_json(vocab: &[String]) -> Value {
    let ids: serde_json::Map<String, Value> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), json!(i))).collect();
    let added: Vec<Value> = SPECIALS
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({"id": i, "content": s, "single_word": false, "lstrip": false,
                   "rstrip": false, "normalized": false, "special": true})
        })
        .collect();
    json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": added,
        "normalizer": {"type": "BertNormalizer", "clean_text": true, "handle_chinese_chars": true,
                       "strip_accents": null, "lowercase": true},
        "pre_tokenizer": {"type": "BertPreTokenizer"},
        "post_processor": {"type": "BertProcessing", "sep": ["[SEP]", 3], "cls": ["[CLS]", 2]},
        "decoder": {"type": "WordPiece", "prefix": "##", "cleanup": true},
        "model": {"type": "WordPiece", "unk_token": "[UNK]", "continuing_subword_prefix": "##",
                  "max_input_chars_per_word": 100, "vocab": ids}
    })
}

fn normal<R: Rng>(rng: &mut R) -> f32 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Write `config.json`, `tokenizer.json` and `model.safetensors` to `dir`.
/// Weights are N(0, 0.02) from `seed`; layer norms start at identity and
/// biases at zero. No classification head is stored.
pub fn write_tiny_checkpoint(dir: &Path, cfg: &TinyConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = vocab(&cfg.words);
    let config = json!({
        "vocab_size": vocab.len(),
        "hidden_size": cfg.hidden_size,
        "num_hidden_layers": cfg.layers,
        "num_attention_heads": cfg.heads,
        "intermediate_size": cfg.intermediate_size,
        "hidden_act": "gelu",
        "hidden_dropout_prob": 0.1,
        "max_position_embeddings": 512,
        "type_vocab_size": 2,
        "initializer_range": 0.02,
        "layer_norm_eps": 1e-12,
        "pad_token_id": 0,
        "position_embedding_type": "absolute",
        "use_cache": true,
        "classifier_dropout": null,
        "model_type": "bert"
    });
    let text = serde_json::to_string_pretty(&config)?;
    let parsed: BertConfig = serde_json::from_str(&text)?;
    let p = dir.join("config.json");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("tokenizer.json");
    std::fs::write(&p, serde_json::to_string(&tokenizer_json(&vocab))?).map_err(|e| Error::io(&p, e))?;

    let varmap = VarMap::new();
    BertEncoder::load(&parsed, VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu)).map_err(backend_err)?;
    let mut rng = asag_core::seeding::rng_for(seed, "tiny-checkpoint");
    for (name, var) in crate::sorted_vars(&varmap) {
        let shape = var.shape().clone();
        let n = shape.elem_count();
        let values: Vec<f32> = if name.contains("LayerNorm") && name.ends_with("weight") {
            vec![1.0; n]
        } else if name.ends_with("bias") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| 0.02 * normal(&mut rng)).collect()
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu).map_err(backend_err)?;
        var.set(&t).map_err(backend_err)?;
    }
    varmap.save(dir.join("model.safetensors")).map_err(backend_err)
}
