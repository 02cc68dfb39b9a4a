//! Transformer scoring backend: a BERT-style encoder read from a local
//! checkpoint directory, with a linear 5-way head on the first-token hidden
//! state.
//!
//! A checkpoint directory holds `config.json`, `tokenizer.json` and
//! `model.safetensors`. Snapshots written by [`ScoringBackend::save`] use the
//! same layout plus `manifest.json`, so they load back as checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use asag_core::backend::{BackendFactory, BackendKind, BackendManifest, ClassProbs, ScoringBackend};
use asag_core::seeding::fnv1a;
use asag_core::templating::{PromptBundle, Tokenizer};
use asag_core::{Error, Result, Score, SCALE_SIZE};
use candle_core::{DType, Device, IndexOp, Tensor, Var, D};
use candle_nn::{AdamW, Init, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};

pub mod fixture;
mod model;

pub use model::{BertConfig, BertEncoder};

const HEAD_WEIGHT: &str = "classifier.weight";
const HEAD_BIAS: &str = "classifier.bias";
/// `[CLS]` and `[SEP]`.
const SPECIAL_TOKENS: usize = 2;

pub(crate) fn backend_err(e: impl std::fmt::Display) -> Error {
    Error::Backend(e.to_string())
}

pub struct BertBackend {
    checkpoint_id: String,
    seed: u64,
    config: BertConfig,
    config_text: String,
    tokenizer: Arc<tokenizers::Tokenizer>,
    varmap: VarMap,
    model: BertEncoder,
    head: candle_nn::Linear,
    encoder_frozen: bool,
    learning_rate: f64,
    optimizer: AdamW,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn build(varmap: &VarMap, config: &BertConfig) -> Result<(BertEncoder, candle_nn::Linear)> {
    let vb = VarBuilder::from_varmap(varmap, DType::F32, &Device::Cpu);
    let model = BertEncoder::load(config, vb.clone()).map_err(backend_err)?;
    let w = vb
        .get_with_hints((SCALE_SIZE, config.hidden_size), HEAD_WEIGHT, Init::Const(0.0))
        .map_err(backend_err)?;
    let b = vb.get_with_hints(SCALE_SIZE, HEAD_BIAS, Init::Const(0.0)).map_err(backend_err)?;
    Ok((model, candle_nn::Linear::new(w, Some(b))))
}

pub(crate) fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

impl BertBackend {
    /// Load a checkpoint directory. A missing classification head starts at zero.
    pub fn load(dir: &Path, checkpoint_id: impl Into<String>, seed: u64) -> Result<Self> {
        let config_text = read(&dir.join("config.json"))?;
        let config: BertConfig = serde_json::from_str(&config_text)?;
        let tokenizer = tokenizers::Tokenizer::from_file(dir.join("tokenizer.json")).map_err(backend_err)?;
        let weights_path = dir.join("model.safetensors");
        if !weights_path.exists() {
            return Err(Error::Backend(format!("checkpoint weights not found at {}", weights_path.display())));
        }
        let tensors = candle_core::safetensors::load(&weights_path, &Device::Cpu).map_err(backend_err)?;

        let varmap = VarMap::new();
        let (model, head) = build(&varmap, &config)?;
        let prefix = config.model_type.clone().unwrap_or_else(|| "bert".into());
        for (name, var) in sorted_vars(&varmap) {
            let found = tensors.get(&name).or_else(|| tensors.get(&format!("{prefix}.{name}")));
            match found {
                Some(t) => var
                    .set(&t.to_dtype(DType::F32).map_err(backend_err)?)
                    .map_err(|e| Error::Backend(format!("{name}: {e}")))?,
                None if name == HEAD_WEIGHT || name == HEAD_BIAS => {}
                None => return Err(Error::Backend(format!("checkpoint is missing tensor '{name}'"))),
            }
        }
        let learning_rate = 2e-5;
        let optimizer = Self::optimizer(&varmap, false, learning_rate)?;
        Ok(BertBackend {
            checkpoint_id: checkpoint_id.into(),
            seed,
            config,
            config_text,
            tokenizer: Arc::new(tokenizer),
            varmap,
            model,
            head,
            encoder_frozen: false,
            learning_rate,
            optimizer,
        })
    }

    fn optimizer(varmap: &VarMap, head_only: bool, lr: f64) -> Result<AdamW> {
        let vars: Vec<Var> = sorted_vars(varmap)
            .into_iter()
            .filter(|(n, _)| !head_only || n == HEAD_WEIGHT || n == HEAD_BIAS)
            .map(|(_, v)| v)
            .collect();
        AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )
        .map_err(backend_err)
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Token ids with special tokens, clipped to the position table.
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let enc = self.tokenizer.encode(text, true).map_err(backend_err)?;
        let mut ids = enc.get_ids().to_vec();
        let max = self.config.max_position_embeddings;
        if ids.len() > max {
            let last = *ids.last().expect("non-empty");
            ids.truncate(max - 1);
            ids.push(last);
        }
        Ok(ids)
    }

    fn logits(&self, prompts: &[&PromptBundle]) -> Result<Tensor> {
        let encoded: Vec<Vec<u32>> = prompts.iter().map(|p| self.encode(&p.assembled)).collect::<Result<_>>()?;
        let len = encoded.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let pad = self.config.pad_token_id as u32;
        let mut ids = Vec::with_capacity(len * encoded.len());
        let mut mask = Vec::with_capacity(len * encoded.len());
        for e in &encoded {
            ids.extend(e.iter().copied().chain(std::iter::repeat(pad)).take(len));
            mask.extend((0..len).map(|i| (i < e.len()) as u32));
        }
        let dev = Device::Cpu;
        let shape = (encoded.len(), len);
        let run = || -> candle_core::Result<Tensor> {
            let ids = Tensor::from_vec(ids, shape, &dev)?;
            let mask = Tensor::from_vec(mask, shape, &dev)?;
            let hidden = self.model.forward(&ids, &mask)?;
            let mut cls = hidden.i((.., 0, ..))?.contiguous()?;
            if self.encoder_frozen {
                cls = cls.detach();
            }
            self.head.forward(&cls)
        };
        run().map_err(backend_err)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.varmap.save(dir.join("model.safetensors")).map_err(backend_err)?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, &self.config_text).map_err(|e| Error::io(&cfg, e))?;
        self.tokenizer.save(dir.join("tokenizer.json"), false).map_err(backend_err)?;
        BackendManifest {
            kind: BackendKind::Transformer,
            checkpoint_id: self.checkpoint_id.clone(),
            head_shape: [self.config.hidden_size, SCALE_SIZE],
            seed: self.seed,
        }
        .write(dir)
    }

    /// Restore a snapshot directory written by `save`.
    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let m = BackendManifest::read(dir)?;
        if m.kind != BackendKind::Transformer {
            return Err(Error::Backend(format!("snapshot kind {:?} is not a transformer", m.kind)));
        }
        Self::load(dir, m.checkpoint_id, m.seed)
    }
}

impl Clone for BertBackend {
    /// Deep copy of all parameters. Optimiser moments start fresh.
    fn clone(&self) -> Self {
        let varmap = VarMap::new();
        {
            let mut data = varmap.data().lock().expect("varmap lock");
            for (name, var) in sorted_vars(&self.varmap) {
                let copy = var.as_tensor().copy().expect("cpu tensor copy");
                data.insert(name, Var::from_tensor(&copy).expect("cpu var"));
            }
        }
        let (model, head) = build(&varmap, &self.config).expect("rebuild from copied parameters");
        let optimizer =
            Self::optimizer(&varmap, self.encoder_frozen, self.learning_rate).expect("optimiser over copied parameters");
        BertBackend {
            checkpoint_id: self.checkpoint_id.clone(),
            seed: self.seed,
            config: self.config.clone(),
            config_text: self.config_text.clone(),
            tokenizer: Arc::clone(&self.tokenizer),
            varmap,
            model,
            head,
            encoder_frozen: self.encoder_frozen,
            learning_rate: self.learning_rate,
            optimizer,
        }
    }
}

impl Tokenizer for BertBackend {
    fn count_tokens(&self, text: &str) -> usize {
        self.tokenizer.encode(text, false).map(|e| e.len()).unwrap_or(0)
    }

    fn truncate_tokens(&self, text: &str, max_tokens: usize) -> String {
        let Ok(enc) = self.tokenizer.encode(text, false) else {
            return String::new();
        };
        if enc.len() <= max_tokens {
            return text.to_string();
        }
        if max_tokens == 0 {
            return String::new();
        }
        let end = enc.get_offsets()[max_tokens - 1].1;
        text.get(..end).unwrap_or(text).trim_end().to_string()
    }

    fn reserved_tokens(&self) -> usize {
        SPECIAL_TOKENS
    }
}

impl ScoringBackend for BertBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Transformer
    }

    fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    fn classify(&self, prompt: &PromptBundle) -> Result<ClassProbs> {
        let logits = self.logits(&[prompt])?;
        let v: Vec<f32> = logits.squeeze(0).and_then(|t| t.to_vec1()).map_err(backend_err)?;
        let l: [f64; SCALE_SIZE] = std::array::from_fn(|k| v[k] as f64);
        Ok(ClassProbs::softmax(&l))
    }

    fn train_batch(&mut self, batch: &[(PromptBundle, Score)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let prompts: Vec<&PromptBundle> = batch.iter().map(|(p, _)| p).collect();
        let logits = self.logits(&prompts)?;
        let targets: Vec<u32> = batch.iter().map(|(_, s)| s.index() as u32).collect();
        let targets = Tensor::new(targets.as_slice(), &Device::Cpu).map_err(backend_err)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &targets).map_err(backend_err)?;
        let value = loss.to_scalar::<f32>().map_err(backend_err)? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                ids: batch.iter().map(|(p, _)| p.target_id.clone()).collect(),
            });
        }
        self.optimizer.backward_step(&loss).map_err(backend_err)?;
        Ok(value)
    }

    fn reset_optimizer(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
        self.optimizer =
            Self::optimizer(&self.varmap, self.encoder_frozen, learning_rate).expect("optimiser over own parameters");
    }

    fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
        self.reset_optimizer(self.learning_rate);
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.write_snapshot(dir)
    }

    fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, var) in sorted_vars(&self.varmap) {
            bytes.extend_from_slice(name.as_bytes());
            if let Ok(v) = var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f32>()) {
                for x in v {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        fnv1a(&bytes)
    }
}

impl BertBackend {
    /// Parameters of the encoder only, keyed by name.
    pub fn encoder_parameters(&self) -> HashMap<String, Vec<f32>> {
        sorted_vars(&self.varmap)
            .into_iter()
            .filter(|(n, _)| n != HEAD_WEIGHT && n != HEAD_BIAS)
            .map(|(n, v)| {
                let flat = v.as_tensor().flatten_all().and_then(|t| t.to_vec1()).unwrap_or_default();
                (n, flat)
            })
            .collect()
    }

    pub fn head_parameters(&self) -> Vec<f32> {
        let w = self.head.weight().flatten_all().and_then(|t| t.to_vec1::<f32>()).unwrap_or_default();
        let b = self
            .head
            .bias()
            .and_then(|b| b.to_vec1::<f32>().ok())
            .unwrap_or_default();
        w.into_iter().chain(b).collect()
    }

    /// Softmax over a batch, for callers that score many prompts at once.
    pub fn classify_batch(&self, prompts: &[&PromptBundle]) -> Result<Vec<ClassProbs>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(prompts)?;
        let p = candle_nn::ops::softmax(&logits, D::Minus1)
            .and_then(|t| t.to_vec2::<f32>())
            .map_err(backend_err)?;
        p.into_iter()
            .map(|row| ClassProbs::normalized(std::array::from_fn(|k| row[k] as f64)))
            .collect()
    }
}

/// Resolves checkpoint ids as directories, optionally under a root.
#[derive(Clone, Debug, Default)]
pub struct BertFactory {
    pub root: Option<PathBuf>,
}

impl BertFactory {
    pub fn new(root: Option<PathBuf>) -> Self {
        BertFactory { root }
    }

    pub fn resolve(&self, checkpoint_id: &str) -> PathBuf {
        match &self.root {
            Some(r) => r.join(checkpoint_id),
            None => PathBuf::from(checkpoint_id),
        }
    }
}

impl BackendFactory for BertFactory {
    type Backend = BertBackend;

    fn create(&self, checkpoint_id: &str, seed: u64) -> Result<BertBackend> {
        BertBackend::load(&self.resolve(checkpoint_id), checkpoint_id, seed)
    }
}
