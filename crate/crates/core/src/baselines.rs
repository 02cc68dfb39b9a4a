//! Comparison systems over a pluggable sentence embedding: nearest neighbour
//! under Canberra distance, and a multinomial logistic classifier over frozen
//! embeddings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::ClassProbs;
use crate::corpus::normalize_text;
use crate::corpus::ScoredResponse;
use crate::error::{Error, Result};
use crate::optim::{self, LbfgsConfig};
use crate::score::{Score, SCALE_SIZE};
use crate::seeding::fnv1a;

/// Deterministic text encoder with a fixed output width.
pub trait EmbeddingFn: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Counts of hashed character trigrams of the normalised text, L2-normalised.
#[derive(Clone, Debug)]
pub struct HashedTrigramEmbedding {
    dim: usize,
    name: String,
}

impl HashedTrigramEmbedding {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        HashedTrigramEmbedding {
            dim,
            name: format!("trigram-{dim}"),
        }
    }
}

impl Default for HashedTrigramEmbedding {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingFn for HashedTrigramEmbedding {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let padded: Vec<char> = format!("  {}  ", normalize_text(text)).chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            v[(fnv1a(buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Memoising wrapper keyed by (encoder name, text hash), persisted as JSON.
pub struct EmbeddingCache<E> {
    inner: E,
    entries: Mutex<HashMap<u64, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    /// encoder name -> text hash (hex) -> vector
    encoders: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl<E: EmbeddingFn> EmbeddingCache<E> {
    pub fn new(inner: E) -> Self {
        EmbeddingCache {
            inner,
            entries: Mutex::new(HashMap::new()),
        }
    }

    /// Load entries for this encoder from `path` if it exists.
    pub fn with_file(inner: E, path: &Path) -> Result<Self> {
        let cache = Self::new(inner);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: CacheFile = serde_json::from_str(&text)?;
            if let Some(entries) = file.encoders.get(cache.inner.name()) {
                let mut map = cache.entries.lock().expect("cache lock");
                for (k, v) in entries {
                    let key = u64::from_str_radix(k, 16)
                        .map_err(|e| Error::Validation(format!("bad cache key {k}: {e}")))?;
                    if v.len() != cache.inner.dim() {
                        return Err(Error::Validation(format!("cache vector for {k} has wrong width")));
                    }
                    map.insert(key, v.clone());
                }
            }
        }
        Ok(cache)
    }

    /// Merge this encoder's entries into `path`, keeping other encoders'.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        } else {
            CacheFile {
                encoders: BTreeMap::new(),
            }
        };
        let map = self.entries.lock().expect("cache lock");
        let slot = file.encoders.entry(self.inner.name().to_string()).or_default();
        for (k, v) in map.iter() {
            slot.insert(format!("{k:016x}"), v.clone());
        }
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: EmbeddingFn> EmbeddingFn for EmbeddingCache<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let key = fnv1a(text.as_bytes());
        if let Some(v) = self.entries.lock().expect("cache lock").get(&key) {
            return v.clone();
        }
        let v = self.inner.embed(text);
        self.entries.lock().expect("cache lock").insert(key, v.clone());
        v
    }
}

/// `sum_i |u_i - v_i| / (|u_i| + |v_i|)`, with 0/0 terms contributing 0.
pub fn canberra(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Validation(format!("vector widths differ: {} vs {}", u.len(), v.len())));
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum())
}

/// Score of the closest pool entry; ties go to the earliest entry.
pub fn nn_score_embedded(target: &[f64], pool: &[(Vec<f64>, Score)]) -> Result<Score> {
    let mut best: Option<(f64, Score)> = None;
    for (emb, score) in pool {
        let d = canberra(target, emb)?;
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, *score));
        }
    }
    best.map(|(_, s)| s)
        .ok_or(Error::Empty("nearest-neighbour scoring needs at least one scored response"))
}

pub fn nn_score(target_text: &str, pool: &[&ScoredResponse], emb: &dyn EmbeddingFn) -> Result<Score> {
    let t = emb.embed(target_text);
    let pool: Vec<(Vec<f64>, Score)> = pool.iter().map(|r| (emb.embed(&r.text), r.score)).collect();
    nn_score_embedded(&t, &pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenExample {
    pub response: Vec<f64>,
    pub question: Vec<f64>,
    pub label: Score,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrozenConfig {
    /// Objective is `sum NLL + l2 / 2 * ||W||^2` (bias unpenalised).
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FrozenConfig {
    fn default() -> Self {
        FrozenConfig {
            l2: 1.0,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression on `[response ; question]` embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenClassifier {
    input_dim: usize,
    /// Row-major `SCALE_SIZE x (input_dim + 1)`; last column is the bias.
    weights: Vec<f64>,
}

impl FrozenClassifier {
    /// Untrained classifier; predicts the uniform distribution.
    pub fn zeros(input_dim: usize) -> Self {
        FrozenClassifier {
            input_dim,
            weights: vec![0.0; SCALE_SIZE * (input_dim + 1)],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn train(data: &[FrozenExample], cfg: &FrozenConfig) -> Result<Self> {
        let dim = data.first().ok_or(Error::Empty("frozen classifier training set"))?;
        let start = Self::zeros(dim.response.len() + dim.question.len());
        start.retrain(data, cfg)
    }

    /// Fit from the current weights on `data` with the usual penalty.
    pub fn retrain(&self, data: &[FrozenExample], cfg: &FrozenConfig) -> Result<Self> {
        let first = data.first().ok_or(Error::Empty("frozen classifier training set"))?.label;
        if data.iter().all(|e| e.label == first) {
            return Err(Error::Validation("training labels contain a single class".into()));
        }
        self.optimise(data, cfg, None)
    }

    /// Few-shot update: fit `data` with the penalty centred on the current
    /// weights (bias included), so a handful of examples moves the model
    /// only as far as they justify. Single-class data is allowed.
    pub fn adapt(&self, data: &[FrozenExample], cfg: &FrozenConfig) -> Result<Self> {
        if data.is_empty() {
            return Ok(self.clone());
        }
        self.optimise(data, cfg, Some(&self.weights))
    }

    fn optimise(&self, data: &[FrozenExample], cfg: &FrozenConfig, centre: Option<&[f64]>) -> Result<Self> {
        let rows: Vec<(Vec<f64>, usize)> = data
            .iter()
            .map(|e| {
                let x = concat(&e.response, &e.question);
                if x.len() != self.input_dim {
                    return Err(Error::Validation(format!(
                        "input width {} != {}",
                        x.len(),
                        self.input_dim
                    )));
                }
                Ok((x, e.label.index()))
            })
            .collect::<Result<_>>()?;
        let width = self.input_dim + 1;
        let objective = |w: &[f64]| {
            let mut f = 0.0;
            let mut g = vec![0.0; w.len()];
            for (x, y) in &rows {
                let logits: [f64; SCALE_SIZE] = std::array::from_fn(|k| linear(&w[k * width..(k + 1) * width], x));
                let p = ClassProbs::softmax(&logits);
                f -= p.as_array()[*y].max(f64::MIN_POSITIVE).ln();
                for k in 0..SCALE_SIZE {
                    let d = p.as_array()[k] - (k == *y) as u8 as f64;
                    let row = &mut g[k * width..(k + 1) * width];
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += d * xi;
                    }
                    row[width - 1] += d;
                }
            }
            for i in 0..w.len() {
                let is_bias = i % width == width - 1;
                let d = match centre {
                    Some(c) => w[i] - c[i],
                    None if is_bias => continue,
                    None => w[i],
                };
                f += 0.5 * cfg.l2 * d * d;
                g[i] += cfg.l2 * d;
            }
            (f, g)
        };
        let res = optim::minimize(
            objective,
            self.weights.clone(),
            &LbfgsConfig {
                max_iter: cfg.max_iter,
                tol: cfg.tol,
                grad_scale: rows.len() as f64,
                ..LbfgsConfig::default()
            },
        );
        if !res.converged {
            log::debug!(
                "frozen classifier stopped after {} iterations (|g| = {:.3e})",
                res.iterations,
                res.grad_norm
            );
        }
        Ok(FrozenClassifier {
            input_dim: self.input_dim,
            weights: res.x,
        })
    }

    pub fn predict(&self, response: &[f64], question: &[f64]) -> Result<ClassProbs> {
        let x = concat(response, question);
        if x.len() != self.input_dim {
            return Err(Error::Validation(format!("input width {} != {}", x.len(), self.input_dim)));
        }
        let width = self.input_dim + 1;
        let logits: [f64; SCALE_SIZE] =
            std::array::from_fn(|k| linear(&self.weights[k * width..(k + 1) * width], &x));
        Ok(ClassProbs::softmax(&logits))
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len() + b.len());
    x.extend_from_slice(a);
    x.extend_from_slice(b);
    x
}

fn linear(row: &[f64], x: &[f64]) -> f64 {
    let (w, bias) = row.split_at(x.len());
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn s(v: i64) -> Score {
        Score::new(v).unwrap()
    }

    #[test]
    fn canberra_cases() {
        assert_eq!(canberra(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(canberra(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(canberra(&[0.0, 3.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(canberra(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nn_score_rules() {
        let emb = HashedTrigramEmbedding::default();
        let a = ScoredResponse::new("a", "q", "the slope is two", s(4));
        let b = ScoredResponse::new("b", "q", "i do not know", s(0));
        assert_eq!(nn_score("the slope is two", &[&b, &a], &emb).unwrap(), s(4));
        assert_eq!(nn_score("anything", &[&b], &emb).unwrap(), s(0));
        assert!(matches!(nn_score("x", &[], &emb), Err(Error::Empty(_))));
        let pool = vec![(vec![1.0, 0.0], s(1)), (vec![1.0, 0.0], s(3))];
        assert_eq!(nn_score_embedded(&[1.0, 0.0], &pool).unwrap(), s(1));
    }

    #[test]
    fn trigram_embedding_is_deterministic_unit_length() {
        let e = HashedTrigramEmbedding::default();
        let v = e.embed("Hello World");
        assert_eq!(v.len(), 256);
        assert_eq!(v, e.embed("hello   world"));
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let c = EmbeddingCache::new(HashedTrigramEmbedding::default());
        let v = c.embed("two plus two");
        c.embed("four");
        c.save(&path).unwrap();
        let c2 = EmbeddingCache::with_file(HashedTrigramEmbedding::default(), &path).unwrap();
        assert_eq!(c2.len(), 2);
        assert_eq!(c2.embed("two plus two"), v);
        let other = EmbeddingCache::with_file(HashedTrigramEmbedding::new(64), &path).unwrap();
        assert!(other.is_empty());
    }

    fn clusters(seed: u64, n: usize) -> Vec<FrozenExample> {
        let mut rng = seeding::rng(seed);
        (0..n)
            .map(|i| {
                let c = i % SCALE_SIZE;
                let mut r = vec![0.0; 6];
                r[c] = 3.0;
                for x in &mut r {
                    *x += rng.random_range(-0.5..0.5);
                }
                FrozenExample {
                    response: r,
                    question: vec![rng.random_range(-1.0..1.0), 1.0],
                    label: s(c as i64),
                }
            })
            .collect()
    }

    #[test]
    fn separable_clusters_are_learned() {
        let train = clusters(1, 200);
        let test = clusters(2, 100);
        let clf = FrozenClassifier::train(&train, &FrozenConfig::default()).unwrap();
        let acc = test
            .iter()
            .filter(|e| clf.predict(&e.response, &e.question).unwrap().argmax() == e.label)
            .count() as f64
            / test.len() as f64;
        assert!(acc > 0.9, "{acc}");
    }

    #[test]
    fn adapt_moves_toward_support_only() {
        let base = FrozenClassifier::train(&clusters(1, 100), &FrozenConfig::default()).unwrap();
        assert_eq!(base.adapt(&[], &FrozenConfig::default()).unwrap(), base);
        let mut support = clusters(4, 1);
        support[0].label = s(3);
        let adapted = base.adapt(&support, &FrozenConfig::default()).unwrap();
        let before = base.predict(&support[0].response, &support[0].question).unwrap().get(s(3));
        let after = adapted.predict(&support[0].response, &support[0].question).unwrap().get(s(3));
        assert!(after > before);
    }

    #[test]
    fn untrained_is_uniform_and_single_class_errors() {
        let clf = FrozenClassifier::zeros(3);
        assert_eq!(clf.predict(&[1.0, 2.0], &[3.0]).unwrap(), ClassProbs::uniform());
        let mut data = clusters(3, 10);
        data.iter_mut().for_each(|e| e.label = s(2));
        assert!(FrozenClassifier::train(&data, &FrozenConfig::default()).is_err());
    }
}
