//! Hashed bag-of-tokens scorer with a linear 5-way head.
//!
//! Features are hashed into 2^16 buckets and scaled by a learnable
//! per-bucket gain (the "encoder"), then fed to a linear softmax head:
//!
//! ```text
//! z_c = b_c + sum_j W[j, c] * g_j * x_j
//! ```
//!
//! Feature families are keyed by segment role: target tokens, question
//! tokens, question id, scale words, the class mix of the examples, and for
//! every example class the best token-overlap cosine between the target and
//! an example of that class. The last family is what lets a trained model
//! score responses to questions it never saw, by pointing at the most similar
//! scored example.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::backend::{
    check_finite_loss, BackendFactory, BackendKind, BackendManifest, ClassProbs, ScoringBackend,
};
use crate::corpus::normalize_text;
use crate::error::{Error, Result};
use crate::score::{Score, SCALE_SIZE};
use crate::seeding::{fnv1a, mix64};
use crate::templating::{score_word, PromptBundle, SegmentKind, Tokenizer, WhitespaceTokenizer};

pub const HASH_BUCKETS: usize = 1 << 16;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Default step size for the reference backend. The transformer default
/// (1e-5) barely moves a linear model.
pub const REFERENCE_LEARNING_RATE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
struct Row {
    w: [f64; SCALE_SIZE],
    gain: f64,
}

impl Default for Row {
    fn default() -> Self {
        Row {
            w: [0.0; SCALE_SIZE],
            gain: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m_w: [f64; SCALE_SIZE],
    v_w: [f64; SCALE_SIZE],
    m_g: f64,
    v_g: f64,
}

#[derive(Clone, Debug)]
pub struct ReferenceBackend {
    checkpoint_id: String,
    salt: u64,
    seed: u64,
    /// Untouched buckets hold the default row (zero weights, unit gain).
    rows: HashMap<u32, Row>,
    bias: [f64; SCALE_SIZE],
    moments: HashMap<u32, Moments>,
    m_b: [f64; SCALE_SIZE],
    v_b: [f64; SCALE_SIZE],
    step: u64,
    learning_rate: f64,
    frozen_encoder: bool,
}

/// Sparse feature vector: (bucket, value), sorted by bucket, no duplicates.
pub(crate) type Features = Vec<(u32, f64)>;

pub(crate) struct Gradients {
    pub rows: HashMap<u32, ([f64; SCALE_SIZE], f64)>,
    pub bias: [f64; SCALE_SIZE],
}

/// Whitespace tokens with edge punctuation trimmed, lowercased.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '"' | '\''))
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

fn cosine(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let shared = a.intersection(b).count() as f64;
    shared / ((a.len() * b.len()) as f64).sqrt()
}

impl ReferenceBackend {
    pub fn new(checkpoint_id: impl Into<String>, seed: u64) -> Self {
        let checkpoint_id = checkpoint_id.into();
        ReferenceBackend {
            salt: fnv1a(checkpoint_id.as_bytes()),
            checkpoint_id,
            seed,
            rows: HashMap::new(),
            bias: [0.0; SCALE_SIZE],
            moments: HashMap::new(),
            m_b: [0.0; SCALE_SIZE],
            v_b: [0.0; SCALE_SIZE],
            step: 0,
            learning_rate: REFERENCE_LEARNING_RATE,
            frozen_encoder: false,
        }
    }

    fn bucket(&self, key: &str) -> u32 {
        (mix64(fnv1a(key.as_bytes()) ^ self.salt) as usize % HASH_BUCKETS) as u32
    }

    pub(crate) fn featurize(&self, prompt: &PromptBundle) -> Features {
        let mut raw: Vec<(u32, f64)> = Vec::new();
        let mut push = |key: String, v: f64| raw.push((self.bucket(&key), v));

        let target = token_set(prompt.target_text());
        let norm = |n: usize| if n == 0 { 0.0 } else { 1.0 / (n as f64).sqrt() };
        let tw = norm(target.len());
        for t in &target {
            push(format!("t\u{1f}{t}"), tw);
        }
        let target_norm = normalize_text(prompt.target_text());

        let mut class_counts = [0usize; SCALE_SIZE];
        let mut best_sim = [0.0f64; SCALE_SIZE];
        let mut exact = [false; SCALE_SIZE];
        let mut n_examples = 0usize;
        for seg in &prompt.segments[1..] {
            match seg.kind {
                SegmentKind::QuestionText => {
                    let q = token_set(&seg.payload);
                    let w = norm(q.len());
                    for t in q {
                        push(format!("q\u{1f}{t}"), w);
                    }
                }
                SegmentKind::QuestionId => push(format!("i\u{1f}{}", seg.payload), 1.0),
                SegmentKind::Scale => {
                    for w in seg.text.trim_start_matches("scale:").split(',') {
                        push(format!("s\u{1f}{}", w.trim()), 1.0);
                    }
                }
                SegmentKind::Example => {
                    let Some(score) = seg.score else { continue };
                    let c = score.index();
                    n_examples += 1;
                    class_counts[c] += 1;
                    let sim = cosine(&target, &token_set(&seg.payload));
                    if sim > best_sim[c] {
                        best_sim[c] = sim;
                    }
                    if !target_norm.is_empty() && normalize_text(&seg.payload) == target_norm {
                        exact[c] = true;
                    }
                }
                SegmentKind::Response => {}
            }
        }
        if n_examples > 0 {
            push("n\u{1f}examples".to_string(), 1.0);
            let top = best_sim.iter().cloned().fold(0.0, f64::max);
            for c in 0..SCALE_SIZE {
                let word = score_word(Score::new(c as i64).expect("class index"));
                if class_counts[c] > 0 {
                    push(format!("f\u{1f}{word}"), class_counts[c] as f64 / n_examples as f64);
                }
                if best_sim[c] > 0.0 {
                    push(format!("m\u{1f}{word}"), best_sim[c]);
                    if best_sim[c] == top {
                        push(format!("nn\u{1f}{word}"), 1.0);
                    }
                }
                if exact[c] {
                    push(format!("x\u{1f}{word}"), 1.0);
                }
            }
        }

        raw.sort_by_key(|(b, _)| *b);
        let mut merged: Features = Vec::with_capacity(raw.len());
        for (b, v) in raw {
            match merged.last_mut() {
                Some((lb, lv)) if *lb == b => *lv += v,
                _ => merged.push((b, v)),
            }
        }
        merged
    }

    fn logits(&self, x: &Features) -> [f64; SCALE_SIZE] {
        let mut z = self.bias;
        for &(j, v) in x {
            if let Some(row) = self.rows.get(&j) {
                for c in 0..SCALE_SIZE {
                    z[c] += row.w[c] * row.gain * v;
                }
            }
        }
        z
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub(crate) fn loss_and_grad(&self, batch: &[(Features, Score)]) -> (f64, Gradients) {
        let mut grads = Gradients {
            rows: HashMap::new(),
            bias: [0.0; SCALE_SIZE],
        };
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let default_row = Row::default();
        for (x, y) in batch {
            let p = ClassProbs::softmax(&self.logits(x));
            let py = p.get(*y);
            loss -= py.max(f64::MIN_POSITIVE).ln();
            let mut delta = *p.as_array();
            delta[y.index()] -= 1.0;
            for c in 0..SCALE_SIZE {
                grads.bias[c] += delta[c] * scale;
            }
            for &(j, v) in x {
                let row = self.rows.get(&j).unwrap_or(&default_row);
                let entry = grads.rows.entry(j).or_insert(([0.0; SCALE_SIZE], 0.0));
                let mut dg = 0.0;
                for c in 0..SCALE_SIZE {
                    entry.0[c] += delta[c] * row.gain * v * scale;
                    dg += row.w[c] * delta[c];
                }
                entry.1 += dg * v * scale;
            }
        }
        (loss * scale, grads)
    }

    fn apply(&mut self, grads: Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate * (1.0 - BETA2.powi(t)).sqrt() / (1.0 - BETA1.powi(t));
        let adam = |m: &mut f64, v: &mut f64, g: f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            lr * *m / (v.sqrt() + ADAM_EPS)
        };
        for c in 0..SCALE_SIZE {
            self.bias[c] -= adam(&mut self.m_b[c], &mut self.v_b[c], grads.bias[c]);
        }
        let mut keys: Vec<u32> = grads.rows.keys().copied().collect();
        keys.sort_unstable();
        for j in keys {
            let (gw, gg) = grads.rows[&j];
            let mom = self.moments.entry(j).or_default();
            let row = self.rows.entry(j).or_default();
            for c in 0..SCALE_SIZE {
                row.w[c] -= adam(&mut mom.m_w[c], &mut mom.v_w[c], gw[c]);
            }
            if !self.frozen_encoder {
                row.gain -= adam(&mut mom.m_g, &mut mom.v_g, gg);
            }
        }
    }

    /// Dense parameter dump: W (bucket-major), bias, gains.
    fn dense_params(&self) -> Vec<f64> {
        let mut out = vec![0.0; HASH_BUCKETS * SCALE_SIZE + SCALE_SIZE + HASH_BUCKETS];
        let gain_off = HASH_BUCKETS * SCALE_SIZE + SCALE_SIZE;
        for g in &mut out[gain_off..] {
            *g = 1.0;
        }
        for (&j, row) in &self.rows {
            let j = j as usize;
            out[j * SCALE_SIZE..(j + 1) * SCALE_SIZE].copy_from_slice(&row.w);
            out[gain_off + j] = row.gain;
        }
        out[HASH_BUCKETS * SCALE_SIZE..gain_off].copy_from_slice(&self.bias);
        out
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = BackendManifest::read(dir)?;
        if manifest.kind != BackendKind::Reference {
            return Err(Error::Backend(format!("{} is not a reference snapshot", dir.display())));
        }
        let p = dir.join("params.bin");
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let expected = (HASH_BUCKETS * SCALE_SIZE + SCALE_SIZE + HASH_BUCKETS) * 8;
        if bytes.len() != expected {
            return Err(Error::Backend(format!(
                "params.bin holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut b = ReferenceBackend::new(manifest.checkpoint_id, manifest.seed);
        let gain_off = HASH_BUCKETS * SCALE_SIZE + SCALE_SIZE;
        for j in 0..HASH_BUCKETS {
            let row = Row {
                w: vals[j * SCALE_SIZE..(j + 1) * SCALE_SIZE].try_into().expect("row width"),
                gain: vals[gain_off + j],
            };
            if row != Row::default() {
                b.rows.insert(j as u32, row);
            }
        }
        b.bias.copy_from_slice(&vals[HASH_BUCKETS * SCALE_SIZE..gain_off]);
        Ok(b)
    }
}

impl Tokenizer for ReferenceBackend {
    fn count_tokens(&self, text: &str) -> usize {
        WhitespaceTokenizer.count_tokens(text)
    }

    fn truncate_tokens(&self, text: &str, max_tokens: usize) -> String {
        WhitespaceTokenizer.truncate_tokens(text, max_tokens)
    }

    fn reserved_tokens(&self) -> usize {
        WhitespaceTokenizer.reserved_tokens()
    }
}

impl ScoringBackend for ReferenceBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Reference
    }

    fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    fn classify(&self, prompt: &PromptBundle) -> Result<ClassProbs> {
        Ok(ClassProbs::softmax(&self.logits(&self.featurize(prompt))))
    }

    fn train_batch(&mut self, batch: &[(PromptBundle, Score)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let feats: Vec<(Features, Score)> = batch.iter().map(|(p, y)| (self.featurize(p), *y)).collect();
        let (loss, grads) = self.loss_and_grad(&feats);
        check_finite_loss(loss, batch)?;
        self.apply(grads);
        Ok(loss)
    }

    fn reset_optimizer(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
        self.moments.clear();
        self.m_b = [0.0; SCALE_SIZE];
        self.v_b = [0.0; SCALE_SIZE];
        self.step = 0;
    }

    fn set_encoder_frozen(&mut self, frozen: bool) {
        self.frozen_encoder = frozen;
    }

    fn save(&self, dir: &Path) -> Result<()> {
        BackendManifest {
            kind: BackendKind::Reference,
            checkpoint_id: self.checkpoint_id.clone(),
            head_shape: [HASH_BUCKETS, SCALE_SIZE],
            seed: self.seed,
        }
        .write(dir)?;
        let bytes: Vec<u8> = self.dense_params().iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join("params.bin");
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        for v in self.dense_params() {
            h = mix64(h ^ v.to_bits());
        }
        h
    }
}

/// Builds zero-initialised reference backends.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceFactory {
    pub learning_rate: f64,
}

impl Default for ReferenceFactory {
    fn default() -> Self {
        ReferenceFactory {
            learning_rate: REFERENCE_LEARNING_RATE,
        }
    }
}

impl BackendFactory for ReferenceFactory {
    type Backend = ReferenceBackend;

    fn create(&self, checkpoint_id: &str, seed: u64) -> Result<ReferenceBackend> {
        let mut b = ReferenceBackend::new(checkpoint_id, seed);
        b.reset_optimizer(self.learning_rate);
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Question, ScoredResponse};
    use crate::seeding;
    use crate::templating::{assemble_prompt, PromptConfig};
    use rand::Rng;

    fn prompt(id: &str, text: &str, examples: &[(&str, i64)]) -> PromptBundle {
        let q = Question::new("q1", "solve 2x = 4");
        let target = ScoredResponse::new(id, "q1", text, Score::MIN);
        let ex: Vec<ScoredResponse> = examples
            .iter()
            .enumerate()
            .map(|(i, (t, s))| ScoredResponse::new(format!("e{i}"), "q1", *t, Score::new(*s).unwrap()))
            .collect();
        let refs: Vec<&ScoredResponse> = ex.iter().collect();
        assemble_prompt(&target, &q, &refs, &[], &PromptConfig::default(), &WhitespaceTokenizer)
    }

    #[test]
    fn zero_head_is_uniform() {
        let b = ReferenceBackend::new("ref", 0);
        let p = b.classify(&prompt("t", "x = 2", &[("x = 2", 4)])).unwrap();
        assert_eq!(p, ClassProbs::uniform());
    }

    #[test]
    fn token_counts() {
        let b = ReferenceBackend::new("ref", 0);
        assert_eq!(b.count_tokens(""), 0);
        assert_eq!(b.count_tokens("a b c"), 3);
    }

    #[test]
    fn match_features_point_at_similar_example() {
        let b = ReferenceBackend::new("ref", 0);
        let f = b.featurize(&prompt("t", "x equals 2", &[("x equals 2", 4), ("no idea", 0)]));
        let m4 = b.bucket("m\u{1f}excellent");
        let x4 = b.bucket("x\u{1f}excellent");
        let m0 = b.bucket("m\u{1f}bad");
        assert!(f.iter().any(|&(j, v)| j == m4 && (v - 1.0).abs() < 1e-12));
        assert!(f.iter().any(|&(j, _)| j == x4));
        assert!(!f.iter().any(|&(j, _)| j == m0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = seeding::rng(11);
        let mut b = ReferenceBackend::new("ref", 0);
        let texts = ["x = 2", "two", "4 / 2 = 2", "i do not know", "x is 3"];
        let batch: Vec<(Features, Score)> = (0..6)
            .map(|i| {
                let t = texts[i % texts.len()];
                let p = prompt(&format!("t{i}"), t, &[(texts[(i + 1) % 5], 1), (texts[(i + 2) % 5], 3)]);
                (b.featurize(&p), Score::new(rng.random_range(0..5)).unwrap())
            })
            .collect();
        // random non-trivial parameters on every touched bucket
        for (x, _) in &batch {
            for &(j, _) in x {
                let row = b.rows.entry(j).or_default();
                for c in 0..SCALE_SIZE {
                    row.w[c] = rng.random_range(-1.0..1.0);
                }
                row.gain = rng.random_range(0.5..1.5);
            }
        }
        for c in 0..SCALE_SIZE {
            b.bias[c] = rng.random_range(-0.5..0.5);
        }
        let (_, g) = b.loss_and_grad(&batch);
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        let mut keys: Vec<u32> = g.rows.keys().copied().collect();
        keys.sort_unstable();
        for &j in keys.iter().take(12) {
            for c in 0..SCALE_SIZE {
                let orig = b.rows[&j].w[c];
                b.rows.get_mut(&j).unwrap().w[c] = orig + h;
                let lp = b.loss_and_grad(&batch).0;
                b.rows.get_mut(&j).unwrap().w[c] = orig - h;
                let lm = b.loss_and_grad(&batch).0;
                b.rows.get_mut(&j).unwrap().w[c] = orig;
                let num = (lp - lm) / (2.0 * h);
                assert!(rel(g.rows[&j].0[c], num) < 1e-4, "w[{j},{c}]: {} vs {num}", g.rows[&j].0[c]);
            }
            let orig = b.rows[&j].gain;
            b.rows.get_mut(&j).unwrap().gain = orig + h;
            let lp = b.loss_and_grad(&batch).0;
            b.rows.get_mut(&j).unwrap().gain = orig - h;
            let lm = b.loss_and_grad(&batch).0;
            b.rows.get_mut(&j).unwrap().gain = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!(rel(g.rows[&j].1, num) < 1e-4, "gain[{j}]");
        }
        for c in 0..SCALE_SIZE {
            let orig = b.bias[c];
            b.bias[c] = orig + h;
            let lp = b.loss_and_grad(&batch).0;
            b.bias[c] = orig - h;
            let lm = b.loss_and_grad(&batch).0;
            b.bias[c] = orig;
            assert!(rel(g.bias[c], (lp - lm) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let mut b = ReferenceBackend::new("ref", 0);
        let batch: Vec<(PromptBundle, Score)> = (0..5)
            .map(|c| {
                let p = prompt(&format!("t{c}"), &format!("answer token{c}"), &[]);
                (p, Score::new(c).unwrap())
            })
            .collect();
        let first = b.train_batch(&batch).unwrap();
        let mut last = first;
        for _ in 0..100 {
            last = b.train_batch(&batch).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
        for (p, y) in &batch {
            assert_eq!(b.classify(p).unwrap().argmax(), *y);
        }
    }

    #[test]
    fn confident_correct_item_has_zero_loss() {
        let mut b = ReferenceBackend::new("ref", 0);
        b.bias = [0.0, 0.0, 0.0, 0.0, 1e4];
        let batch = vec![(prompt("t", "x", &[]), Score::MAX)];
        assert_eq!(b.train_batch(&batch).unwrap(), 0.0);
    }

    #[test]
    fn frozen_encoder_keeps_gains() {
        let mut b = ReferenceBackend::new("ref", 0);
        let batch: Vec<(PromptBundle, Score)> =
            vec![(prompt("a", "foo bar", &[]), Score::MAX), (prompt("b", "baz", &[]), Score::MIN)];
        // give the head some weight so gain gradients are non-zero
        b.train_batch(&batch).unwrap();
        b.set_encoder_frozen(true);
        let gains: Vec<(u32, f64)> = b.rows.iter().map(|(j, r)| (*j, r.gain)).collect();
        b.train_batch(&batch).unwrap();
        for (j, g) in gains {
            assert_eq!(b.rows[&j].gain, g);
        }
        b.set_encoder_frozen(false);
        let before: f64 = b.rows.values().map(|r| r.gain).sum();
        b.train_batch(&batch).unwrap();
        let after: f64 = b.rows.values().map(|r| r.gain).sum();
        assert_ne!(before, after);
    }

    #[test]
    fn save_load_is_bit_identical() {
        let mut b = ReferenceBackend::new("tbs17/MathBERT", 3);
        let batch = vec![(prompt("a", "foo 12", &[("foo 12", 2)]), Score::new(2).unwrap())];
        for _ in 0..5 {
            b.train_batch(&batch).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let loaded = ReferenceBackend::load(dir.path()).unwrap();
        assert_eq!(loaded.checkpoint_id(), "tbs17/MathBERT");
        assert_eq!(loaded.fingerprint(), b.fingerprint());
        for p in [prompt("z", "foo 12", &[("bar", 1)]), prompt("y", "other", &[])] {
            let a = b.classify(&p).unwrap();
            let c = loaded.classify(&p).unwrap();
            for k in 0..SCALE_SIZE {
                assert_eq!(a.as_array()[k].to_bits(), c.as_array()[k].to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_swap_keeps_interface() {
        let f = ReferenceFactory::default();
        for id in ["tbs17/MathBERT", "bert-base-uncased"] {
            let mut b = f.create(id, 0).unwrap();
            let batch = vec![(prompt("a", "x", &[]), Score::MAX)];
            assert!(b.train_batch(&batch).unwrap() > 0.0);
            assert!(ClassProbs::new(*b.classify(&batch[0].0).unwrap().as_array()).is_ok());
        }
    }
}
