use asag_bert::fixture::{write_tiny_checkpoint, TinyConfig};
use asag_bert::{BertBackend, BertFactory};
use asag_core::backend::{BackendFactory, BackendKind, ScoringBackend};
use asag_core::corpus::{Question, ScoredResponse};
use asag_core::templating::{assemble_prompt, PromptBundle, PromptConfig, Tokenizer};
use asag_core::Score;

fn checkpoint() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_checkpoint(dir.path(), &TinyConfig::default(), 7).unwrap();
    dir
}

fn prompt(b: &BertBackend, text: &str, score: i64) -> (PromptBundle, Score) {
    let q = Question::new("q1", "Solve 2x = 4");
    let r = ScoredResponse::new(format!("r-{text}"), "q1", text, Score::new(score).unwrap());
    let scale: Vec<Score> = Score::all().collect();
    let p = assemble_prompt(&r, &q, &[], &scale, &PromptConfig::default(), b);
    (p, r.score)
}

#[test]
fn loads_and_classifies_on_simplex() {
    let dir = checkpoint();
    let b = BertFactory::default().create(dir.path().to_str().unwrap(), 1).unwrap();
    assert_eq!(b.kind(), BackendKind::Transformer);
    let (p, _) = prompt(&b, "x = 2 because 4/2 = 2", 4);
    let probs = b.classify(&p).unwrap();
    let sum: f64 = probs.as_array().iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
    // zero head gives the uniform distribution
    assert!(probs.as_array().iter().all(|p| (p - 0.2).abs() < 1e-6));
    assert_eq!(b.classify(&p).unwrap(), probs);
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(BertBackend::load(&dir.path().join("nope"), "nope", 0).is_err());
}

#[test]
fn token_counting_and_truncation() {
    let dir = checkpoint();
    let b = BertBackend::load(dir.path(), "tiny", 0).unwrap();
    // "score" is a word piece; "ab" splits into a + ##b
    assert_eq!(b.count_tokens("score ab"), 3);
    assert_eq!(b.reserved_tokens(), 2);
    let t = b.truncate_tokens("score this answer now", 3);
    assert_eq!(t, "score this answer");
    assert!(b.count_tokens(&t) <= 3);
    assert_eq!(b.truncate_tokens("short", 10), "short");
}

#[test]
fn training_moves_parameters_and_respects_freezing() {
    let dir = checkpoint();
    let mut b = BertBackend::load(dir.path(), "tiny", 0).unwrap();
    b.reset_optimizer(1e-2);
    let batch = vec![prompt(&b, "x = 2", 4), prompt(&b, "no idea", 0)];
    let enc0 = b.encoder_parameters();
    let f0 = b.fingerprint();
    let loss = b.train_batch(&batch).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-4, "initial loss {loss}");
    assert_ne!(b.fingerprint(), f0);
    // the head starts at zero, so the encoder only sees gradient from the second step
    assert_eq!(b.encoder_parameters(), enc0);
    b.train_batch(&batch).unwrap();
    assert_ne!(b.encoder_parameters(), enc0);

    let mut frozen = b.clone();
    frozen.set_encoder_frozen(true);
    let enc1 = frozen.encoder_parameters();
    let head1 = frozen.head_parameters();
    frozen.train_batch(&batch).unwrap();
    assert_eq!(frozen.encoder_parameters(), enc1);
    assert_ne!(frozen.head_parameters(), head1);
    // the clone is independent of the original
    assert_eq!(b.encoder_parameters(), enc1);
}

#[test]
fn repeated_steps_fit_a_tiny_batch() {
    let dir = checkpoint();
    let mut b = BertBackend::load(dir.path(), "tiny", 0).unwrap();
    b.reset_optimizer(1e-2);
    let batch = vec![prompt(&b, "x = 2", 4), prompt(&b, "no idea", 0)];
    let first = b.train_batch(&batch).unwrap();
    let mut last = first;
    for _ in 0..30 {
        last = b.train_batch(&batch).unwrap();
    }
    assert!(last < first * 0.5, "{first} -> {last}");
    let p = b.classify(&batch[0].0).unwrap();
    assert_eq!(p.argmax(), batch[0].1);
}

#[test]
fn snapshot_round_trip_is_bit_identical() {
    let dir = checkpoint();
    let mut b = BertBackend::load(dir.path(), "tiny", 3).unwrap();
    b.reset_optimizer(1e-2);
    let batch = vec![prompt(&b, "x = 2", 3)];
    b.train_batch(&batch).unwrap();
    let snap = tempfile::tempdir().unwrap();
    b.save(snap.path()).unwrap();
    let back = BertBackend::load_snapshot(snap.path()).unwrap();
    assert_eq!(back.fingerprint(), b.fingerprint());
    assert_eq!(back.checkpoint_id(), "tiny");
    assert_eq!(back.classify(&batch[0].0).unwrap(), b.classify(&batch[0].0).unwrap());
}

#[test]
fn batch_and_single_classification_agree() {
    let dir = checkpoint();
    let mut b = BertBackend::load(dir.path(), "tiny", 0).unwrap();
    b.reset_optimizer(1e-2);
    let batch = vec![prompt(&b, "x = 2", 4), prompt(&b, "a much longer answer with many words", 1)];
    b.train_batch(&batch).unwrap();
    let refs: Vec<&PromptBundle> = batch.iter().map(|(p, _)| p).collect();
    let joint = b.classify_batch(&refs).unwrap();
    for (p, j) in refs.iter().zip(&joint) {
        let s = b.classify(p).unwrap();
        for (x, y) in s.as_array().iter().zip(j.as_array()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
