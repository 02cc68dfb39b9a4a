//! Automatic short-answer grading for math questions with scored examples
//! supplied as in-context input.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: dataset schema, JSONL ingestion, cleaning and fold plans.
//! - [`templating`]: prompt segments, score words, example sampling and the
//!   token budget.
//! - [`backend`]: the scoring-model abstraction plus the hashed reference
//!   backend used for desk-scale runs.
//! - [`trainer`]: unified multi-question training, per-question fine-tuning
//!   and resampled test-time prediction.
//! - [`metrics`]: one-vs-rest AUC, RMSE and Cohen's kappa.
//! - [`rasch`]: the cumulative-link item-response model with covariates.
//! - [`baselines`]: nearest-neighbour (Canberra) and frozen-embedding
//!   classifiers.
//! - [`harness`]: experiment protocols, ablations and error analysis.

pub mod backend;
pub mod baselines;
pub mod corpus;
mod error;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod rasch;
mod score;
pub mod seeding;
pub mod templating;
pub mod trainer;

pub use error::{Error, Result};
pub use score::{Score, SCALE_SIZE};
