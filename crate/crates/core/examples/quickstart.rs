//! Cross-validate the reference scorer on a small synthetic corpus.
//!
//! cargo run -p asag-core --example quickstart --release

use asag_core::backend::ReferenceFactory;
use asag_core::harness::synth::{generate, SynthConfig};
use asag_core::harness::{run_new_responses, ExperimentConfig};

fn main() -> asag_core::Result<()> {
    let corpus = generate(&SynthConfig {
        questions: 8,
        responses_per_question: 40,
        ..SynthConfig::default()
    })?;
    let cfg = ExperimentConfig {
        response_folds: 5,
        ..ExperimentConfig::default()
    };
    let report = run_new_responses(&corpus, &cfg, &ReferenceFactory::default(), None)?;
    println!("majority  kappa {}", report.majority.kappa);
    println!("model     kappa {}  auc {}  rmse {}", report.raw.kappa, report.raw.auc, report.raw.rmse);
    if let Some(r) = &report.rasch {
        println!("rasch     kappa {}  auc {}  rmse {}", r.kappa, r.auc, r.rmse);
    }
    Ok(())
}
