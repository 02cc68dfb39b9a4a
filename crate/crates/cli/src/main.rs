use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod files;
mod plot;
mod table;

#[derive(Parser)]
#[command(name = "asag", version, about = "Score short math answers and run the evaluation protocols")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// JSONL dataset, overriding the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Covariates {
    /// Model probabilities and word count.
    Full,
    /// Student and question parameters only.
    None,
    /// Word count only.
    WordCount,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSONL.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        questions: Option<usize>,
        #[arg(long)]
        responses: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Relabel, filter and drop small or excluded questions.
    Clean {
        #[command(flatten)]
        common: Common,
        /// Newline-separated question ids to drop.
        #[arg(long)]
        exclusions: Option<PathBuf>,
        #[arg(long)]
        min_responses: Option<usize>,
    },
    /// Train one model and snapshot every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Held-out JSONL scored after every epoch.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Cross-validation over responses of seen questions.
    EvalResponses {
        #[command(flatten)]
        common: Common,
        /// Reuse a saved fold plan.
        #[arg(long)]
        fold_plan: Option<PathBuf>,
    },
    /// Cross-validation over questions with the few-shot sweep.
    EvalQuestions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold_plan: Option<PathBuf>,
        /// Skip the SVG plot.
        #[arg(long)]
        no_plot: bool,
    },
    /// Component ablation on shared folds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold_plan: Option<PathBuf>,
    },
    /// Fit the ordinal Rasch model to a CSV of observations.
    RaschFit {
        /// Columns: student, question, label, p0..p4, word_count.
        #[arg(long)]
        input: PathBuf,
        /// RaschFit JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        covariates: Covariates,
        /// Also write predicted class probabilities for every input row.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Error analysis of a response-level report.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// `report.json` written by eval-responses.
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Synth {
            common,
            questions,
            responses,
            seed,
        } => commands::synth(&common, questions, responses, seed),
        Command::Clean {
            common,
            exclusions,
            min_responses,
        } => commands::clean(&common, exclusions, min_responses),
        Command::Train { common, validation } => commands::train(&common, validation),
        Command::EvalResponses { common, fold_plan } => commands::eval_responses(&common, fold_plan),
        Command::EvalQuestions {
            common,
            fold_plan,
            no_plot,
        } => commands::eval_questions(&common, fold_plan, !no_plot),
        Command::Ablate { common, fold_plan } => commands::ablate(&common, fold_plan),
        Command::RaschFit {
            input,
            out,
            config,
            covariates,
            predictions,
        } => commands::rasch_fit(&input, &out, config, covariates, predictions),
        Command::Analyze { common, report } => commands::analyze(&common, &report),
    }
}
