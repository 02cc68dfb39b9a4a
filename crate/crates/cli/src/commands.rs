use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asag_bert::BertFactory;
use asag_core::backend::{BackendKind, ClassProbs, ReferenceFactory};
use asag_core::baselines::{EmbeddingCache, EmbeddingFn};
use asag_core::corpus::{self, make_folds, Corpus, FoldMode, FoldPlan, ScoredResponse};
use asag_core::harness::synth::{self, SynthConfig};
use asag_core::harness::{
    compare_groups, default_embedding, partition_math_text, per_group_metrics, run_ablation, run_new_questions,
    run_new_responses, run_training, split_by_correctness, ExperimentConfig, FeatureComparison, GroupRow,
    MathTextPartition, Method, NewResponsesReport,
};
use asag_core::metrics::{MeanStd, MetricReport, MetricSummary};
use asag_core::rasch::{self, RaschConfig, RaschObservation};
use serde::Serialize;

use crate::files::{read_json, read_rasch_csv, write_csv, write_json, write_rasch_csv};
use crate::plot::{metric_vs_n, Series};
use crate::table::{fixed3, mean_std, opt, Table};
use crate::{Common, Covariates};

/// Runs `$body` with `$f` bound to the factory the config asks for.
macro_rules! with_factory {
    ($cfg:expr, $base:expr, |$f:ident| $body:expr) => {
        match $cfg.backend.kind {
            BackendKind::Reference => {
                let $f = ReferenceFactory::default();
                $body
            }
            BackendKind::Transformer => {
                let $f = BertFactory::new(Some($base));
                $body
            }
        }
    };
}

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, PathBuf)> {
    match path {
        Some(p) => {
            let cfg = ExperimentConfig::load(p).with_context(|| format!("config {}", p.display()))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((cfg, base))
        }
        None => Ok((ExperimentConfig::default(), PathBuf::from("."))),
    }
}

fn load_corpus(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<Corpus> {
    if let Some(p) = flag.or(cfg.corpus.as_deref()) {
        return corpus::load_corpus(p).with_context(|| format!("corpus {}", p.display()));
    }
    if let Some(s) = &cfg.synth {
        log::info!("generating synthetic corpus (seed {})", s.seed);
        return Ok(synth::generate(s)?);
    }
    bail!("no dataset: pass --corpus, or set `corpus` or a [synth] table in the config")
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn snapshot_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn load_plan(path: Option<&Path>) -> Result<Option<FoldPlan>> {
    path.map(|p| FoldPlan::load(p).with_context(|| format!("fold plan {}", p.display())))
        .transpose()
}

fn save_plans(dir: &Path, plans: &[(u64, FoldPlan)]) -> Result<()> {
    let d = dir.join("fold_plans");
    std::fs::create_dir_all(&d)?;
    for (seed, p) in plans {
        p.save(&d.join(format!("seed_{seed}.json")))?;
    }
    Ok(())
}

fn plans_for(corpus: &Corpus, cfg: &ExperimentConfig, mode: FoldMode, given: Option<&FoldPlan>) -> Result<Vec<(u64, FoldPlan)>> {
    let k = match mode {
        FoldMode::ByResponse => cfg.response_folds,
        FoldMode::ByQuestion => cfg.question_folds,
    };
    cfg.seeds
        .iter()
        .map(|&s| {
            let p = match given {
                Some(p) => p.clone(),
                None => make_folds(corpus, mode, k, s)?,
            };
            Ok((s, p))
        })
        .collect()
}

fn print(title: &str, t: &Table) {
    println!("{title}\n{}", t.render());
}

pub fn synth(common: &Common, questions: Option<usize>, responses: Option<usize>, seed: Option<u64>) -> Result<()> {
    let (cfg, _) = load_config(common.config.as_deref())?;
    let mut s = cfg.synth.clone().unwrap_or_else(SynthConfig::default);
    if let Some(q) = questions {
        s.questions = q;
    }
    if let Some(r) = responses {
        s.responses_per_question = r;
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let c = synth::generate(&s)?;
    let dir = out_dir(common, &cfg)?;
    let path = dir.join("corpus.jsonl");
    c.write_jsonl(&path)?;
    println!(
        "wrote {} questions, {} responses to {}",
        c.questions().len(),
        c.responses().len(),
        path.display()
    );
    Ok(())
}

pub fn clean(common: &Common, exclusions: Option<PathBuf>, min_responses: Option<usize>) -> Result<()> {
    let (mut cfg, _) = load_config(common.config.as_deref())?;
    if exclusions.is_some() {
        cfg.clean.exclusion_list = exclusions;
    }
    if let Some(m) = min_responses {
        cfg.clean.min_responses = m;
    }
    let input = load_corpus(&cfg, common.corpus.as_deref())?;
    let (cleaned, report) = corpus::clean(&input, &cfg.clean.to_clean_config()?);
    let dir = out_dir(common, &cfg)?;
    cleaned.write_jsonl(&dir.join("cleaned.jsonl"))?;
    write_json(&dir.join("cleaning_report.json"), &report)?;
    let mut t = Table::new(["step", "count"]);
    t.row(["input responses".to_string(), input.responses().len().to_string()]);
    t.row(["relabeled".to_string(), report.relabeled.to_string()]);
    t.row(["unusable responses removed".to_string(), report.unusable_removed.to_string()]);
    t.row(["excluded questions".to_string(), report.excluded_questions.to_string()]);
    t.row(["  their responses".to_string(), report.excluded_question_responses.to_string()]);
    t.row(["small questions".to_string(), report.small_questions.to_string()]);
    t.row(["  their responses".to_string(), report.small_question_responses.to_string()]);
    t.row(["final questions".to_string(), report.final_questions.to_string()]);
    t.row(["final responses".to_string(), report.final_responses.to_string()]);
    print("Cleaning", &t);
    Ok(())
}

pub fn train(common: &Common, validation: Option<PathBuf>) -> Result<()> {
    let (cfg, base) = load_config(common.config.as_deref())?;
    let data = load_corpus(&cfg, common.corpus.as_deref())?;
    let val = validation.as_deref().map(corpus::load_corpus).transpose()?;
    let dir = out_dir(common, &cfg)?;
    let summary = with_factory!(cfg, base, |f| run_training(&data, val.as_ref(), &cfg, &f, &dir))?;
    let mut t = Table::new(["epoch", "loss", "val AUC", "val RMSE", "val Kappa"]);
    for e in &summary.epochs {
        let v = e.validation.as_ref();
        t.row([
            e.epoch.to_string(),
            format!("{:.4}", e.mean_loss),
            opt(v.and_then(|r| r.auc)),
            opt(v.map(|r| r.rmse)),
            opt(v.map(|r| r.kappa)),
        ]);
    }
    print(&format!("Training run in {}", dir.display()), &t);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    model: String,
    auc_mean: f64,
    auc_std: f64,
    rmse_mean: f64,
    rmse_std: f64,
    kappa_mean: f64,
    kappa_std: f64,
    runs: usize,
}

impl SummaryRow {
    fn new(model: &str, s: &MetricSummary) -> Self {
        SummaryRow {
            model: model.into(),
            auc_mean: s.auc.mean,
            auc_std: s.auc.std,
            rmse_mean: s.rmse.mean,
            rmse_std: s.rmse.std,
            kappa_mean: s.kappa.mean,
            kappa_std: s.kappa.std,
            runs: s.runs,
        }
    }
}

fn summary_table(rows: &[SummaryRow]) -> Table {
    let mut t = Table::new(["Model", "AUC", "RMSE", "Kappa"]);
    let ms = |mean, std, count| mean_std(&MeanStd { mean, std, count });
    for r in rows {
        t.row([
            r.model.clone(),
            ms(r.auc_mean, r.auc_std, r.runs),
            ms(r.rmse_mean, r.rmse_std, r.runs),
            ms(r.kappa_mean, r.kappa_std, r.runs),
        ]);
    }
    t
}

#[derive(Serialize)]
struct PredictionRow {
    response_id: String,
    question_id: String,
    seed: u64,
    fold: usize,
    label: u8,
    p0: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    p4: f64,
}

pub fn eval_responses(common: &Common, fold_plan: Option<PathBuf>) -> Result<()> {
    let (cfg, base) = load_config(common.config.as_deref())?;
    let data = load_corpus(&cfg, common.corpus.as_deref())?;
    let given = load_plan(fold_plan.as_deref())?;
    let dir = out_dir(common, &cfg)?;
    snapshot_config(&dir, &cfg)?;
    save_plans(&dir, &plans_for(&data, &cfg, FoldMode::ByResponse, given.as_ref())?)?;

    let report = with_factory!(cfg, base, |f| run_new_responses(&data, &cfg, &f, given.as_ref()))?;
    write_json(&dir.join("report.json"), &report)?;

    let mut rows = vec![SummaryRow::new("majority", &report.majority), SummaryRow::new("model", &report.raw)];
    for (name, s) in [
        ("Rasch (no covariates)", &report.rasch_baseline),
        ("Rasch (word count)", &report.rasch_word_count),
        ("Rasch (model + word count)", &report.rasch),
    ] {
        if let Some(s) = s {
            rows.push(SummaryRow::new(name, s));
        }
    }
    write_csv(&dir.join("summary.csv"), &rows)?;
    print("Unseen responses", &summary_table(&rows));

    let preds: Vec<PredictionRow> = report
        .predictions
        .iter()
        .map(|p| {
            let a = p.probs.as_array();
            PredictionRow {
                response_id: p.response_id.clone(),
                question_id: p.question_id.clone(),
                seed: p.seed,
                fold: p.fold,
                label: p.label.value(),
                p0: a[0],
                p1: a[1],
                p2: a[2],
                p3: a[3],
                p4: a[4],
            }
        })
        .collect();
    write_csv(&dir.join("predictions.csv"), &preds)?;

    // Rasch input for the first seed, one row per response.
    let first = cfg.seeds[0];
    let obs: Vec<RaschObservation> = report
        .predictions
        .iter()
        .filter(|p| p.seed == first)
        .filter_map(|p| data.response(&p.response_id).map(|r| RaschObservation::from_response(r, p.probs)))
        .collect();
    write_rasch_csv(&dir.join("rasch_input.csv"), &obs)?;
    Ok(())
}

#[derive(Serialize)]
struct FewShotCsvRow {
    method: String,
    n: usize,
    auc_mean: f64,
    auc_std: f64,
    rmse_mean: f64,
    rmse_std: f64,
    kappa_mean: f64,
    kappa_std: f64,
    runs: usize,
}

fn embedding(cfg: &ExperimentConfig) -> Result<EmbeddingCache<impl EmbeddingFn>> {
    let e = default_embedding(cfg);
    Ok(match &cfg.embedding.cache {
        Some(p) => EmbeddingCache::with_file(e, p)?,
        None => EmbeddingCache::new(e),
    })
}

pub fn eval_questions(common: &Common, fold_plan: Option<PathBuf>, plot: bool) -> Result<()> {
    let (cfg, base) = load_config(common.config.as_deref())?;
    let data = load_corpus(&cfg, common.corpus.as_deref())?;
    let given = load_plan(fold_plan.as_deref())?;
    let dir = out_dir(common, &cfg)?;
    snapshot_config(&dir, &cfg)?;
    save_plans(&dir, &plans_for(&data, &cfg, FoldMode::ByQuestion, given.as_ref())?)?;

    let emb = embedding(&cfg)?;
    let result = with_factory!(cfg, base, |f| run_new_questions(&data, &cfg, &f, &emb, given.as_ref()))?;
    if let Some(p) = &cfg.embedding.cache {
        emb.save(p)?;
    }
    write_json(&dir.join("fewshot.json"), &result)?;
    let rows: Vec<FewShotCsvRow> = result
        .rows
        .iter()
        .map(|r| FewShotCsvRow {
            method: r.method.label().into(),
            n: r.n,
            auc_mean: r.summary.auc.mean,
            auc_std: r.summary.auc.std,
            rmse_mean: r.summary.rmse.mean,
            rmse_std: r.summary.rmse.std,
            kappa_mean: r.summary.kappa.mean,
            kappa_std: r.summary.kappa.std,
            runs: r.summary.runs,
        })
        .collect();
    write_csv(&dir.join("fewshot.csv"), &rows)?;

    let mut header = vec!["Method".to_string()];
    header.extend(cfg.n_values.iter().map(|n| format!("n={n}")));
    let mut t = Table::new(header);
    for m in Method::ALL {
        let mut cells = vec![m.label().to_string()];
        for &n in &cfg.n_values {
            cells.push(result.row(m, n).map(|r| mean_std(&r.summary.kappa)).unwrap_or_else(|| "-".into()));
        }
        t.row(cells);
    }
    print("Unseen questions: Kappa by number of examples", &t);
    for (n, k) in &result.skipped {
        if *k > 0 {
            println!("n={n}: {k} question/seed pairs skipped for lack of responses");
        }
    }

    if plot {
        let series: Vec<Series> = Method::ALL
            .iter()
            .map(|&m| Series {
                name: m.label().into(),
                points: result
                    .rows
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| (r.n, r.summary.kappa.mean, r.summary.kappa.std))
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        metric_vs_n(&dir.join("kappa_vs_n.svg"), "Kappa vs number of examples", "Kappa", &series)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationCsvRow {
    name: String,
    auc_mean: f64,
    auc_std: f64,
    rmse_mean: f64,
    rmse_std: f64,
    kappa_mean: f64,
    kappa_std: f64,
    runs: usize,
    truncated_segments: usize,
    config_diff: String,
}

pub fn ablate(common: &Common, fold_plan: Option<PathBuf>) -> Result<()> {
    let (cfg, base) = load_config(common.config.as_deref())?;
    let data = load_corpus(&cfg, common.corpus.as_deref())?;
    let given = load_plan(fold_plan.as_deref())?;
    let dir = out_dir(common, &cfg)?;
    snapshot_config(&dir, &cfg)?;
    let report = with_factory!(cfg, base, |f| run_ablation(&data, &cfg, &f, given.as_ref()))?;
    write_json(&dir.join("ablation.json"), &report)?;
    let d = dir.join("fold_plans");
    std::fs::create_dir_all(&d)?;
    for (i, p) in report.fold_plans.iter().enumerate() {
        p.save(&d.join(format!("plan_{i}.json")))?;
    }
    let rows: Vec<AblationCsvRow> = report
        .rows
        .iter()
        .map(|r| AblationCsvRow {
            name: r.name.clone(),
            auc_mean: r.summary.auc.mean,
            auc_std: r.summary.auc.std,
            rmse_mean: r.summary.rmse.mean,
            rmse_std: r.summary.rmse.std,
            kappa_mean: r.summary.kappa.mean,
            kappa_std: r.summary.kappa.std,
            runs: r.summary.runs,
            truncated_segments: r.stats.truncated_segments,
            config_diff: r.config_diff.join(";"),
        })
        .collect();
    write_csv(&dir.join("ablation.csv"), &rows)?;
    let mut t = Table::new(["Model", "AUC", "RMSE", "Kappa"]);
    for r in &report.rows {
        t.row([
            r.name.clone(),
            mean_std(&r.summary.auc),
            mean_std(&r.summary.rmse),
            mean_std(&r.summary.kappa),
        ]);
    }
    print("Ablation", &t);
    Ok(())
}

#[derive(Serialize)]
struct RaschPredictionRow {
    student: String,
    question: String,
    label: Option<u8>,
    p0: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    p4: f64,
    expected: f64,
}

pub fn rasch_fit(
    input: &Path,
    out: &Path,
    config: Option<PathBuf>,
    covariates: Covariates,
    predictions: Option<PathBuf>,
) -> Result<()> {
    let (cfg, _) = load_config(config.as_deref())?;
    let obs = read_rasch_csv(input)?;
    let rc = match covariates {
        Covariates::Full => cfg.rasch,
        Covariates::None => RaschConfig {
            use_probs: false,
            use_word_count: false,
            ..cfg.rasch
        },
        Covariates::WordCount => RaschConfig {
            use_probs: false,
            use_word_count: true,
            ..cfg.rasch
        },
    };
    let labelled: Vec<RaschObservation> = obs.iter().filter(|o| o.label.is_some()).cloned().collect();
    if labelled.is_empty() {
        bail!("no labelled rows to fit");
    }
    let fit = rasch::fit(&labelled, &rc)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, fit.to_json()?).with_context(|| format!("writing {}", out.display()))?;

    let mut t = Table::new(["quantity", "value"]);
    t.row(["observations".to_string(), labelled.len().to_string()]);
    t.row(["students".to_string(), fit.ability.len().to_string()]);
    t.row(["questions".to_string(), fit.difficulty.len().to_string()]);
    t.row(["iterations".to_string(), fit.iterations.to_string()]);
    t.row(["log-likelihood".to_string(), fixed3(fit.log_likelihood)]);
    t.row([
        "thresholds".to_string(),
        fit.thresholds.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "),
    ]);
    t.row(["word-count weight".to_string(), fixed3(fit.word_count_weight)]);
    print("Rasch fit", &t);

    if let Some(p) = predictions {
        let rows: Vec<RaschPredictionRow> = obs
            .iter()
            .map(|o| {
                let probs: ClassProbs = rasch::predict_rasch(&fit, o);
                let a = probs.as_array();
                RaschPredictionRow {
                    student: o.student_id.clone(),
                    question: o.question_id.clone(),
                    label: o.label.map(|l| l.value()),
                    p0: a[0],
                    p1: a[1],
                    p2: a[2],
                    p3: a[3],
                    p4: a[4],
                    expected: probs.expected_score(),
                }
            })
            .collect();
        write_csv(&p, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Analysis {
    features: Vec<FeatureComparison>,
    partition: MathTextPartition,
    groups: Vec<GroupRow>,
}

#[derive(Serialize)]
struct GroupCsvRow {
    group: String,
    n: usize,
    auc: Option<f64>,
    rmse: f64,
    kappa: f64,
}

pub fn analyze(common: &Common, report_path: &Path) -> Result<()> {
    let (cfg, _) = load_config(common.config.as_deref())?;
    let data = load_corpus(&cfg, common.corpus.as_deref())?;
    let report: NewResponsesReport = read_json(report_path)?;
    let dir = out_dir(common, &cfg)?;

    let (correct, incorrect) = split_by_correctness(&data, &report.predictions)?;
    let features = compare_groups(&correct, &incorrect)?;
    let items: Vec<(&ScoredResponse, ClassProbs)> = report
        .predictions
        .iter()
        .filter_map(|p| data.response(&p.response_id).map(|r| (r, p.probs)))
        .collect();
    let partition = partition_math_text(&items, cfg.metrics)?;
    let groups = per_group_metrics(&data, &report.predictions, &cfg.group_label, cfg.metrics)?;

    write_csv(&dir.join("features.csv"), &features)?;
    let group_rows: Vec<GroupCsvRow> = groups
        .iter()
        .map(|g| GroupCsvRow {
            group: g.group.clone(),
            n: g.n,
            auc: g.report.auc,
            rmse: g.report.rmse,
            kappa: g.report.kappa,
        })
        .collect();
    write_csv(&dir.join("groups.csv"), &group_rows)?;

    println!("{} correct, {} incorrect predictions\n", correct.len(), incorrect.len());
    let mut t = Table::new(["Feature", "Correct", "Incorrect", "p-value", ""]);
    for f in &features {
        t.row([
            f.feature.clone(),
            fixed3(f.mean_correct),
            fixed3(f.mean_incorrect),
            f.p_value.map(|p| format!("{p:.2e}")).unwrap_or_else(|| "-".into()),
            if f.significant { "*".into() } else { String::new() },
        ]);
    }
    print("Features of correct vs incorrect predictions", &t);

    let mut t = Table::new(["Responses", "n", "AUC", "RMSE", "Kappa"]);
    let mut part_row = |name: &str, n: usize, r: &Option<MetricReport>| {
        t.row([
            name.to_string(),
            n.to_string(),
            opt(r.as_ref().and_then(|r| r.auc)),
            opt(r.as_ref().map(|r| r.rmse)),
            opt(r.as_ref().map(|r| r.kappa)),
        ]);
    };
    part_row("math", partition.math_ids.len(), &partition.math);
    part_row("text", partition.text_ids.len(), &partition.text);
    print("Math vs text responses", &t);

    let mut t = Table::new([cfg.group_label.as_str(), "n", "AUC", "RMSE", "Kappa"]);
    for g in &groups {
        t.row([
            g.group.clone(),
            g.n.to_string(),
            opt(g.report.auc),
            fixed3(g.report.rmse),
            fixed3(g.report.kappa),
        ]);
    }
    print(&format!("By {}", cfg.group_label), &t);

    write_json(
        &dir.join("analysis.json"),
        &Analysis {
            features,
            partition,
            groups,
        },
    )
}
