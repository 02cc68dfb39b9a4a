//! Ordinal item-response model with covariates.
//!
//! `P(y <= k) = sigmoid(tau_k - eta)` with
//! `eta = a_q (theta_s - b_q) + w . p + v * ln(1 + word_count)`, where `p` is
//! the scoring model's class distribution for the response.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::ClassProbs;
use crate::corpus::ScoredResponse;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricConfig, MetricReport};
use crate::optim::{self, LbfgsConfig};
use crate::score::{Score, SCALE_SIZE};

pub const THRESHOLDS: usize = SCALE_SIZE - 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaschObservation {
    pub student_id: String,
    pub question_id: String,
    /// `None` when only predicting.
    pub label: Option<Score>,
    pub probs: ClassProbs,
    pub word_count: u32,
}

impl RaschObservation {
    /// Observation for a scored response. Responses without a student id are
    /// treated as their own student.
    pub fn from_response(r: &ScoredResponse, probs: ClassProbs) -> Self {
        RaschObservation {
            student_id: r.student_id.clone().unwrap_or_else(|| format!("response:{}", r.id)),
            question_id: r.question_id.clone(),
            label: Some(r.score),
            probs,
            word_count: r.text.split_whitespace().count() as u32,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// All parameters maximised together.
    #[default]
    Joint,
    /// Ability/difficulty/discrimination fitted without covariates first,
    /// then frozen while thresholds and covariate weights are fitted.
    Staged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaschConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Convergence when `||grad|| / n_observations < tol`.
    pub tol: f64,
    /// Per-question discrimination; `false` fixes every `a_q = 1`.
    pub two_pl: bool,
    pub use_probs: bool,
    pub use_word_count: bool,
    pub mode: FitMode,
}

impl Default for RaschConfig {
    fn default() -> Self {
        RaschConfig {
            lambda: 0.01,
            max_iter: 10_000,
            tol: 1e-6,
            two_pl: true,
            use_probs: true,
            use_word_count: true,
            mode: FitMode::Joint,
        }
    }
}

impl RaschConfig {
    pub fn baseline() -> Self {
        RaschConfig {
            use_probs: false,
            use_word_count: false,
            ..Self::default()
        }
    }

    pub fn word_count_only() -> Self {
        RaschConfig {
            use_probs: false,
            use_word_count: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaschFit {
    pub ability: BTreeMap<String, f64>,
    pub difficulty: BTreeMap<String, f64>,
    pub discrimination: BTreeMap<String, f64>,
    pub thresholds: [f64; THRESHOLDS],
    pub prob_weights: [f64; SCALE_SIZE],
    pub word_count_weight: f64,
    pub lambda: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub config: RaschConfig,
}

impl RaschFit {
    pub fn eta(&self, obs: &RaschObservation) -> f64 {
        let theta = self.ability.get(&obs.student_id).copied().unwrap_or(0.0);
        let b = self
            .difficulty
            .get(&obs.question_id)
            .copied()
            .unwrap_or_else(|| mean(self.difficulty.values()));
        let a = self
            .discrimination
            .get(&obs.question_id)
            .copied()
            .unwrap_or_else(|| mean(self.discrimination.values().map(|a| a.ln()).collect::<Vec<_>>().iter()).exp());
        let cov: f64 = self
            .prob_weights
            .iter()
            .zip(obs.probs.as_array())
            .map(|(w, p)| w * p)
            .sum();
        a * (theta - b) + cov + self.word_count_weight * (obs.word_count as f64).ln_1p()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn mean<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Class distribution for linear predictor `eta` under ordered `thresholds`.
pub fn class_probs(thresholds: &[f64; THRESHOLDS], eta: f64) -> ClassProbs {
    let mut p = [0.0; SCALE_SIZE];
    for (k, pk) in p.iter_mut().enumerate() {
        *pk = category_log_prob(thresholds, eta, k).exp();
    }
    ClassProbs::normalized(p).unwrap_or_else(|_| ClassProbs::uniform())
}

/// Predicted distribution for an observation. Unseen students get ability 0;
/// unseen questions get the mean difficulty and the geometric-mean
/// discrimination.
pub fn predict_rasch(fit: &RaschFit, obs: &RaschObservation) -> ClassProbs {
    class_probs(&fit.thresholds, fit.eta(obs))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln P(y = k)` for the cumulative link.
fn category_log_prob(tau: &[f64; THRESHOLDS], eta: f64, k: usize) -> f64 {
    if k == 0 {
        return log_sigmoid(tau[0] - eta);
    }
    if k == THRESHOLDS {
        return log_sigmoid(eta - tau[THRESHOLDS - 1]);
    }
    let u = tau[k] - eta;
    let l = tau[k - 1] - eta;
    log_sigmoid(u) + log_sigmoid(-l) + (-(l - u).exp()).ln_1p()
}

/// `(ln P, d ln P / d upper, d ln P / d lower)`; the upper/lower threshold
/// derivatives are zero for the open-ended categories.
fn category_terms(tau: &[f64; THRESHOLDS], eta: f64, k: usize) -> (f64, f64, f64) {
    let lp = category_log_prob(tau, eta, k);
    if k == 0 {
        return (lp, sigmoid(eta - tau[0]), 0.0);
    }
    if k == THRESHOLDS {
        return (lp, 0.0, -sigmoid(tau[THRESHOLDS - 1] - eta));
    }
    let u = tau[k] - eta;
    let l = tau[k - 1] - eta;
    let inv = 1.0 / (u - l).exp_m1();
    (lp, sigmoid(-u) + inv, -sigmoid(l) - inv)
}

/// Index arithmetic for the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    students: Vec<String>,
    questions: Vec<String>,
    two_pl: bool,
    /// Which of the five probability weights are free (index 0 is always
    /// pinned; the five probabilities sum to one).
    free_w: [bool; SCALE_SIZE],
    free_v: bool,
}

impl Layout {
    fn n_s(&self) -> usize {
        self.students.len()
    }
    fn n_q(&self) -> usize {
        self.questions.len()
    }
    fn theta(&self, i: usize) -> usize {
        i
    }
    fn b(&self, j: usize) -> usize {
        self.n_s() + j
    }
    fn alpha(&self, j: usize) -> Option<usize> {
        self.two_pl.then(|| self.n_s() + self.n_q() + j)
    }
    fn tau0(&self) -> usize {
        self.n_s() + self.n_q() * if self.two_pl { 2 } else { 1 }
    }
    fn w(&self, k: usize) -> usize {
        self.tau0() + THRESHOLDS + k
    }
    fn v(&self) -> usize {
        self.w(SCALE_SIZE)
    }
    pub fn len(&self) -> usize {
        self.v() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn thresholds(&self, x: &[f64]) -> [f64; THRESHOLDS] {
        let mut t = [0.0; THRESHOLDS];
        t[0] = x[self.tau0()];
        for k in 1..THRESHOLDS {
            t[k] = t[k - 1] + x[self.tau0() + k].exp();
        }
        t
    }
}

/// Pre-indexed observations.
#[derive(Clone, Debug)]
pub struct Problem {
    layout: Layout,
    rows: Vec<Row>,
    lambda: f64,
}

#[derive(Clone, Debug)]
struct Row {
    s: usize,
    q: usize,
    y: usize,
    p: [f64; SCALE_SIZE],
    x: f64,
}

impl Problem {
    pub fn new(observations: &[RaschObservation], cfg: &RaschConfig) -> Result<Self> {
        let students: BTreeSet<&str> = observations.iter().map(|o| o.student_id.as_str()).collect();
        let questions: BTreeSet<&str> = observations.iter().map(|o| o.question_id.as_str()).collect();
        let labels: BTreeSet<Score> = observations.iter().filter_map(|o| o.label).collect();
        if students.len() < 2 || questions.len() < 2 || labels.len() < 2 {
            return Err(Error::Validation(format!(
                "need >= 2 students, questions and label values (got {}, {}, {})",
                students.len(),
                questions.len(),
                labels.len()
            )));
        }
        let students: Vec<String> = students.into_iter().map(String::from).collect();
        let questions: Vec<String> = questions.into_iter().map(String::from).collect();
        let s_idx: BTreeMap<&str, usize> = students.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let q_idx: BTreeMap<&str, usize> = questions.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut rows = Vec::with_capacity(observations.len());
        for o in observations {
            let y = o
                .label
                .ok_or_else(|| Error::Validation(format!("unlabelled observation for {}", o.student_id)))?;
            rows.push(Row {
                s: s_idx[o.student_id.as_str()],
                q: q_idx[o.question_id.as_str()],
                y: y.index(),
                p: *o.probs.as_array(),
                x: (o.word_count as f64).ln_1p(),
            });
        }
        let varies = |f: &dyn Fn(&Row) -> f64| {
            let first = f(&rows[0]);
            rows.iter().any(|r| (f(r) - first).abs() > 1e-12)
        };
        let mut free_w = [false; SCALE_SIZE];
        if cfg.use_probs {
            for (k, free) in free_w.iter_mut().enumerate().skip(1) {
                *free = varies(&|r: &Row| r.p[k]);
            }
        }
        let free_v = cfg.use_word_count && varies(&|r: &Row| r.x);
        Ok(Problem {
            layout: Layout {
                students,
                questions,
                two_pl: cfg.two_pl,
                free_w,
                free_v,
            },
            rows,
            lambda: cfg.lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn n_observations(&self) -> usize {
        self.rows.len()
    }

    /// Starting point: zero abilities/difficulties, unit discrimination and
    /// thresholds at the empirical cumulative logits.
    pub fn initial(&self) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.len()];
        let mut counts = [1.0; SCALE_SIZE];
        for r in &self.rows {
            counts[r.y] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let mut cum = 0.0;
        let mut tau = [0.0; THRESHOLDS];
        for k in 0..THRESHOLDS {
            cum += counts[k];
            let f = cum / total;
            tau[k] = (f / (1.0 - f)).ln();
        }
        x[l.tau0()] = tau[0];
        for k in 1..THRESHOLDS {
            x[l.tau0() + k] = (tau[k] - tau[k - 1]).max(1e-3).ln();
        }
        x
    }

    /// Penalised log-likelihood `sum ln P(y_i) - lambda/2 ||x'||^2` and its
    /// gradient, where `x'` is every parameter except the first threshold
    /// (abilities, difficulties, `a - 1` for discriminations, log threshold
    /// gaps and covariate weights). Pinned covariate weights are read as zero.
    pub fn objective(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let tau = l.thresholds(x);
        let mut g = vec![0.0; x.len()];
        let mut ll = 0.0;
        let mut g_tau = [0.0; THRESHOLDS];
        let w: [f64; SCALE_SIZE] = std::array::from_fn(|k| if l.free_w[k] { x[l.w(k)] } else { 0.0 });
        let v = if l.free_v { x[l.v()] } else { 0.0 };
        for r in &self.rows {
            let theta = x[l.theta(r.s)];
            let b = x[l.b(r.q)];
            let a = l.alpha(r.q).map_or(1.0, |i| x[i].exp());
            let cov: f64 = w.iter().zip(&r.p).map(|(w, p)| w * p).sum::<f64>() + v * r.x;
            let eta = a * (theta - b) + cov;
            let (lp, d_up, d_lo) = category_terms(&tau, eta, r.y);
            ll += lp;
            let d_eta = -(d_up + d_lo);
            if r.y < THRESHOLDS {
                g_tau[r.y] += d_up;
            }
            if r.y > 0 {
                g_tau[r.y - 1] += d_lo;
            }
            g[l.theta(r.s)] += d_eta * a;
            g[l.b(r.q)] -= d_eta * a;
            if let Some(i) = l.alpha(r.q) {
                g[i] += d_eta * a * (theta - b);
            }
            for k in 0..SCALE_SIZE {
                if l.free_w[k] {
                    g[l.w(k)] += d_eta * r.p[k];
                }
            }
            if l.free_v {
                g[l.v()] += d_eta * r.x;
            }
        }
        // tau_j = t0 + sum_{m<j} exp(d_m)
        g[l.tau0()] = g_tau.iter().sum();
        for m in 1..THRESHOLDS {
            let e = x[l.tau0() + m].exp();
            g[l.tau0() + m] = e * g_tau[m..].iter().sum::<f64>();
        }
        let penalty = self.penalty(x);
        for (i, gi) in g.iter_mut().enumerate() {
            if self.is_discrimination(i) {
                let a = x[i].exp();
                *gi -= self.lambda * (a - 1.0) * a;
            } else if i != l.tau0() {
                *gi -= self.lambda * x[i];
            }
        }
        (ll - 0.5 * self.lambda * penalty, g)
    }

    fn is_discrimination(&self, i: usize) -> bool {
        let l = &self.layout;
        l.two_pl && i >= l.n_s() + l.n_q() && i < l.tau0()
    }

    /// Sum of squares of every parameter except the location of the first
    /// threshold; discriminations enter as `(a - 1)^2`.
    fn penalty(&self, x: &[f64]) -> f64 {
        let t0 = self.layout.tau0();
        x.iter()
            .enumerate()
            .filter(|(i, _)| *i != t0)
            .map(|(i, v)| if self.is_discrimination(i) { (v.exp() - 1.0).powi(2) } else { v * v })
            .sum()
    }

    /// Unpenalised log-likelihood.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        self.objective(x).0 + 0.5 * self.lambda * self.penalty(x)
    }

    fn free_mask(&self, stage: Option<Stage>) -> Vec<bool> {
        let l = &self.layout;
        let mut m = vec![true; l.len()];
        for k in 0..SCALE_SIZE {
            m[l.w(k)] = l.free_w[k];
        }
        m[l.v()] = l.free_v;
        match stage {
            None => {}
            Some(Stage::Items) => {
                for k in 0..SCALE_SIZE {
                    m[l.w(k)] = false;
                }
                m[l.v()] = false;
            }
            Some(Stage::Covariates) => {
                for free in m.iter_mut().take(l.tau0()) {
                    *free = false;
                }
            }
        }
        m
    }

    /// Ascent direction restricted to free parameters, with the ability block
    /// projected onto mean zero.
    fn constrain(&self, g: &mut [f64], mask: &[bool]) {
        for (gi, free) in g.iter_mut().zip(mask) {
            if !free {
                *gi = 0.0;
            }
        }
        let n_s = self.layout.n_s();
        if mask[0] {
            let m = g[..n_s].iter().sum::<f64>() / n_s as f64;
            g[..n_s].iter_mut().for_each(|v| *v -= m);
        }
    }

    fn ascend(&self, x0: Vec<f64>, cfg: &RaschConfig, mask: &[bool]) -> Result<(Vec<f64>, usize)> {
        let lb = LbfgsConfig {
            max_iter: cfg.max_iter,
            tol: cfg.tol,
            grad_scale: self.rows.len() as f64,
            ..LbfgsConfig::default()
        };
        let res = optim::minimize(
            |x| {
                let (f, mut g) = self.objective(x);
                self.constrain(&mut g, mask);
                (-f, g.into_iter().map(|v| -v).collect())
            },
            x0,
            &lb,
        );
        if !res.converged {
            return Err(Error::NonConvergence {
                iterations: res.iterations,
                grad_norm: res.grad_norm / self.rows.len() as f64,
                last_iterate: res.x,
            });
        }
        Ok((res.x, res.iterations))
    }

    fn into_fit(&self, x: &[f64], iterations: usize, cfg: &RaschConfig) -> RaschFit {
        let l = &self.layout;
        let mut prob_weights = [0.0; SCALE_SIZE];
        for k in 0..SCALE_SIZE {
            if l.free_w[k] {
                prob_weights[k] = x[l.w(k)];
            }
        }
        RaschFit {
            ability: l.students.iter().enumerate().map(|(i, s)| (s.clone(), x[l.theta(i)])).collect(),
            difficulty: l.questions.iter().enumerate().map(|(j, q)| (q.clone(), x[l.b(j)])).collect(),
            discrimination: l
                .questions
                .iter()
                .enumerate()
                .map(|(j, q)| (q.clone(), l.alpha(j).map_or(1.0, |i| x[i].exp())))
                .collect(),
            thresholds: l.thresholds(x),
            prob_weights,
            word_count_weight: if l.free_v { x[l.v()] } else { 0.0 },
            lambda: self.lambda,
            log_likelihood: self.log_likelihood(x),
            iterations,
            config: *cfg,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Stage {
    Items,
    Covariates,
}

/// Maximum penalised likelihood fit. Non-convergence returns
/// [`Error::NonConvergence`] with the last iterate.
pub fn fit(observations: &[RaschObservation], cfg: &RaschConfig) -> Result<RaschFit> {
    let problem = Problem::new(observations, cfg)?;
    let x0 = problem.initial();
    let (x, iters) = match cfg.mode {
        FitMode::Joint => problem.ascend(x0, cfg, &problem.free_mask(None))?,
        FitMode::Staged => {
            let (x1, i1) = problem.ascend(x0, cfg, &problem.free_mask(Some(Stage::Items)))?;
            let (x2, i2) = problem.ascend(x1, cfg, &problem.free_mask(Some(Stage::Covariates)))?;
            (x2, i1 + i2)
        }
    };
    Ok(problem.into_fit(&x, iters, cfg))
}

/// Fit on training observations, predict the test observations and score the
/// predictions against their labels.
pub fn evaluate_with_rasch(
    train: &[RaschObservation],
    test: &[RaschObservation],
    cfg: &RaschConfig,
    metric_cfg: MetricConfig,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Empty("rasch test split"));
    }
    let fitted = fit(train, cfg)?;
    let probs: Vec<ClassProbs> = test.iter().map(|o| predict_rasch(&fitted, o)).collect();
    let labels: Vec<Score> = test
        .iter()
        .map(|o| o.label.ok_or_else(|| Error::Validation("unlabelled test observation".into())))
        .collect::<Result<_>>()?;
    metrics::report(&probs, &labels, metric_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn obs(s: &str, q: &str, y: i64, p: ClassProbs, wc: u32) -> RaschObservation {
        RaschObservation {
            student_id: s.into(),
            question_id: q.into(),
            label: Some(Score::new(y).unwrap()),
            probs: p,
            word_count: wc,
        }
    }

    fn random_data(seed: u64, n_s: usize, n_q: usize) -> Vec<RaschObservation> {
        let mut rng = seeding::rng(seed);
        let mut out = Vec::new();
        for s in 0..n_s {
            for q in 0..n_q {
                let raw: [f64; 5] = std::array::from_fn(|_| rng.random::<f64>() + 0.01);
                out.push(obs(
                    &format!("s{s}"),
                    &format!("q{q}"),
                    rng.random_range(0..5),
                    ClassProbs::normalized(raw).unwrap(),
                    rng.random_range(0..40),
                ));
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = random_data(3, 5, 4);
        let p = Problem::new(&data, &RaschConfig::default()).unwrap();
        let mut rng = seeding::rng(9);
        let x: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (_, g) = p.objective(&x);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.objective(&xp).0 - p.objective(&xm).0) / (2.0 * h);
            let pinned = g[i] == 0.0 && fd == 0.0;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(pinned || rel < 1e-5, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn link_limits_and_symmetry() {
        let tau = [-2.0, -0.5, 0.5, 2.0];
        let low = class_probs(&tau, -60.0);
        assert!(low.as_array()[0] > 1.0 - 1e-12);
        let high = class_probs(&tau, 60.0);
        assert!(high.as_array()[4] > 1.0 - 1e-12);
        let mid = class_probs(&tau, 0.0);
        let a = mid.as_array();
        assert!((a[0] - a[4]).abs() < 1e-12 && (a[1] - a[3]).abs() < 1e-12);
    }

    #[test]
    fn expected_score_increases_with_eta() {
        let tau = [-1.0, 0.0, 0.3, 2.0];
        let mut last = -1.0;
        for i in -40..40 {
            let e = class_probs(&tau, i as f64 * 0.25).expected_score();
            assert!(e > last);
            last = e;
        }
    }

    #[test]
    fn symmetric_labels_centre_abilities() {
        let u = ClassProbs::uniform();
        let mut data = Vec::new();
        for s in 0..4 {
            for q in 0..4 {
                for y in 0..5 {
                    data.push(obs(&format!("s{s}"), &format!("q{q}"), y, u, 0));
                }
            }
        }
        let f = fit(&data, &RaschConfig::default()).unwrap();
        assert!(f.ability.values().all(|t| t.abs() < 1e-4));
        assert!(f.difficulty.values().all(|b| b.abs() < 1e-4));
        let mean_theta: f64 = f.ability.values().sum::<f64>() / 4.0;
        assert!(mean_theta.abs() < 1e-12);
    }

    #[test]
    fn thresholds_ordered_and_serialisable() {
        let f = fit(&random_data(5, 8, 5), &RaschConfig::default()).unwrap();
        assert!(f.thresholds.windows(2).all(|w| w[1] > w[0]));
        assert!(f.discrimination.values().all(|a| *a > 0.0));
        assert!(f.log_likelihood.is_finite());
        let back = RaschFit::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn larger_lambda_shrinks_abilities() {
        let data = random_data(11, 10, 6);
        let norm = |lambda: f64| {
            let f = fit(&data, &RaschConfig { lambda, ..RaschConfig::default() }).unwrap();
            f.ability.values().map(|t| t * t).sum::<f64>().sqrt()
        };
        let mut prev = norm(0.01);
        for lambda in [0.02, 0.04, 0.08, 0.16] {
            let n = norm(lambda);
            assert!(n <= prev + 1e-9, "lambda {lambda}: {n} > {prev}");
            prev = n;
        }
    }

    #[test]
    fn objective_never_decreases_across_iterations() {
        let data = random_data(2, 6, 5);
        let p = Problem::new(&data, &RaschConfig::default()).unwrap();
        let mask = p.free_mask(None);
        let res = optim::minimize(
            |x| {
                let (f, mut g) = p.objective(x);
                p.constrain(&mut g, &mask);
                (-f, g.into_iter().map(|v| -v).collect())
            },
            p.initial(),
            &LbfgsConfig::default(),
        );
        assert!(res.trace.windows(2).all(|w| -w[1] >= -w[0]));
    }

    #[test]
    fn uniform_probs_reproduce_baseline() {
        let mut data = random_data(4, 8, 5);
        for o in &mut data {
            o.probs = ClassProbs::uniform();
            o.word_count = 7;
        }
        let (train, test) = data.split_at(30);
        let full = evaluate_with_rasch(train, test, &RaschConfig::default(), MetricConfig::default()).unwrap();
        let base = evaluate_with_rasch(train, test, &RaschConfig::baseline(), MetricConfig::default()).unwrap();
        assert_eq!(full, base);
    }

    #[test]
    fn informative_probs_beat_baseline() {
        let mut rng = seeding::rng(8);
        let mut data = Vec::new();
        for s in 0..12 {
            for q in 0..6 {
                let y = rng.random_range(0..5);
                data.push(obs(&format!("s{s}"), &format!("q{q}"), y, ClassProbs::one_hot(Score::new(y).unwrap()), 5));
            }
        }
        let (train, test) = data.split_at(50);
        let with = evaluate_with_rasch(train, test, &RaschConfig::default(), MetricConfig::default()).unwrap();
        let base = evaluate_with_rasch(train, test, &RaschConfig::baseline(), MetricConfig::default()).unwrap();
        assert!(with.kappa > base.kappa, "{} vs {}", with.kappa, base.kappa);
        assert!(evaluate_with_rasch(train, &[], &RaschConfig::default(), MetricConfig::default()).is_err());
    }

    #[test]
    fn non_convergence_carries_iterate() {
        let cfg = RaschConfig {
            max_iter: 1,
            ..RaschConfig::default()
        };
        match fit(&random_data(1, 6, 4), &cfg) {
            Err(Error::NonConvergence { last_iterate, .. }) => assert!(!last_iterate.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn staged_mode_fits() {
        let cfg = RaschConfig {
            mode: FitMode::Staged,
            ..RaschConfig::default()
        };
        let f = fit(&random_data(6, 8, 5), &cfg).unwrap();
        assert!(f.log_likelihood.is_finite());
    }

    #[test]
    fn unseen_ids_use_population_values() {
        let f = fit(&random_data(7, 6, 4), &RaschConfig::baseline()).unwrap();
        let o = RaschObservation {
            student_id: "new".into(),
            question_id: "new".into(),
            label: None,
            probs: ClassProbs::uniform(),
            word_count: 3,
        };
        let mean_b = f.difficulty.values().sum::<f64>() / f.difficulty.len() as f64;
        let gm_a = (f.discrimination.values().map(|a| a.ln()).sum::<f64>() / f.discrimination.len() as f64).exp();
        assert!((f.eta(&o) - (-gm_a * mean_b)).abs() < 1e-12);
    }
}
