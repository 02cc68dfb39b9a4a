//! Limited-memory BFGS minimiser with a monotone backtracking line search.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when `||g|| / grad_scale < tol`.
    pub tol: f64,
    pub grad_scale: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub max_halvings: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iter: 500,
            memory: 10,
            tol: 1e-6,
            grad_scale: 1.0,
            c1: 1e-4,
            max_halvings: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimise `f`, which returns the objective and its gradient. The objective
/// never increases between accepted iterates.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut trace = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let done = |g: &[f64]| norm(g) / cfg.grad_scale < cfg.tol;

    while iterations < cfg.max_iter && !done(&g) {
        iterations += 1;
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if history.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..cfg.max_halvings {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite() && fn_ <= fx + cfg.c1 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > cfg.memory {
                history.pop_front();
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
    }
    LbfgsResult {
        grad_norm: norm(&g),
        converged: done(&g),
        x,
        value: fx,
        iterations,
        trace,
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn solves_rosenbrock_monotonically() {
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsConfig::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_exact() {
        let f = |x: &[f64]| {
            let v: f64 = x.iter().enumerate().map(|(i, xi)| (i + 1) as f64 * (xi - 2.0).powi(2)).sum();
            let g = x.iter().enumerate().map(|(i, xi)| 2.0 * (i + 1) as f64 * (xi - 2.0)).collect();
            (v, g)
        };
        let r = minimize(f, vec![0.0; 6], &LbfgsConfig::default());
        assert!(r.converged);
        assert!(r.x.iter().all(|v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn reports_non_convergence() {
        let cfg = LbfgsConfig {
            max_iter: 2,
            ..Default::default()
        };
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &cfg);
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
    }
}
