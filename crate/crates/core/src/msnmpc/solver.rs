//! Projected L-BFGS for smooth objectives under box constraints, and the
//! options shared with the projected Newton method.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Objective with an analytic gradient. `value` may return `+inf` for points
/// outside the model's domain; the line search then backtracks.
pub trait BoxObjective {
    fn value(&self, x: &[f64]) -> f64;
    fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Projected Newton with a finite-difference Hessian.
    Newton,
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub method: SolverMethod,
    /// L-BFGS memory.
    pub memory: usize,
    /// Stop when `‖P(x - ∇f) - x‖∞` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Newton only: stop as stalled once the model predicts a decrease
    /// below this fraction of `1 + |f|` (the objective's rounding level).
    pub rel_decrease_floor: f64,
    /// Newton only: recompute the finite-difference Hessian every this many
    /// iterations (0: only at the start).
    pub hessian_refresh: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Newton,
            memory: 10,
            tol: 1e-6,
            max_iter: 500,
            armijo: 1e-4,
            max_backtracks: 40,
            rel_decrease_floor: 1e-12,
            hessian_refresh: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// No further decrease is resolvable in floating point.
    Stalled,
    MaxIter,
    Fault,
}

impl SolveStatus {
    /// Converged or stalled at working precision.
    pub fn is_ok(self) -> bool {
        matches!(self, SolveStatus::Converged | SolveStatus::Stalled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSolution {
    pub x: Vec<f64>,
    pub f: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

fn project(x: &mut [f64], lb: &[f64], ub: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lb[i], ub[i]);
    }
}

/// `‖P(x - g) - x‖∞`, zero exactly at first-order stationary points.
pub fn projected_residual(x: &[f64], g: &[f64], lb: &[f64], ub: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| ((x[i] - g[i]).clamp(lb[i], ub[i]) - x[i]).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Variables held at a bound because the gradient pushes outward.
fn active_set(x: &[f64], g: &[f64], lb: &[f64], ub: &[f64]) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] <= lb[i] && g[i] > 0.0) || (x[i] >= ub[i] && g[i] < 0.0))
        .collect()
}

fn two_loop(q: &mut [f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) {
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
}

pub fn minimize_box(
    obj: &impl BoxObjective,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    opts: &SolverOptions,
) -> BoxSolution {
    let n = x0.len();
    assert!(lb.len() == n && ub.len() == n, "bound length mismatch");
    let mut x = x0.to_vec();
    project(&mut x, lb, ub);
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BoxSolution {
            x,
            f,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            status: SolveStatus::Fault,
        };
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut g_new = vec![0.0; n];
    let mut iter = 0;
    loop {
        let kkt = projected_residual(&x, &g, lb, ub);
        if kkt <= opts.tol || iter >= opts.max_iter {
            let status = if kkt <= opts.tol {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIter
            };
            return BoxSolution {
                x,
                f,
                kkt_residual: kkt,
                iterations: iter,
                status,
            };
        }
        iter += 1;

        let active = active_set(&x, &g, lb, ub);
        let masked: Vec<f64> = g
            .iter()
            .zip(&active)
            .map(|(&gi, &a)| if a { 0.0 } else { gi })
            .collect();
        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = masked.clone();
            if attempt == 0 {
                two_loop(&mut d, &mem);
            } else {
                mem.clear();
                let scale = 1.0 / masked.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
                d.iter_mut().for_each(|v| *v *= scale);
            }
            for (di, &a) in d.iter_mut().zip(&active) {
                *di = if a { 0.0 } else { -*di };
            }
            if dot(&d, &g) >= 0.0 {
                continue;
            }
            let mut alpha = 1.0;
            let mut trial = vec![0.0; n];
            for _ in 0..opts.max_backtracks {
                for i in 0..n {
                    trial[i] = (x[i] + alpha * d[i]).clamp(lb[i], ub[i]);
                }
                let step: Vec<f64> = trial.iter().zip(&x).map(|(t, xi)| t - xi).collect();
                let decrease = dot(&g, &step);
                let ft = obj.value(&trial);
                if ft.is_finite() && ft <= f + opts.armijo * decrease && decrease < 0.0 {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some(xn) = accepted else {
            // no descent along either direction: stationary to working precision
            return BoxSolution {
                kkt_residual: kkt,
                x,
                f,
                iterations: iter,
                status: SolveStatus::Stalled,
            };
        };
        let fn_ = obj.value_grad(&xn, &mut g_new);
        if !fn_.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return BoxSolution {
                x,
                f,
                kkt_residual: kkt,
                iterations: iter,
                status: SolveStatus::Fault,
            };
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        } else {
            // stale curvature pairs stall progress in nonconvex regions
            mem.clear();
        }
        x = xn;
        f = fn_;
        std::mem::swap(&mut g, &mut g_new);
    }
}
