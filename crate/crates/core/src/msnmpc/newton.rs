//! Projected Newton method for box-constrained problems whose Hessian has
//! arrowhead structure: one shared variable coupled to independent blocks.

use nalgebra::{DMatrix, DVector};

use super::solver::{projected_residual, BoxSolution, SolveStatus, SolverOptions};

/// Symmetric matrix `[[a, c_1ᵀ, …, c_sᵀ], [c_1, D_1, 0], …, [c_s, 0, D_s]]`
/// over the variable ordering `[shared, block 1, …, block s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrowhead {
    pub a: f64,
    pub c: Vec<DVector<f64>>,
    pub d: Vec<DMatrix<f64>>,
}

impl Arrowhead {
    pub fn dim(&self) -> usize {
        1 + self.d.iter().map(|m| m.nrows()).sum::<usize>()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        m[(0, 0)] = self.a;
        let mut off = 1;
        for (c, d) in self.c.iter().zip(&self.d) {
            let k = d.nrows();
            m.view_mut((off, off), (k, k)).copy_from(d);
            for i in 0..k {
                m[(0, off + i)] = c[i];
                m[(off + i, 0)] = c[i];
            }
            off += k;
        }
        m
    }

    pub fn mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        out[0] = self.a * v[0];
        let mut off = 1;
        for (c, d) in self.c.iter().zip(&self.d) {
            let k = d.nrows();
            let vb = DVector::from_column_slice(&v[off..off + k]);
            let r = d * &vb + c * v[0];
            out[0] += c.dot(&vb);
            out[off..off + k].copy_from_slice(r.as_slice());
            off += k;
        }
        out
    }

    fn diag(&self, i: usize) -> f64 {
        if i == 0 {
            return self.a;
        }
        let mut off = 1;
        for d in &self.d {
            if i < off + d.nrows() {
                return d[(i - off, i - off)];
            }
            off += d.nrows();
        }
        unreachable!("index out of range")
    }

    /// Solves `(H + τI) d = rhs` restricted to the variables with
    /// `free[i] = true`; the other entries of the result are zero. Returns
    /// `None` if the restricted matrix is not positive definite.
    pub fn solve_free(&self, rhs: &[f64], free: &[bool], tau: f64) -> Option<Vec<f64>> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        let shared_free = free[0];
        let mut schur = self.a + tau;
        let mut rhs0 = rhs[0];
        let mut parts = Vec::with_capacity(self.d.len());
        let mut off = 1;
        for (c, d) in self.c.iter().zip(&self.d) {
            let k = d.nrows();
            let idx: Vec<usize> = (0..k).filter(|&i| free[off + i]).collect();
            if idx.is_empty() {
                parts.push(None);
                off += k;
                continue;
            }
            let m = idx.len();
            let mut db = DMatrix::from_fn(m, m, |i, j| d[(idx[i], idx[j])]);
            for i in 0..m {
                db[(i, i)] += tau;
            }
            let chol = db.cholesky()?;
            let rb = DVector::from_fn(m, |i, _| rhs[off + idx[i]]);
            let y = chol.solve(&rb);
            let cb = DVector::from_fn(m, |i, _| c[idx[i]]);
            let z = chol.solve(&cb);
            if shared_free {
                schur -= cb.dot(&z);
                rhs0 -= cb.dot(&y);
            }
            parts.push(Some((off, idx, y, z)));
            off += k;
        }
        let x0 = if shared_free {
            if !(schur > 0.0) {
                return None;
            }
            rhs0 / schur
        } else {
            0.0
        };
        out[0] = x0;
        for (off, idx, y, z) in parts.into_iter().flatten() {
            for (i, &j) in idx.iter().enumerate() {
                out[off + j] = y[i] - z[i] * x0;
            }
        }
        Some(out)
    }
}

/// Partially separable objective `Σ_b f_b(x_0, x_b)`: every element shares
/// the first variable and owns one block of `block_len` further variables,
/// laid out consecutively after it. The Hessian is therefore an arrowhead.
pub trait ArrowheadObjective {
    /// `(number of elements, block length)`.
    fn layout(&self) -> (usize, usize);
    fn value(&self, x: &[f64]) -> f64;
    /// Total value; `ge[b]` receives the gradient of element `b` with
    /// respect to `(x_0, x_b)`.
    fn element_grads(&self, x: &[f64], ge: &mut [Vec<f64>]) -> f64;

    /// Element Hessians by forward differences of the element gradients.
    /// Perturbing the same local index of every block at once costs
    /// `block_len + 1` gradient evaluations.
    fn element_hessians(&self, x: &[f64], ge: &[Vec<f64>]) -> Vec<DMatrix<f64>> {
        let (s, m) = self.layout();
        let mut out = vec![DMatrix::zeros(m + 1, m + 1); s];
        let mut xp = x.to_vec();
        let mut gp = vec![vec![0.0; m + 1]; s];
        for j in 0..=m {
            let vars: Vec<usize> = if j == 0 { vec![0] } else { (0..s).map(|b| 1 + b * m + j - 1).collect() };
            for delta in [1e-6, -1e-6] {
                for &i in &vars {
                    xp[i] = x[i] + delta;
                }
                let f = self.element_grads(&xp, &mut gp);
                for &i in &vars {
                    xp[i] = x[i];
                }
                if f.is_finite() {
                    for b in 0..s {
                        for r in 0..=m {
                            out[b][(r, j)] = (gp[b][r] - ge[b][r]) / delta;
                        }
                    }
                    break;
                }
            }
        }
        for h in &mut out {
            let sym = (&*h + h.transpose()) * 0.5;
            *h = sym;
        }
        out
    }
}

impl Arrowhead {
    pub fn from_elements(el: &[DMatrix<f64>]) -> Self {
        let m = el[0].nrows() - 1;
        Self {
            a: el.iter().map(|h| h[(0, 0)]).sum(),
            c: el.iter().map(|h| h.view((1, 0), (m, 1)).column(0).into_owned()).collect(),
            d: el.iter().map(|h| h.view((1, 1), (m, m)).into_owned()).collect(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assemble(ge: &[Vec<f64>], g: &mut [f64]) {
    let m = ge[0].len() - 1;
    g[0] = ge.iter().map(|e| e[0]).sum();
    for (b, e) in ge.iter().enumerate() {
        g[1 + b * m..1 + (b + 1) * m].copy_from_slice(&e[1..]);
    }
}

fn local(x: &[f64], b: usize, m: usize) -> DVector<f64> {
    let mut v = DVector::zeros(m + 1);
    v[0] = x[0];
    v.rows_mut(1, m).copy_from_slice(&x[1 + b * m..1 + (b + 1) * m]);
    v
}

/// Powell-damped BFGS update of one element Hessian; keeps it positive
/// definite when it already is.
fn damped_bfgs(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let hs = &*h * s;
    let shs = s.dot(&hs);
    if !(shs > 1e-300) {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * shs { 1.0 } else { 0.8 * shs / (shs - sy) };
    let r = y * theta + &hs * (1.0 - theta);
    let sr = s.dot(&r);
    if !(sr > 0.0) {
        return;
    }
    *h -= &hs * hs.transpose() / shs;
    *h += &r * r.transpose() / sr;
}

fn make_pd(h: &mut DMatrix<f64>) {
    let eig = h.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    let floored = eig.eigenvalues.map(|v| v.max(1e-6 * top));
    *h = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
}

/// Projected quasi-Newton iteration on a partially separable objective.
///
/// Element Hessians start from finite differences (made positive definite)
/// and are then refreshed by damped BFGS from element gradient differences.
/// Bound-held variables use an ε-active set; steps are damped Levenberg-
/// Marquardt style, with the shift growing when the quadratic model
/// predicts the decrease poorly.
pub fn minimize_newton(
    obj: &impl ArrowheadObjective,
    x0: &[f64],
    lb: &[f64],
    ub: &[f64],
    opts: &SolverOptions,
) -> BoxSolution {
    let n = x0.len();
    let (s_el, m) = obj.layout();
    assert_eq!(n, 1 + s_el * m, "layout does not match the variable count");
    let mut x: Vec<f64> = (0..n).map(|i| x0[i].clamp(lb[i], ub[i])).collect();
    let mut ge = vec![vec![0.0; m + 1]; s_el];
    let mut g = vec![0.0; n];
    let mut f = obj.element_grads(&x, &mut ge);
    assemble(&ge, &mut g);
    let done = |x: Vec<f64>, f: f64, kkt: f64, iterations: usize, status| BoxSolution {
        x,
        f,
        kkt_residual: kkt,
        iterations,
        status,
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return done(x, f, f64::INFINITY, 0, SolveStatus::Fault);
    }
    let mut el = obj.element_hessians(&x, &ge);
    el.iter_mut().for_each(make_pd);
    let mut trial = vec![0.0; n];
    let mut ge_new = vec![vec![0.0; m + 1]; s_el];
    let mut g_new = vec![0.0; n];
    let mut mu = 1e-8;
    for iter in 0..=opts.max_iter {
        let kkt = projected_residual(&x, &g, lb, ub);
        if kkt <= opts.tol {
            return done(x, f, kkt, iter, SolveStatus::Converged);
        }
        if iter == opts.max_iter {
            return done(x, f, kkt, iter, SolveStatus::MaxIter);
        }
        if iter > 0 && opts.hessian_refresh > 0 && iter % opts.hessian_refresh == 0 {
            el = obj.element_hessians(&x, &ge);
            el.iter_mut().for_each(make_pd);
        }
        let eps = kkt.min(1e-2);
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] - lb[i] <= eps && g[i] > 0.0) || (ub[i] - x[i] <= eps && g[i] < 0.0)))
            .collect();
        let h = Arrowhead::from_elements(&el);
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let scale = (0..n).map(|i| h.diag(i).abs()).fold(0.0, f64::max).max(1e-8);

        // Newton decrement of the free variables
        if let Some(dn) = h.solve_free(&neg_g, &free, 1e-10 * scale) {
            if 0.5 * dot(&dn, &neg_g) < opts.rel_decrease_floor * (1.0 + f.abs()) {
                return done(x, f, kkt, iter, SolveStatus::Stalled);
            }
        }
        let mut accepted = false;
        for _ in 0..30 {
            let tau = mu * scale;
            let Some(mut d) = h.solve_free(&neg_g, &free, tau) else {
                mu = (mu * 10.0).max(1e-8);
                continue;
            };
            for i in 0..n {
                if !free[i] {
                    d[i] = -g[i] / (h.diag(i).max(0.0) + tau).max(1e-8 * scale);
                }
            }
            for i in 0..n {
                trial[i] = (x[i] + d[i]).clamp(lb[i], ub[i]);
            }
            let s: Vec<f64> = trial.iter().zip(&x).map(|(t, xi)| t - xi).collect();
            let hs = h.mul(&s);
            let model = dot(&g, &s) + 0.5 * dot(&s, &hs) + 0.5 * tau * dot(&s, &s);
            let ft = obj.value(&trial);
            if model < 0.0 && ft.is_finite() && (ft - f) / model > 0.1 {
                if (ft - f) / model > 0.75 {
                    mu = (mu / 4.0).max(1e-12);
                }
                accepted = true;
                break;
            }
            mu = (mu * 8.0).max(1e-8);
        }
        if !accepted {
            return done(x, f, kkt, iter + 1, SolveStatus::MaxIter);
        }
        let fn_ = obj.element_grads(&trial, &mut ge_new);
        assemble(&ge_new, &mut g_new);
        if !fn_.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return done(x, f, f64::INFINITY, iter + 1, SolveStatus::Fault);
        }
        for b in 0..s_el {
            let sb = local(&trial, b, m) - local(&x, b, m);
            let yb = DVector::from_column_slice(&ge_new[b]) - DVector::from_column_slice(&ge[b]);
            damped_bfgs(&mut el[b], &sb, &yb);
        }
        x.copy_from_slice(&trial);
        f = fn_;
        std::mem::swap(&mut g, &mut g_new);
        std::mem::swap(&mut ge, &mut ge_new);
    }
    unreachable!("loop returns at max_iter")
}
