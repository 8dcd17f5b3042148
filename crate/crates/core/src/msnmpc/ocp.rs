//! Multi-stage optimal control problem with a soft, tightened height
//! constraint, and the feedback law built on it.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::newton::{minimize_newton, ArrowheadObjective};
use super::solver::{minimize_box, BoxObjective, SolveStatus, SolverMethod, SolverOptions};
use super::tree::{build_tree, ScenarioTree, TreeConfig};
use crate::error::{param, Result};
use crate::plant::integrate::{rk4_step, rk4_step_with_jacobian};
use crate::plant::kite::{
    augment, augmented_rhs, augmented_rhs_jacobian, glide_ratio, height, height_gradient, thrust,
    thrust_with_gradient, Augmented, KiteParams, KiteState, IDX_U,
};
use crate::plant::{ControlAction, Controller};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    /// Height backoff, m.
    pub eta: f64,
    pub w_f: f64,
    pub w_u: f64,
    pub t_c: f64,
    /// Weight of the squared violation of `h ≥ h_min + η`, per m².
    pub soft_penalty_weight: f64,
    /// Weight of `-w_F T_F` at the terminal node; 0 disables the terminal cost.
    pub terminal_weight: f64,
    /// RK4 steps per control period in the prediction.
    pub rk4_steps: usize,
    pub tree: TreeConfig,
    pub solver: SolverOptions,
    /// Closed loop only: every this many steps also solve from each constant
    /// input in `restart_inputs` and keep the best local optimum (0: never).
    pub restart_every: usize,
    pub restart_inputs: Vec<f64>,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            w_f: 1e-4,
            w_u: 0.5,
            t_c: 0.15,
            soft_penalty_weight: 1e3,
            terminal_weight: 0.0,
            rk4_steps: 1,
            tree: TreeConfig::default(),
            solver: SolverOptions::default(),
            restart_every: 10,
            restart_inputs: vec![-8.0, -3.0, 3.0, 8.0],
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(param(format!("backoff must be >= 0, got {}", self.eta)));
        }
        for (name, v) in [
            ("w_f", self.w_f),
            ("w_u", self.w_u),
            ("t_c", self.t_c),
            ("soft_penalty_weight", self.soft_penalty_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(param(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.t_c > 0.0) || self.rk4_steps == 0 {
            return Err(param("t_c and rk4_steps must be positive"));
        }
        if !(self.terminal_weight >= 0.0) {
            return Err(param("terminal weight must be >= 0"));
        }
        if self.restart_inputs.iter().any(|v| !v.is_finite()) {
            return Err(param("restart inputs must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpSolution {
    pub u0: f64,
    /// Full decision vector.
    pub w: Vec<f64>,
    /// Input sequence of each branch (root input first).
    pub branch_inputs: Vec<Vec<f64>>,
    /// Predicted states per branch, `N_p + 1` nodes each.
    pub predicted_states: Vec<Vec<KiteState>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

impl NlpSolution {
    /// Lowest predicted height over all branches and stages `1..=N_p`.
    pub fn min_predicted_height(&self, p: &KiteParams) -> f64 {
        self.predicted_states
            .iter()
            .flat_map(|xs| xs[1..].iter().map(|x| height(x, p)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Scenario-tree NMPC problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct MsNmpc {
    pub tree: ScenarioTree,
    pub cfg: OcpConfig,
    pub params: KiteParams,
}

impl MsNmpc {
    pub fn new(cfg: OcpConfig, params: KiteParams) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        Ok(Self {
            tree: build_tree(&cfg.tree)?,
            cfg,
            params,
        })
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.eta = eta;
        Self::new(cfg, self.params)
    }

    pub fn objective(&self, x0: KiteState, u_prev: f64) -> TreeObjective<'_> {
        TreeObjective {
            nmpc: self,
            x0,
            u_prev,
        }
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.tree.n_vars();
        (vec![-self.params.u_max; n], vec![self.params.u_max; n])
    }

    /// Solves from `x0`; `warm` is an initial decision vector (defaults to
    /// holding `u_prev`).
    pub fn solve(&self, x0: &KiteState, u_prev: f64, warm: Option<&[f64]>) -> NlpSolution {
        let (lb, ub) = self.bounds();
        let u_hold = u_prev.clamp(-self.params.u_max, self.params.u_max);
        let start = match warm {
            Some(w) if w.len() == self.tree.n_vars() => w.to_vec(),
            _ => vec![u_hold; self.tree.n_vars()],
        };
        let obj = self.objective(*x0, u_prev);
        let sol = match self.cfg.solver.method {
            SolverMethod::Newton => minimize_newton(&obj, &start, &lb, &ub, &self.cfg.solver),
            SolverMethod::Lbfgs => minimize_box(&obj, &start, &lb, &ub, &self.cfg.solver),
        };
        let (w, status) = if sol.status == SolveStatus::Fault {
            (vec![u_hold; self.tree.n_vars()], SolveStatus::Fault)
        } else {
            (sol.x, sol.status)
        };
        let predicted_states = (0..self.tree.n_branches())
            .map(|b| obj.branch_states(&w, b))
            .collect();
        NlpSolution {
            u0: w[0],
            branch_inputs: (0..self.tree.n_branches())
                .map(|b| self.tree.branch_inputs(&w, b))
                .collect(),
            predicted_states,
            objective: sol.f,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
            status,
            w,
        }
    }

    /// Shifts a previous solution one stage forward for warm starting.
    pub fn shift(&self, w: &[f64]) -> Vec<f64> {
        let t = &self.tree;
        let n_p = t.n_p;
        let mut out = w.to_vec();
        if n_p < 2 {
            return out;
        }
        let s = t.n_branches() as f64;
        out[0] = (0..t.n_branches()).map(|b| w[t.var_index(b, 1)]).sum::<f64>() / s;
        for b in 0..t.n_branches() {
            for k in 1..n_p - 1 {
                out[t.var_index(b, k)] = w[t.var_index(b, k + 1)];
            }
        }
        out
    }
}

/// Penalized objective of one OCP instance.
pub struct TreeObjective<'a> {
    nmpc: &'a MsNmpc,
    x0: KiteState,
    u_prev: f64,
}

fn in_domain(z: &Augmented, p: &KiteParams) -> bool {
    z.iter().all(|v| v.is_finite())
        && z[0].sin() > p.sin_theta_tol
        && glide_ratio(z[4], z[IDX_U], p) > 0.0
}

impl TreeObjective<'_> {
    fn step(&self, z: &Augmented) -> Augmented {
        let p = &self.nmpc.params;
        let h = self.nmpc.cfg.t_c / self.nmpc.cfg.rk4_steps as f64;
        let mut z = *z;
        for _ in 0..self.nmpc.cfg.rk4_steps {
            z = rk4_step(|s| augmented_rhs(s, p), &z, h);
        }
        z
    }

    /// One period with the Jacobian with respect to `(θ, φ, ψ, u)`; the
    /// branch parameters are constants here.
    fn step_jac(&self, x: &KiteState, u: f64, e0: f64, v0: f64) -> (KiteState, Matrix4<f64>) {
        let p = &self.nmpc.params;
        let h = self.nmpc.cfg.t_c / self.nmpc.cfg.rk4_steps as f64;
        let rhs = |s: &Vector4<f64>| {
            let (f, j) = augmented_rhs_jacobian(&augment(&KiteState::new(s[0], s[1], s[2]), s[3], e0, v0), p);
            (f.fixed_rows::<4>(0).into_owned(), j.fixed_view::<4, 4>(0, 0).into_owned())
        };
        let mut s = Vector4::new(x.theta, x.phi, x.psi, u);
        let mut jac = Matrix4::identity();
        for _ in 0..self.nmpc.cfg.rk4_steps {
            let (next, j) = rk4_step_with_jacobian(rhs, &s, h);
            s = next;
            jac = j * jac;
        }
        (KiteState::new(s[0], s[1], s[2]), jac)
    }

    fn penalty(&self, x: &KiteState) -> f64 {
        let c = &self.nmpc.cfg;
        let v = self.nmpc.params.h_min + c.eta - height(x, &self.nmpc.params);
        if v > 0.0 {
            c.soft_penalty_weight * v * v
        } else {
            0.0
        }
    }

    /// Predicted states of branch `b` (not domain checked).
    pub fn branch_states(&self, w: &[f64], b: usize) -> Vec<KiteState> {
        let t = &self.nmpc.tree;
        let br = t.branches[b];
        let mut xs = Vec::with_capacity(t.n_p + 1);
        xs.push(self.x0);
        let mut x = self.x0;
        for k in 0..t.n_p {
            let z = self.step(&augment(&x, w[t.var_index(b, k)], br.e0, br.v0));
            x = KiteState::new(z[0], z[1], z[2]);
            xs.push(x);
        }
        xs
    }

    fn branch_value(&self, w: &[f64], b: usize) -> f64 {
        let t = &self.nmpc.tree;
        let c = &self.nmpc.cfg;
        let p = &self.nmpc.params;
        let br = t.branches[b];
        let mut x = self.x0;
        let mut u_last = self.u_prev;
        let mut cost = 0.0;
        for k in 0..t.n_p {
            let u = w[t.var_index(b, k)];
            let z0 = augment(&x, u, br.e0, br.v0);
            if !in_domain(&z0, p) {
                return f64::INFINITY;
            }
            cost += -c.w_f * thrust(&x, br.v0, u, br.e0, p) + c.w_u * (u - u_last).powi(2);
            let z = self.step(&z0);
            x = KiteState::new(z[0], z[1], z[2]);
            cost += self.penalty(&x);
            u_last = u;
        }
        if !in_domain(&augment(&x, u_last, br.e0, br.v0), p) {
            return f64::INFINITY;
        }
        if c.terminal_weight > 0.0 {
            cost -= c.terminal_weight * c.w_f * thrust(&x, br.v0, u_last, br.e0, p);
        }
        cost
    }

    /// Branch cost; `g[k]` receives its derivative with respect to the
    /// branch's stage-`k` input (adjoint recursion).
    fn branch_value_grad(&self, w: &[f64], b: usize, g: &mut [f64]) -> f64 {
        let t = &self.nmpc.tree;
        let c = &self.nmpc.cfg;
        let p = &self.nmpc.params;
        let br = t.branches[b];
        let n = t.n_p;
        let u: Vec<f64> = (0..n).map(|k| w[t.var_index(b, k)]).collect();

        let mut xs = Vec::with_capacity(n + 1);
        let mut jac: Vec<(Matrix3<f64>, Vector3<f64>)> = Vec::with_capacity(n);
        xs.push(self.x0);
        for k in 0..n {
            let z0 = augment(&xs[k], u[k], br.e0, br.v0);
            if !in_domain(&z0, p) {
                return f64::INFINITY;
            }
            let (x, j) = self.step_jac(&xs[k], u[k], br.e0, br.v0);
            xs.push(x);
            jac.push((
                j.fixed_view::<3, 3>(0, 0).into_owned(),
                j.fixed_view::<3, 1>(0, 3).into_owned(),
            ));
        }
        if !in_domain(&augment(&xs[n], u[n - 1], br.e0, br.v0), p) {
            return f64::INFINITY;
        }

        let mut cost = 0.0;
        let mut grad_u = vec![0.0; n];
        // dℓ/dx of thrust terms, dpen/dx at stages 1..=n
        let mut lx = vec![Vector3::zeros(); n + 1];
        for k in 0..n {
            let (tf, dt) = thrust_with_gradient(&xs[k], br.v0, u[k], br.e0, p);
            let prev = if k == 0 { self.u_prev } else { u[k - 1] };
            cost += -c.w_f * tf + c.w_u * (u[k] - prev).powi(2);
            lx[k] += Vector3::new(-c.w_f * dt[0], -c.w_f * dt[1], 0.0);
            grad_u[k] += -c.w_f * dt[2] + 2.0 * c.w_u * (u[k] - prev);
            if k > 0 {
                grad_u[k - 1] -= 2.0 * c.w_u * (u[k] - prev);
            }
        }
        let h_lim = p.h_min + c.eta;
        for (k, x) in xs.iter().enumerate().skip(1) {
            let v = h_lim - height(x, p);
            if v > 0.0 {
                cost += c.soft_penalty_weight * v * v;
                let dh = height_gradient(x, p);
                let s = -2.0 * c.soft_penalty_weight * v;
                lx[k] += Vector3::new(s * dh[0], s * dh[1], 0.0);
            }
        }
        if c.terminal_weight > 0.0 {
            let (tf, dt) = thrust_with_gradient(&xs[n], br.v0, u[n - 1], br.e0, p);
            let s = -c.terminal_weight * c.w_f;
            cost += s * tf;
            lx[n] += Vector3::new(s * dt[0], s * dt[1], 0.0);
            grad_u[n - 1] += s * dt[2];
        }

        let mut lam = lx[n];
        for k in (0..n).rev() {
            let (a, bcol) = &jac[k];
            grad_u[k] += bcol.dot(&lam);
            lam = lx[k] + a.transpose() * lam;
        }
        g[..n].copy_from_slice(&grad_u);
        cost
    }
}

impl BoxObjective for TreeObjective<'_> {
    fn value(&self, w: &[f64]) -> f64 {
        (0..self.nmpc.tree.n_branches())
            .map(|b| self.branch_value(w, b))
            .sum()
    }

    fn value_grad(&self, w: &[f64], g: &mut [f64]) -> f64 {
        let t = &self.nmpc.tree;
        g.iter_mut().for_each(|v| *v = 0.0);
        let mut gb = vec![0.0; t.n_p];
        let mut total = 0.0;
        for b in 0..t.n_branches() {
            total += self.branch_value_grad(w, b, &mut gb);
            if !total.is_finite() {
                return f64::INFINITY;
            }
            for (k, v) in gb.iter().enumerate() {
                g[t.var_index(b, k)] += v;
            }
        }
        total
    }
}

impl ArrowheadObjective for TreeObjective<'_> {
    fn layout(&self) -> (usize, usize) {
        (self.nmpc.tree.n_branches(), self.nmpc.tree.n_p - 1)
    }

    fn value(&self, w: &[f64]) -> f64 {
        BoxObjective::value(self, w)
    }

    fn element_grads(&self, w: &[f64], ge: &mut [Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (b, g) in ge.iter_mut().enumerate() {
            total += self.branch_value_grad(w, b, g);
            if !total.is_finite() {
                return f64::INFINITY;
            }
        }
        total
    }
}

/// Scenario-tree NMPC feedback law with shifted warm starts.
#[derive(Debug, Clone)]
pub struct KappaMs {
    pub nmpc: MsNmpc,
    warm: Option<Vec<f64>>,
    steps: usize,
    pub last: Option<NlpSolution>,
}

impl KappaMs {
    pub fn new(nmpc: MsNmpc) -> Self {
        Self {
            nmpc,
            warm: None,
            steps: 0,
            last: None,
        }
    }

    pub fn solve(&mut self, x_hat: &KiteState, u_prev: f64) -> &NlpSolution {
        let warm = self.warm.as_deref().map(|w| self.nmpc.shift(w));
        let mut sol = self.nmpc.solve(x_hat, u_prev, warm.as_deref());
        let every = self.nmpc.cfg.restart_every;
        if every > 0 && self.steps % every == 0 {
            let n = self.nmpc.tree.n_vars();
            for &c in &self.nmpc.cfg.restart_inputs {
                let alt = self.nmpc.solve(x_hat, u_prev, Some(&vec![c; n]));
                if alt.status.is_ok() && (!sol.status.is_ok() || alt.objective < sol.objective) {
                    sol = alt;
                }
            }
        }
        self.steps += 1;
        self.warm = (sol.status != SolveStatus::Fault).then(|| sol.w.clone());
        self.last.insert(sol)
    }
}

impl Controller for KappaMs {
    fn id(&self) -> String {
        format!("ms(eta={})", self.nmpc.cfg.eta)
    }

    fn reset(&mut self) {
        self.warm = None;
        self.steps = 0;
        self.last = None;
    }

    fn control(&mut self, x_hat: &KiteState, u_prev: f64) -> ControlAction {
        let u_max = self.nmpc.params.u_max;
        let sol = self.solve(x_hat, u_prev);
        ControlAction {
            u: sol.u0.clamp(-u_max, u_max),
            ok: sol.status.is_ok(),
        }
    }
}

/// One cold solve of the feedback law.
pub fn kappa_ms(nmpc: &MsNmpc, x_hat: &KiteState, u_prev: f64) -> f64 {
    nmpc.solve(x_hat, u_prev, None)
        .u0
        .clamp(-nmpc.params.u_max, nmpc.params.u_max)
}
