//! Extended Kalman filter over `[θ, φ, ψ, E0, v0]` with random-walk
//! parameters and measurements of `(θ, φ, v0)`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::plant::integrate::rk4_step_with_jacobian;
use crate::plant::kite::{
    augmented_rhs_jacobian, check_domain, glide_ratio, Augmented, KiteParams, KiteState, IDX_E0,
    IDX_U, IDX_V0,
};
use crate::plant::{Estimator, Observation};

pub type Vector5 = SVector<f64, 5>;
pub type Matrix5 = SMatrix<f64, 5, 5>;
type Matrix3x5 = SMatrix<f64, 3, 5>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    pub p0_diag: [f64; 5],
    pub q_diag: [f64; 5],
    pub r_diag: [f64; 3],
    pub t_ekf: f64,
    /// RK4 steps per prediction.
    pub substeps: usize,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            p0_diag: [1e-2, 1e-2, 1e-2, 1.0, 2e-1],
            q_diag: [1e-5, 1e-5, 1e-4, 1e-5, 3e-3],
            r_diag: [1e-2, 1e-2, 5e-2],
            t_ekf: 0.05,
            substeps: 1,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self.p0_diag.iter().chain(&self.q_diag).chain(&self.r_diag);
        if all.clone().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(param("EKF covariances must be finite and nonnegative"));
        }
        if !(self.t_ekf > 0.0) || self.substeps == 0 {
            return Err(param("EKF period and substeps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub x: Vector5,
    pub p: Matrix5,
}

fn to_augmented(x: &Vector5, u: f64) -> Augmented {
    Augmented::from_column_slice(&[x[0], x[1], x[2], u, x[3], x[4]])
}

fn from_augmented(z: &Augmented) -> Vector5 {
    Vector5::new(z[0], z[1], z[2], z[IDX_E0], z[IDX_V0])
}

const KEEP: [usize; 5] = [0, 1, 2, IDX_E0, IDX_V0];

/// Mean propagation over `t_ekf` and its Jacobian.
pub fn propagate(
    x: &Vector5,
    u: f64,
    cfg: &EkfConfig,
    p: &KiteParams,
) -> Result<(Vector5, Matrix5)> {
    let h = cfg.t_ekf / cfg.substeps as f64;
    let mut z = to_augmented(x, u);
    let mut jac = SMatrix::<f64, 6, 6>::identity();
    for _ in 0..cfg.substeps {
        let xs = KiteState::new(z[0], z[1], z[2]);
        check_domain(&xs, glide_ratio(z[IDX_E0], u, p), p)?;
        let (next, j) = rk4_step_with_jacobian(|s| augmented_rhs_jacobian(s, p), &z, h);
        z = next;
        jac = j * jac;
    }
    debug_assert_eq!(z[IDX_U], u);
    let f = Matrix5::from_fn(|i, j| jac[(KEEP[i], KEEP[j])]);
    Ok((from_augmented(&z), f))
}

pub fn ekf_predict(s: &EkfState, u: f64, cfg: &EkfConfig, p: &KiteParams) -> Result<EkfState> {
    let (x, f) = propagate(&s.x, u, cfg, p)?;
    let q = Matrix5::from_diagonal(&Vector5::from(cfg.q_diag));
    let cov = f * s.p * f.transpose() + q;
    Ok(EkfState { x, p: make_psd(cov) })
}

pub fn measurement_matrix() -> Matrix3x5 {
    let mut h = Matrix3x5::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h[(2, 4)] = 1.0;
    h
}

pub fn ekf_update(s: &EkfState, y: &[f64; 3], cfg: &EkfConfig) -> Result<EkfState> {
    let h = measurement_matrix();
    let r = Matrix3::from_diagonal(&Vector3::from(cfg.r_diag));
    let innovation = Vector3::from(*y) - h * s.x;
    let s_cov = h * s.p * h.transpose() + r;
    let s_inv = s_cov
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| s_cov.try_inverse())
        .ok_or_else(|| Error::Numerical("singular innovation covariance".into()))?;
    let k = s.p * h.transpose() * s_inv;
    let x = s.x + k * innovation;
    let a = Matrix5::identity() - k * h;
    let cov = a * s.p * a.transpose() + k * r * k.transpose();
    if !x.iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite EKF update".into()));
    }
    Ok(EkfState { x, p: make_psd(cov) })
}

/// Symmetrizes and, if needed, clips negative eigenvalues to zero.
fn make_psd(m: Matrix5) -> Matrix5 {
    let sym = (m + m.transpose()) * 0.5;
    if sym.cholesky().is_some() {
        return sym;
    }
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    let v = eig.eigenvectors;
    let out = v * Matrix5::from_diagonal(&d) * v.transpose();
    (out + out.transpose()) * 0.5
}

pub fn init_estimate(x_true: &KiteState, e0: f64, v0: f64, deltas: &[f64; 5], cfg: &EkfConfig) -> EkfState {
    let x = Vector5::new(
        x_true.theta * deltas[0],
        x_true.phi * deltas[1],
        x_true.psi * deltas[2],
        e0 * deltas[3],
        v0 * deltas[4],
    );
    EkfState {
        x,
        p: Matrix5::from_diagonal(&Vector5::from(cfg.p0_diag)),
    }
}

/// Smallest eigenvalue of the covariance.
pub fn min_eigenvalue(p: &Matrix5) -> f64 {
    p.symmetric_eigen().eigenvalues.min()
}

/// [`Estimator`] backed by the EKF.
#[derive(Debug, Clone)]
pub struct Ekf {
    pub cfg: EkfConfig,
    pub params: KiteParams,
    state: Option<EkfState>,
}

impl Ekf {
    pub fn new(cfg: EkfConfig, params: KiteParams) -> Self {
        Self {
            cfg,
            params,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&EkfState> {
        self.state.as_ref()
    }
}

impl Estimator for Ekf {
    fn initialize(&mut self, x0: &KiteState, e0: f64, v0: f64, deltas: &[f64; 5]) -> Result<()> {
        self.cfg.validate()?;
        self.state = Some(init_estimate(x0, e0, v0, deltas, &self.cfg));
        Ok(())
    }

    fn step(&mut self, u: f64, obs: &Observation) -> Result<()> {
        let s = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Numerical("EKF used before initialization".into()))?;
        let pred = ekf_predict(s, u, &self.cfg, &self.params)?;
        self.state = Some(ekf_update(&pred, &obs.y, &self.cfg)?);
        Ok(())
    }

    fn estimate(&self) -> [f64; 5] {
        self.state
            .as_ref()
            .map(|s| [s.x[0], s.x[1], s.x[2], s.x[3], s.x[4]])
            .unwrap_or([f64::NAN; 5])
    }
}
