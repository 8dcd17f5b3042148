//! Three-state towing-kite model in spherical coordinates.

use nalgebra::{SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Known plant parameters. Tether length and kite area default to the usual
/// 400 m / 300 m² scale of this model family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KiteParams {
    pub c_tilde: f64,
    pub beta: f64,
    pub rho: f64,
    pub h_min: f64,
    pub tether_length: f64,
    pub area: f64,
    pub u_max: f64,
    /// `sin θ` below this is treated as a domain fault.
    pub sin_theta_tol: f64,
}

impl Default for KiteParams {
    fn default() -> Self {
        Self {
            c_tilde: 0.028,
            beta: 0.0,
            rho: 1.0,
            h_min: 100.0,
            tether_length: 400.0,
            area: 300.0,
            u_max: 10.0,
            sin_theta_tol: 1e-6,
        }
    }
}

impl KiteParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_tilde", self.c_tilde),
            ("rho", self.rho),
            ("h_min", self.h_min),
            ("tether_length", self.tether_length),
            ("area", self.area),
            ("u_max", self.u_max),
            ("sin_theta_tol", self.sin_theta_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param(format!("kite parameter {name} must be positive, got {v}")));
            }
        }
        if self.tether_length <= self.h_min {
            return Err(param(format!(
                "tether length {} cannot reach the minimum height {}",
                self.tether_length, self.h_min
            )));
        }
        Ok(())
    }
}

/// Zenith angle, azimuth and orientation, in radians. `psi` is unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KiteState {
    pub theta: f64,
    pub phi: f64,
    pub psi: f64,
}

impl KiteState {
    pub fn new(theta: f64, phi: f64, psi: f64) -> Self {
        Self { theta, phi, psi }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.theta, self.phi, self.psi)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.phi.is_finite() && self.psi.is_finite()
    }
}

impl From<Vector3<f64>> for KiteState {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Augmented vector `[θ, φ, ψ, u, E0, v0]` with the last three held constant.
pub type Augmented = SVector<f64, 6>;
pub type AugmentedJacobian = SMatrix<f64, 6, 6>;

pub const IDX_U: usize = 3;
pub const IDX_E0: usize = 4;
pub const IDX_V0: usize = 5;

/// `E = E0 - c̃ u²`.
pub fn glide_ratio(e0: f64, u: f64, p: &KiteParams) -> f64 {
    e0 - p.c_tilde * u * u
}

pub(crate) fn check_domain(x: &KiteState, e: f64, p: &KiteParams) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("non-finite kite state {x:?}")));
    }
    if x.theta.sin() <= p.sin_theta_tol {
        return Err(Error::Domain(format!(
            "sin(theta) = {:e} at theta = {}",
            x.theta.sin(),
            x.theta
        )));
    }
    if !(e > 0.0) {
        return Err(Error::Domain(format!("non-positive glide ratio {e}")));
    }
    Ok(())
}

/// Angle rates `(θ̇, φ̇, ψ̇)`.
pub fn kite_rhs(x: &KiteState, u: f64, v0: f64, e0: f64, p: &KiteParams) -> Result<Vector3<f64>> {
    let e = glide_ratio(e0, u, p);
    check_domain(x, e, p)?;
    Ok(rhs_unchecked(x.theta, x.psi, u, e, v0, p))
}

#[inline]
fn rhs_unchecked(theta: f64, psi: f64, u: f64, e: f64, v0: f64, p: &KiteParams) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let va_over_l = v0 * e * ct / p.tether_length;
    let theta_dot = va_over_l * (cp - st / ct / e);
    let phi_dot = -va_over_l / st * sp;
    let psi_dot = va_over_l * u + phi_dot * ct;
    Vector3::new(theta_dot, phi_dot, psi_dot)
}

/// Right-hand side of the augmented system and its Jacobian.
///
/// Rates are written in the division-free form
/// `θ̇ = (v0/L)(E cosθ cosψ - sinθ)`, `φ̇ = -(v0 E/L) cotθ sinψ`,
/// `ψ̇ = (v0 E/L) cosθ u + φ̇ cosθ`, which is algebraically identical.
pub fn augmented_rhs_jacobian(z: &Augmented, p: &KiteParams) -> (Augmented, AugmentedJacobian) {
    let (theta, psi, u, e0, v0) = (z[0], z[2], z[IDX_U], z[IDX_E0], z[IDX_V0]);
    let e = glide_ratio(e0, u, p);
    let l = p.tether_length;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let cot = ct / st;

    let th_dot = v0 / l * (e * ct * cp - st);
    let ph_dot = -(v0 * e / l) * cot * sp;
    let ps_dot = (v0 * e / l) * ct * u + ph_dot * ct;

    // partials with respect to (θ, ψ, E, v0) holding u explicit where it appears
    let dth_dtheta = v0 / l * (-e * st * cp - ct);
    let dth_dpsi = -v0 / l * e * ct * sp;
    let dth_de = v0 / l * ct * cp;
    let dth_dv0 = (e * ct * cp - st) / l;

    let dph_dtheta = (v0 * e / l) * sp / (st * st);
    let dph_dpsi = -(v0 * e / l) * cot * cp;
    let dph_de = -(v0 / l) * cot * sp;
    let dph_dv0 = -(e / l) * cot * sp;

    let dps_dtheta = -(v0 * e / l) * st * u + dph_dtheta * ct - ph_dot * st;
    let dps_dpsi = dph_dpsi * ct;
    let dps_de = (v0 / l) * ct * u + dph_de * ct;
    let dps_du_explicit = (v0 * e / l) * ct;
    let dps_dv0 = (e / l) * ct * u + dph_dv0 * ct;

    let de_du = -2.0 * p.c_tilde * u;

    let mut f = Augmented::zeros();
    f[0] = th_dot;
    f[1] = ph_dot;
    f[2] = ps_dot;

    let mut j = AugmentedJacobian::zeros();
    j[(0, 0)] = dth_dtheta;
    j[(0, 2)] = dth_dpsi;
    j[(0, IDX_U)] = dth_de * de_du;
    j[(0, IDX_E0)] = dth_de;
    j[(0, IDX_V0)] = dth_dv0;

    j[(1, 0)] = dph_dtheta;
    j[(1, 2)] = dph_dpsi;
    j[(1, IDX_U)] = dph_de * de_du;
    j[(1, IDX_E0)] = dph_de;
    j[(1, IDX_V0)] = dph_dv0;

    j[(2, 0)] = dps_dtheta;
    j[(2, 2)] = dps_dpsi;
    j[(2, IDX_U)] = dps_du_explicit + dps_de * de_du;
    j[(2, IDX_E0)] = dps_de;
    j[(2, IDX_V0)] = dps_dv0;
    (f, j)
}

/// Augmented right-hand side without the Jacobian.
pub fn augmented_rhs(z: &Augmented, p: &KiteParams) -> Augmented {
    let e = glide_ratio(z[IDX_E0], z[IDX_U], p);
    let r = rhs_unchecked(z[0], z[2], z[IDX_U], e, z[IDX_V0], p);
    let mut f = Augmented::zeros();
    f.fixed_rows_mut::<3>(0).copy_from(&r);
    f
}

pub fn augment(x: &KiteState, u: f64, e0: f64, v0: f64) -> Augmented {
    Augmented::from_column_slice(&[x.theta, x.phi, x.psi, u, e0, v0])
}

/// Tether thrust in newtons.
pub fn thrust(x: &KiteState, v0: f64, u: f64, e0: f64, p: &KiteParams) -> f64 {
    let e = glide_ratio(e0, u, p);
    let (st, ct) = x.theta.sin_cos();
    let (sb, cb) = p.beta.sin_cos();
    0.5 * p.rho
        * v0
        * v0
        * p.area
        * ct
        * ct
        * (e + 1.0)
        * (e * e + 1.0).sqrt()
        * (ct * cb + st * sb * x.phi.sin())
}

/// Thrust and its partials with respect to `(θ, φ, u)`.
pub fn thrust_with_gradient(
    x: &KiteState,
    v0: f64,
    u: f64,
    e0: f64,
    p: &KiteParams,
) -> (f64, [f64; 3]) {
    let e = glide_ratio(e0, u, p);
    let (st, ct) = x.theta.sin_cos();
    let (sb, cb) = p.beta.sin_cos();
    let (sphi, cphi) = x.phi.sin_cos();
    let k = 0.5 * p.rho * v0 * v0 * p.area;
    let root = (e * e + 1.0).sqrt();
    let g = (e + 1.0) * root;
    let dg_de = root + (e + 1.0) * e / root;
    let m = ct * cb + st * sb * sphi;
    let c2 = ct * ct;
    let t = k * c2 * g * m;
    let dt_dtheta = k * g * (-2.0 * ct * st * m + c2 * (-st * cb + ct * sb * sphi));
    let dt_dphi = k * g * c2 * st * sb * cphi;
    let dt_du = k * c2 * m * dg_de * (-2.0 * p.c_tilde * u);
    (t, [dt_dtheta, dt_dphi, dt_du])
}

/// Kite height above ground, `L sinθ cosφ`.
pub fn height(x: &KiteState, p: &KiteParams) -> f64 {
    p.tether_length * x.theta.sin() * x.phi.cos()
}

pub fn height_gradient(x: &KiteState, p: &KiteParams) -> [f64; 2] {
    let (st, ct) = x.theta.sin_cos();
    let (sp, cp) = x.phi.sin_cos();
    [p.tether_length * ct * cp, -p.tether_length * st * sp]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    // Literal transcription of the model equations, kept deliberately naive.
    fn reference_rhs(theta: f64, psi: f64, u: f64, v0: f64, e0: f64, l: f64, c: f64) -> [f64; 3] {
        let e = e0 - c * u * u;
        let va = v0 * e * theta.cos();
        let theta_dot = va / l * (psi.cos() - theta.tan() / e);
        let phi_dot = -va / (l * theta.sin()) * psi.sin();
        let psi_dot = va / l * u + phi_dot * theta.cos();
        [theta_dot, phi_dot, psi_dot]
    }

    fn reference_thrust(theta: f64, phi: f64, v0: f64, e: f64, a: f64, rho: f64, beta: f64) -> f64 {
        0.5 * rho * v0.powi(2) * a * theta.cos().powi(2) * (e + 1.0) * (e.powi(2) + 1.0).sqrt()
            * (theta.cos() * beta.cos() + theta.sin() * beta.sin() * phi.sin())
    }

    #[test]
    fn glide_ratio_examples() {
        let p = KiteParams::default();
        assert_eq!(glide_ratio(5.0, 0.0, &p), 5.0);
        assert!((glide_ratio(5.0, 10.0, &p) - 2.2).abs() < 1e-12);
        assert!((glide_ratio(4.0, 10.0, &p) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn rhs_matches_reference() {
        let p = KiteParams::default();
        let x = KiteState::new(29f64.to_radians(), 0.0, 0.0);
        let f = kite_rhs(&x, 0.0, 8.0, 5.0, &p).unwrap();
        let r = reference_rhs(x.theta, x.psi, 0.0, 8.0, 5.0, 400.0, 0.028);
        for i in 0..3 {
            assert!((f[i] - r[i]).abs() < 1e-12, "{i}: {} vs {}", f[i], r[i]);
        }
        for &(th, ph, ps, u) in &[(0.4, 0.2, 1.3, 3.0), (1.1, -0.5, -2.0, -7.5), (0.2, 0.0, 3.0, 9.9)] {
            let x = KiteState::new(th, ph, ps);
            let f = kite_rhs(&x, u, 7.3, 4.6, &p).unwrap();
            let r = reference_rhs(th, ps, u, 7.3, 4.6, 400.0, 0.028);
            let (fa, _) = augmented_rhs_jacobian(&augment(&x, u, 4.6, 7.3), &p);
            for i in 0..3 {
                assert!((f[i] - r[i]).abs() < 1e-12);
                assert!((fa[i] - r[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rhs_equilibrium_and_structure() {
        let p = KiteParams::default();
        let e0: f64 = 5.0;
        let x = KiteState::new(e0.atan(), 0.3, 0.0);
        let f = kite_rhs(&x, 0.0, 8.0, e0, &p).unwrap();
        assert!(f[0].abs() < 1e-15);
        assert!(f[1].abs() < 1e-15);
        let x = KiteState::new(0.7, 0.1, 0.9);
        let f = kite_rhs(&x, 0.0, 8.0, e0, &p).unwrap();
        assert!((f[2] - f[1] * x.theta.cos()).abs() < 1e-15);
    }

    #[test]
    fn rhs_domain_faults() {
        let p = KiteParams::default();
        assert!(matches!(
            kite_rhs(&KiteState::new(0.0, 0.0, 0.0), 0.0, 8.0, 5.0, &p),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            kite_rhs(&KiteState::new(0.5, 0.0, 0.0), 10.0, 8.0, 2.0, &p),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = KiteParams::default();
        let points = [
            [0.5, 0.1, 0.2, 1.0, 5.0, 8.0],
            [1.2, -0.7, 2.5, -6.0, 4.2, 6.5],
            [0.3, 0.4, -1.4, 9.0, 5.9, 9.7],
        ];
        for pt in points {
            let z = Augmented::from_column_slice(&pt);
            let (_, j) = augmented_rhs_jacobian(&z, &p);
            for c in 0..6 {
                let h = 1e-6;
                let mut zp = z;
                let mut zm = z;
                zp[c] += h;
                zm[c] -= h;
                let fd = (augmented_rhs(&zp, &p) - augmented_rhs(&zm, &p)) / (2.0 * h);
                for r in 0..6 {
                    assert!((fd[r] - j[(r, c)]).abs() < 1e-7, "J[{r},{c}] {} vs {}", j[(r, c)], fd[r]);
                }
            }
        }
    }

    #[test]
    fn thrust_examples() {
        let p = KiteParams::default();
        let x = KiteState::new(29f64.to_radians(), 0.0, 0.0);
        let t = thrust(&x, 8.0, 0.0, 5.0, &p);
        let r = reference_thrust(x.theta, 0.0, 8.0, 5.0, 300.0, 1.0, 0.0);
        assert!(((t - r) / r).abs() < 1e-9);
        // β = 0 removes the azimuth dependence
        let x2 = KiteState::new(x.theta, 0.8, 0.0);
        assert_eq!(thrust(&x2, 8.0, 0.0, 5.0, &p), t);
        let top = KiteState::new(FRAC_PI_2, 0.0, 0.0);
        assert!(thrust(&top, 8.0, 0.0, 5.0, &p).abs() < 1e-20 * t.max(1.0) + 1e-9);

        let pb = KiteParams { beta: 0.3, ..p };
        let x3 = KiteState::new(0.6, -0.4, 0.0);
        let t3 = thrust(&x3, 7.0, 2.0, 4.5, &pb);
        let r3 = reference_thrust(0.6, -0.4, 7.0, 4.5 - 0.028 * 4.0, 300.0, 1.0, 0.3);
        assert!(((t3 - r3) / r3).abs() < 1e-12);
    }

    #[test]
    fn thrust_gradient_matches_differences() {
        let p = KiteParams { beta: 0.2, ..KiteParams::default() };
        let x = KiteState::new(0.45, 0.3, 0.0);
        let (t, g) = thrust_with_gradient(&x, 8.0, 3.0, 5.0, &p);
        assert!((t - thrust(&x, 8.0, 3.0, 5.0, &p)).abs() < 1e-12 * t);
        let h = 1e-6;
        let fd_theta = (thrust(&KiteState::new(x.theta + h, x.phi, 0.0), 8.0, 3.0, 5.0, &p)
            - thrust(&KiteState::new(x.theta - h, x.phi, 0.0), 8.0, 3.0, 5.0, &p))
            / (2.0 * h);
        let fd_phi = (thrust(&KiteState::new(x.theta, x.phi + h, 0.0), 8.0, 3.0, 5.0, &p)
            - thrust(&KiteState::new(x.theta, x.phi - h, 0.0), 8.0, 3.0, 5.0, &p))
            / (2.0 * h);
        let fd_u = (thrust(&x, 8.0, 3.0 + h, 5.0, &p) - thrust(&x, 8.0, 3.0 - h, 5.0, &p)) / (2.0 * h);
        assert!(((g[0] - fd_theta) / fd_theta).abs() < 1e-6);
        assert!(((g[1] - fd_phi) / fd_phi).abs() < 1e-6);
        assert!(((g[2] - fd_u) / fd_u).abs() < 1e-6);
    }

    #[test]
    fn height_examples() {
        let p = KiteParams::default();
        assert!((height(&KiteState::new(FRAC_PI_2, 0.0, 0.0), &p) - 400.0).abs() < 1e-12);
        assert!(height(&KiteState::new(0.5, FRAC_PI_2, 0.0), &p).abs() < 1e-12);
        assert!(height(&KiteState::new(0.5, -FRAC_PI_2, 0.0), &p).abs() < 1e-12);
        let h = height(&KiteState::new(29f64.to_radians(), 10f64.to_radians(), 0.0), &p);
        assert!((h - 190.99).abs() < 0.02, "{h}");
    }

    #[test]
    fn params_validation() {
        assert!(KiteParams::default().validate().is_ok());
        let bad = KiteParams { tether_length: 90.0, ..KiteParams::default() };
        assert!(bad.validate().is_err());
        let bad = KiteParams { area: -1.0, ..KiteParams::default() };
        assert!(bad.validate().is_err());
    }
}
