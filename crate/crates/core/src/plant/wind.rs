//! Turbulent wind speed model without shear.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindParams {
    pub k_sigma_v: f64,
    pub l_v: f64,
    pub t_v: f64,
    /// Mean wind speed, m/s. Sampled per scenario.
    pub v_m: f64,
}

impl Default for WindParams {
    fn default() -> Self {
        Self {
            k_sigma_v: 0.14,
            l_v: 100.0,
            t_v: 0.15,
            v_m: 8.0,
        }
    }
}

/// Constants derived from [`WindParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindConstants {
    pub sigma_v: f64,
    pub v_bar_n: f64,
    pub tau_f: f64,
    pub k_f: f64,
    pub c_v: f64,
}

impl WindParams {
    pub fn with_mean(self, v_m: f64) -> Self {
        Self { v_m, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_sigma_v", self.k_sigma_v),
            ("l_v", self.l_v),
            ("t_v", self.t_v),
            ("v_m", self.v_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param(format!("wind parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn constants(&self) -> WindConstants {
        let sigma_v = self.k_sigma_v * self.v_m;
        let tau_f = self.l_v / self.v_m;
        let k_f = (1.49 * tau_f / self.t_v).sqrt();
        WindConstants {
            sigma_v,
            v_bar_n: -sigma_v / (2.0 * self.v_m),
            tau_f,
            k_f,
            c_v: k_f / tau_f,
        }
    }

    /// Wind speed for a given turbulence state.
    pub fn speed(&self, p_v: f64) -> f64 {
        let c = self.constants();
        self.v_m + c.v_bar_n + c.sigma_v * c.c_v * p_v
    }

    /// `ṗ_v = -p_v / τ_F + w_tb`.
    pub fn p_dot(&self, p_v: f64, w_tb: f64) -> f64 {
        -p_v / self.constants().tau_f + w_tb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindState {
    pub p_v: f64,
    pub w_tb: f64,
}

/// Advances the turbulence state by `dt` (one RK4 step) with the white-noise
/// sample held at `noise`; returns the new state and the wind speed at its end.
pub fn wind_step(ws: WindState, wp: &WindParams, dt: f64, noise: f64) -> (WindState, f64) {
    let tau = wp.constants().tau_f;
    let f = |p: f64| -p / tau + noise;
    let k1 = f(ws.p_v);
    let k2 = f(ws.p_v + 0.5 * dt * k1);
    let k3 = f(ws.p_v + 0.5 * dt * k2);
    let k4 = f(ws.p_v + dt * k3);
    let p_v = ws.p_v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    (WindState { p_v, w_tb: noise }, wp.speed(p_v))
}
