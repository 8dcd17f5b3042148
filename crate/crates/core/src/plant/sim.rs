//! Closed-loop simulation of one scenario with one controller and estimator.

use std::collections::VecDeque;

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use super::integrate::try_rk4_step;
use super::kite::{height, kite_rhs, thrust, KiteParams, KiteState};
use super::wind::WindParams;
use crate::error::{param, Error, Result};
use crate::scenario::Scenario;
use crate::trajectory::TrajectoryRecord;

const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Control period, s.
    pub t_c: f64,
    /// Estimator period, s.
    pub t_ekf: f64,
    /// Integrator step, s.
    pub substep: f64,
    /// Number of control steps.
    pub n_sim: usize,
    /// Time between computing an input and applying it, s.
    pub input_delay: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_c: 0.15,
            t_ekf: 0.05,
            substep: 0.05,
            n_sim: 400,
            input_delay: 0.0,
        }
    }
}

fn integer_ratio(a: f64, b: f64, what: &str) -> Result<usize> {
    let q = a / b;
    let n = q.round();
    if n < 1.0 || (q - n).abs() > 1e-6 {
        return Err(param(format!("{what}: {a} is not an integer multiple of {b}")));
    }
    Ok(n as usize)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_c", self.t_c), ("t_ekf", self.t_ekf), ("substep", self.substep)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_sim == 0 {
            return Err(param("n_sim must be >= 1"));
        }
        if !(self.input_delay >= 0.0 && self.input_delay.is_finite()) {
            return Err(param(format!("input delay must be >= 0, got {}", self.input_delay)));
        }
        self.estimator_steps_per_control()?;
        self.substeps_per_estimator()?;
        Ok(())
    }

    pub fn estimator_steps_per_control(&self) -> Result<usize> {
        integer_ratio(self.t_c, self.t_ekf, "t_c / t_ekf")
    }

    pub fn substeps_per_estimator(&self) -> Result<usize> {
        integer_ratio(self.t_ekf, self.substep, "t_ekf / substep")
    }

    pub fn horizon(&self) -> f64 {
        self.n_sim as f64 * self.t_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlAction {
    pub u: f64,
    /// False if the underlying solver did not converge.
    pub ok: bool,
}

/// Feedback law queried once per control period.
pub trait Controller: Send {
    fn id(&self) -> String;
    /// Clears any warm-start memory before a new closed loop.
    fn reset(&mut self) {}
    fn control(&mut self, x_hat: &KiteState, u_prev: f64) -> ControlAction;
}

/// Applies a fixed input.
#[derive(Debug, Clone)]
pub struct ConstantController(pub f64);

impl Controller for ConstantController {
    fn id(&self) -> String {
        format!("const({})", self.0)
    }

    fn control(&mut self, _: &KiteState, _: f64) -> ControlAction {
        ControlAction { u: self.0, ok: true }
    }
}

/// What the estimator sees at one sampling instant. `truth` is only used by
/// state-feedback estimators.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub y: [f64; 3],
    pub truth: KiteState,
    pub e0: f64,
    pub v0: f64,
}

/// Produces the augmented estimate `[θ, φ, ψ, E0, v0]`.
pub trait Estimator: Send {
    fn initialize(&mut self, x0: &KiteState, e0: f64, v0: f64, deltas: &[f64; 5]) -> Result<()>;
    /// Propagates over one estimator period with input `u`, then corrects.
    fn step(&mut self, u: f64, obs: &Observation) -> Result<()>;
    fn estimate(&self) -> [f64; 5];

    fn state_estimate(&self) -> KiteState {
        let e = self.estimate();
        KiteState::new(e[0], e[1], e[2])
    }
}

/// Passes the true state through.
#[derive(Debug, Clone, Default)]
pub struct StateFeedback {
    x: [f64; 5],
}

impl Estimator for StateFeedback {
    fn initialize(&mut self, x0: &KiteState, e0: f64, v0: f64, _: &[f64; 5]) -> Result<()> {
        self.x = [x0.theta, x0.phi, x0.psi, e0, v0];
        Ok(())
    }

    fn step(&mut self, _: f64, obs: &Observation) -> Result<()> {
        let t = obs.truth;
        self.x = [t.theta, t.phi, t.psi, obs.e0, obs.v0];
        Ok(())
    }

    fn estimate(&self) -> [f64; 5] {
        self.x
    }
}

/// Input applied to the plant, with commands becoming active after the delay.
struct InputSchedule {
    current: f64,
    pending: VecDeque<(f64, f64)>,
}

impl InputSchedule {
    fn activate_until(&mut self, t: f64) {
        while let Some(&(ts, u)) = self.pending.front() {
            if ts <= t + TIME_TOL {
                self.current = u;
                self.pending.pop_front();
            } else {
                break;
            }
        }
    }
}

struct Plant<'a> {
    p: &'a KiteParams,
    wp: WindParams,
    tau_f: f64,
    e0: f64,
}

impl Plant<'_> {
    fn rhs(&self, s: &Vector4<f64>, u: f64, w_tb: f64) -> Result<Vector4<f64>> {
        let x = KiteState::new(s[0], s[1], s[2]);
        let r = kite_rhs(&x, u, self.wp.speed(s[3]), self.e0, self.p)?;
        Ok(Vector4::new(r[0], r[1], r[2], -s[3] / self.tau_f + w_tb))
    }

    /// Integrates `[θ, φ, ψ, p_v]` over `[t0, t0 + h]`, splitting the step at
    /// input switching instants.
    fn advance(
        &self,
        s: Vector4<f64>,
        t0: f64,
        h: f64,
        w_tb: f64,
        inputs: &mut InputSchedule,
    ) -> Result<Vector4<f64>> {
        let end = t0 + h;
        let mut t = t0;
        let mut s = s;
        loop {
            inputs.activate_until(t);
            let switch = inputs
                .pending
                .front()
                .map(|p| p.0)
                .filter(|&ts| ts < end - TIME_TOL);
            let stop = switch.unwrap_or(end);
            let u = inputs.current;
            s = try_rk4_step(|z| self.rhs(z, u, w_tb), &s, stop - t)?;
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Domain("non-finite plant state".into()));
            }
            t = stop;
            if switch.is_none() {
                return Ok(s);
            }
        }
    }
}

/// Simulates `cfg.n_sim` control periods of one scenario.
///
/// Domain faults do not abort: they end the run early and are recorded in
/// [`TrajectoryRecord::fault`].
pub fn simulate_closed_loop(
    scenario: &Scenario,
    controller: &mut dyn Controller,
    estimator: &mut dyn Estimator,
    cfg: &SimConfig,
    p: &KiteParams,
    wind: &WindParams,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    p.validate()?;
    let n_e = cfg.estimator_steps_per_control()?;
    let n_sub = cfg.substeps_per_estimator()?;
    if scenario.w_tb_seq.len() < cfg.n_sim || scenario.meas_noise_seq.len() < cfg.n_sim * n_e {
        return Err(param(format!(
            "scenario {} noise sequences too short for {} control steps",
            scenario.id, cfg.n_sim
        )));
    }
    let wp = wind.with_mean(scenario.v_m);
    wp.validate()?;
    let plant = Plant {
        p,
        wp,
        tau_f: wp.constants().tau_f,
        e0: scenario.e0,
    };

    let mut rec = TrajectoryRecord::new(scenario, controller.id(), *p, *cfg, wp);
    let x0 = scenario.x0;
    let mut s = Vector4::new(x0.theta, x0.phi, x0.psi, scenario.p_v0);
    let v0_init = wp.speed(scenario.p_v0);

    controller.reset();
    if let Err(e) = estimator.initialize(&x0, scenario.e0, v0_init, &scenario.init_deltas) {
        rec.fault = Some(e.to_string());
        return Ok(rec);
    }
    rec.push_state(x0, v0_init, estimator.estimate());

    let mut schedule = InputSchedule {
        current: scenario.u_prev0,
        pending: VecDeque::new(),
    };
    let mut u_prev = scenario.u_prev0;
    let dt_sub = cfg.substep;

    'control: for k in 0..cfg.n_sim {
        let t_k = k as f64 * cfg.t_c;
        let x_k = KiteState::new(s[0], s[1], s[2]);
        let v0_k = wp.speed(s[3]);
        let action = controller.control(&estimator.state_estimate(), u_prev);
        if !action.u.is_finite() {
            rec.fault = Some(format!("controller returned non-finite input at step {k}"));
            break;
        }
        let u = action.u.clamp(-p.u_max, p.u_max);
        schedule.pending.push_back((t_k + cfg.input_delay, u));
        let w_tb = scenario.w_tb_seq[k];

        for j in 0..n_e {
            for i in 0..n_sub {
                let t0 = t_k + ((j * n_sub + i) as f64) * dt_sub;
                match plant.advance(s, t0, dt_sub, w_tb, &mut schedule) {
                    Ok(next) => s = next,
                    Err(e) => {
                        rec.fault = Some(format!("step {k}: {e}"));
                        break 'control;
                    }
                }
            }
            let truth = KiteState::new(s[0], s[1], s[2]);
            let v0 = wp.speed(s[3]);
            let n = scenario.meas_noise_seq[k * n_e + j];
            let obs = Observation {
                y: [truth.theta + n[0], truth.phi + n[1], v0 + n[2]],
                truth,
                e0: scenario.e0,
                v0,
            };
            if let Err(e) = estimator.step(u, &obs) {
                rec.fault = Some(format!("step {k}: estimator: {e}"));
                break 'control;
            }
        }

        rec.push_input(u, thrust(&x_k, v0_k, u, scenario.e0, p), action.ok);
        rec.push_state(KiteState::new(s[0], s[1], s[2]), wp.speed(s[3]), estimator.estimate());
        u_prev = u;
    }
    debug_assert!(rec.height.iter().zip(&rec.states).all(|(h, x)| *h == height(x, p)));
    Ok(rec)
}
