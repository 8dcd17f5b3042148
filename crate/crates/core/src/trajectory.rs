//! Recorded closed-loop traces and their on-disk form (CSV + JSON sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{height, thrust, KiteParams, KiteState, SimConfig, WindParams};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub scenario_id: u64,
    pub scenario_seed: u64,
    pub controller_id: String,
    pub e0: f64,
    pub u_prev0: f64,
    pub params: KiteParams,
    pub sim: SimConfig,
    pub wind: WindParams,
    /// `x(k)`, `k = 0..=n` where `n` is the number of completed steps.
    pub states: Vec<KiteState>,
    /// Augmented estimate at each control instant.
    pub estimates: Vec<[f64; 5]>,
    pub inputs: Vec<f64>,
    pub wind_speed: Vec<f64>,
    /// `T_F(k)` at `(x(k), v0(k), u(k))`.
    pub thrust: Vec<f64>,
    pub height: Vec<f64>,
    pub solver_ok: Vec<bool>,
    /// Set when a domain fault ended the run early.
    pub fault: Option<String>,
}

impl TrajectoryRecord {
    pub(crate) fn new(
        sc: &Scenario,
        controller_id: String,
        params: KiteParams,
        sim: SimConfig,
        wind: WindParams,
    ) -> Self {
        Self {
            scenario_id: sc.id,
            scenario_seed: sc.seed,
            controller_id,
            e0: sc.e0,
            u_prev0: sc.u_prev0,
            params,
            sim,
            wind,
            states: Vec::with_capacity(sim.n_sim + 1),
            estimates: Vec::with_capacity(sim.n_sim + 1),
            inputs: Vec::with_capacity(sim.n_sim),
            wind_speed: Vec::with_capacity(sim.n_sim + 1),
            thrust: Vec::with_capacity(sim.n_sim),
            height: Vec::with_capacity(sim.n_sim + 1),
            solver_ok: Vec::with_capacity(sim.n_sim),
            fault: None,
        }
    }

    pub(crate) fn push_state(&mut self, x: KiteState, v0: f64, estimate: [f64; 5]) {
        self.height.push(height(&x, &self.params));
        self.states.push(x);
        self.wind_speed.push(v0);
        self.estimates.push(estimate);
    }

    pub(crate) fn push_input(&mut self, u: f64, t_f: f64, ok: bool) {
        self.inputs.push(u);
        self.thrust.push(t_f);
        self.solver_ok.push(ok);
    }

    /// Number of completed control steps.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_complete(&self) -> bool {
        self.fault.is_none() && self.steps() == self.sim.n_sim
    }

    /// Fraction of control steps whose solver reported success.
    pub fn solver_success_rate(&self) -> f64 {
        if self.solver_ok.is_empty() {
            return 0.0;
        }
        self.solver_ok.iter().filter(|&&b| b).count() as f64 / self.solver_ok.len() as f64
    }

    /// Checks sequence lengths and that the cached heights and thrusts match
    /// the states.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.steps();
        let bad = |msg: String| Err(Error::Numerical(format!("scenario {}: {msg}", self.scenario_id)));
        if self.states.len() != n + 1 && !(self.states.is_empty() && self.fault.is_some()) {
            return bad(format!("{} states for {n} inputs", self.states.len()));
        }
        for (name, len) in [
            ("estimates", self.estimates.len()),
            ("wind_speed", self.wind_speed.len()),
            ("height", self.height.len()),
        ] {
            if len != self.states.len() {
                return bad(format!("{name} has {len} entries, states {}", self.states.len()));
            }
        }
        if self.thrust.len() != n || self.solver_ok.len() != n {
            return bad("thrust/solver_ok length mismatch".into());
        }
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        for (k, x) in self.states.iter().enumerate() {
            if !close(self.height[k], height(x, &self.params)) {
                return bad(format!("height mismatch at step {k}"));
            }
        }
        for k in 0..n {
            let t = thrust(&self.states[k], self.wind_speed[k], self.inputs[k], self.e0, &self.params);
            if !close(self.thrust[k], t) {
                return bad(format!("thrust mismatch at step {k}"));
            }
        }
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let meta_path = dir.join(format!("{stem}.json"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
        for k in 0..self.states.len() {
            let x = self.states[k];
            let e = self.estimates[k];
            let row = Row {
                k,
                t: k as f64 * self.sim.t_c,
                theta: x.theta,
                phi: x.phi,
                psi: x.psi,
                theta_hat: e[0],
                phi_hat: e[1],
                psi_hat: e[2],
                e0_hat: e[3],
                v0_hat: e[4],
                v0: self.wind_speed[k],
                height: self.height[k],
                u: self.inputs.get(k).copied(),
                thrust: self.thrust.get(k).copied(),
                solver_ok: self.solver_ok.get(k).map(|&b| u8::from(b)),
            };
            w.serialize(row).map_err(|e| csv_err(&csv_path, e))?;
        }
        w.flush()?;
        let meta = Meta {
            scenario_id: self.scenario_id,
            scenario_seed: self.scenario_seed,
            controller_id: self.controller_id.clone(),
            e0: self.e0,
            u_prev0: self.u_prev0,
            params: self.params,
            sim: self.sim,
            wind: self.wind,
            fault: self.fault.clone(),
        };
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok((csv_path, meta_path))
    }

    /// Reads a record written by [`save`](Self::save) and verifies its caches.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let meta_path = dir.join(format!("{stem}.json"));
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let mut rec = TrajectoryRecord {
            scenario_id: meta.scenario_id,
            scenario_seed: meta.scenario_seed,
            controller_id: meta.controller_id,
            e0: meta.e0,
            u_prev0: meta.u_prev0,
            params: meta.params,
            sim: meta.sim,
            wind: meta.wind,
            states: vec![],
            estimates: vec![],
            inputs: vec![],
            wind_speed: vec![],
            thrust: vec![],
            height: vec![],
            solver_ok: vec![],
            fault: meta.fault,
        };
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
        for row in r.deserialize::<Row>() {
            let row = row.map_err(|e| csv_err(&csv_path, e))?;
            rec.states.push(KiteState::new(row.theta, row.phi, row.psi));
            rec.estimates
                .push([row.theta_hat, row.phi_hat, row.psi_hat, row.e0_hat, row.v0_hat]);
            rec.wind_speed.push(row.v0);
            rec.height.push(row.height);
            if let (Some(u), Some(t), Some(ok)) = (row.u, row.thrust, row.solver_ok) {
                rec.inputs.push(u);
                rec.thrust.push(t);
                rec.solver_ok.push(ok != 0);
            }
        }
        rec.check_consistency().map_err(|e| Error::Format {
            path: csv_path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(rec)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    k: usize,
    t: f64,
    theta: f64,
    phi: f64,
    psi: f64,
    theta_hat: f64,
    phi_hat: f64,
    psi_hat: f64,
    e0_hat: f64,
    v0_hat: f64,
    v0: f64,
    height: f64,
    u: Option<f64>,
    thrust: Option<f64>,
    solver_ok: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    scenario_id: u64,
    scenario_seed: u64,
    controller_id: String,
    e0: f64,
    u_prev0: f64,
    params: KiteParams,
    sim: SimConfig,
    wind: WindParams,
    fault: Option<String>,
}
