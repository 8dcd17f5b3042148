//! Training pairs `(θ, φ, ψ, u_prev) → κ_ms` for the network approximation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ocp::{KappaMs, MsNmpc, OcpConfig};
use super::solver::SolveStatus;
use crate::error::{param, Error, Result};
use crate::plant::{
    height, simulate_closed_loop, ControlAction, Controller, KiteParams, KiteState, SimConfig,
    StateFeedback, WindParams,
};
use crate::scenario::{sample_scenario, stream, DistributionSpec, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Pairs taken along state-feedback closed loops.
    Opt,
    /// States drawn uniformly from a box, one cold solve each.
    Feas,
}

/// Sampling box for [`DatasetKind::Feas`]. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeasibleBox {
    pub theta_deg: (f64, f64),
    pub phi_deg: (f64, f64),
    pub psi_deg: (f64, f64),
    pub u_prev: (f64, f64),
}

impl Default for FeasibleBox {
    fn default() -> Self {
        Self {
            theta_deg: (15.0, 75.0),
            phi_deg: (-60.0, 60.0),
            psi_deg: (-180.0, 180.0),
            u_prev: (-10.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_target: usize,
    /// Closed-loop length for `opt`; `n_target / steps_per_traj` loops run.
    pub steps_per_traj: usize,
    pub master_seed: u64,
    /// Initial-condition distribution of the `opt` loops.
    pub initial: DistributionSpec,
    pub noise: NoiseSpec,
    pub feasible_box: FeasibleBox,
    /// Rejection attempts per `feas` sample before giving up on it.
    pub max_rejections: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Opt,
            n_target: 1000,
            steps_per_traj: 100,
            master_seed: 0,
            initial: DistributionSpec::uniform(),
            noise: NoiseSpec::default(),
            feasible_box: FeasibleBox::default(),
            max_rejections: 1000,
        }
    }
}

/// One training pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub theta: f64,
    pub phi: f64,
    pub psi: f64,
    pub u_prev: f64,
    pub u_target: f64,
}

impl Sample {
    pub fn input(&self) -> [f64; 4] {
        [self.theta, self.phi, self.psi, self.u_prev]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub ocp: OcpConfig,
    pub params: KiteParams,
    pub sim: SimConfig,
    pub wind: WindParams,
    /// Solves that ended in a solver fault and were dropped.
    pub solver_faults: usize,
    /// `opt` loops cut short by a plant domain fault.
    pub truncated_loops: usize,
    /// `feas` samples abandoned after `max_rejections` draws.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

/// Wraps the feedback law and keeps every `(x, u_prev) → u` it produces.
struct Recorder {
    inner: KappaMs,
    pairs: Vec<(Sample, SolveStatus)>,
}

impl Controller for Recorder {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn reset(&mut self) {
        self.inner.reset();
        self.pairs.clear();
    }

    fn control(&mut self, x: &KiteState, u_prev: f64) -> ControlAction {
        let a = self.inner.control(x, u_prev);
        let status = self.inner.last.as_ref().map_or(SolveStatus::Fault, |s| s.status);
        self.pairs.push((
            Sample {
                theta: x.theta,
                phi: x.phi,
                psi: x.psi,
                u_prev,
                u_target: a.u,
            },
            status,
        ));
        a
    }
}

pub fn generate_dataset(
    cfg: &DatasetConfig,
    nmpc: &MsNmpc,
    sim: &SimConfig,
    wind: &WindParams,
) -> Result<Dataset> {
    if cfg.n_target == 0 {
        return Err(param("dataset size must be >= 1"));
    }
    let mut meta = DatasetMeta {
        config: cfg.clone(),
        ocp: nmpc.cfg.clone(),
        params: nmpc.params,
        sim: *sim,
        wind: *wind,
        solver_faults: 0,
        truncated_loops: 0,
        rejected: 0,
    };
    let samples = match cfg.kind {
        DatasetKind::Opt => opt_samples(cfg, nmpc, sim, wind, &mut meta)?,
        DatasetKind::Feas => feas_samples(cfg, nmpc, &mut meta)?,
    };
    meta.sim.n_sim = if cfg.kind == DatasetKind::Opt { cfg.steps_per_traj } else { sim.n_sim };
    Ok(Dataset { samples, meta })
}

fn opt_samples(
    cfg: &DatasetConfig,
    nmpc: &MsNmpc,
    sim: &SimConfig,
    wind: &WindParams,
    meta: &mut DatasetMeta,
) -> Result<Vec<Sample>> {
    if cfg.steps_per_traj == 0 {
        return Err(param("steps per trajectory must be >= 1"));
    }
    let sim = SimConfig {
        n_sim: cfg.steps_per_traj,
        ..*sim
    };
    let n_traj = cfg.n_target.div_ceil(cfg.steps_per_traj);
    let runs = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| -> Result<(Vec<(Sample, SolveStatus)>, bool)> {
            let sc = sample_scenario(&cfg.initial, &cfg.noise, &sim, cfg.master_seed, i)?;
            let mut rec = Recorder {
                inner: KappaMs::new(nmpc.clone()),
                pairs: Vec::new(),
            };
            let traj = simulate_closed_loop(
                &sc,
                &mut rec,
                &mut StateFeedback::default(),
                &sim,
                &nmpc.params,
                wind,
            )?;
            // the last pair of a faulted run was never applied
            let n = traj.steps();
            rec.pairs.truncate(n);
            Ok((rec.pairs, traj.fault.is_some()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(cfg.n_target);
    for (pairs, truncated) in runs {
        meta.truncated_loops += usize::from(truncated);
        for (s, status) in pairs {
            if status == SolveStatus::Fault {
                meta.solver_faults += 1;
            } else {
                out.push(s);
            }
        }
    }
    out.truncate(cfg.n_target);
    Ok(out)
}

fn feas_samples(cfg: &DatasetConfig, nmpc: &MsNmpc, meta: &mut DatasetMeta) -> Result<Vec<Sample>> {
    let b = &cfg.feasible_box;
    for (name, (lo, hi)) in [
        ("theta", b.theta_deg),
        ("phi", b.phi_deg),
        ("psi", b.psi_deg),
        ("u_prev", b.u_prev),
    ] {
        if !(lo < hi) {
            return Err(param(format!("feasible box {name}: empty range ({lo}, {hi})")));
        }
    }
    if !(b.theta_deg.0 > 0.0 && b.theta_deg.1 < 180.0) {
        return Err(param("feasible box theta must lie inside (0, 180) degrees"));
    }
    let h_lim = nmpc.params.h_min + nmpc.cfg.eta;
    let results: Vec<Option<(Sample, SolveStatus)>> = (0..cfg.n_target as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.master_seed, i, "feas");
            for _ in 0..cfg.max_rejections.max(1) {
                let x = KiteState::new(
                    rng.random_range(b.theta_deg.0..=b.theta_deg.1).to_radians(),
                    rng.random_range(b.phi_deg.0..=b.phi_deg.1).to_radians(),
                    rng.random_range(b.psi_deg.0..=b.psi_deg.1).to_radians(),
                );
                let u_prev = rng.random_range(b.u_prev.0..=b.u_prev.1);
                if height(&x, &nmpc.params) < h_lim {
                    continue;
                }
                let sol = nmpc.solve(&x, u_prev, None);
                let u = sol.u0.clamp(-nmpc.params.u_max, nmpc.params.u_max);
                return Some((
                    Sample {
                        theta: x.theta,
                        phi: x.phi,
                        psi: x.psi,
                        u_prev,
                        u_target: u,
                    },
                    sol.status,
                ));
            }
            None
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_target);
    for r in results {
        match r {
            None => meta.rejected += 1,
            Some((_, SolveStatus::Fault)) => meta.solver_faults += 1,
            Some((s, _)) => out.push(s),
        }
    }
    Ok(out)
}

impl Dataset {
    /// Writes `<stem>.csv` (θ, φ, ψ, u_prev, u_target) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let meta_path = dir.join(format!("{stem}.json"));
        let fmt = |e: csv::Error| Error::Format {
            path: csv_path.display().to_string(),
            msg: e.to_string(),
        };
        let mut w = csv::Writer::from_path(&csv_path).map_err(fmt)?;
        for s in &self.samples {
            w.serialize(s).map_err(fmt)?;
        }
        w.flush()?;
        fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?)?;
        Ok((csv_path, meta_path))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let meta_path = dir.join(format!("{stem}.json"));
        let fmt = |e: csv::Error| Error::Format {
            path: csv_path.display().to_string(),
            msg: e.to_string(),
        };
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let samples = csv::Reader::from_path(&csv_path)
            .map_err(fmt)?
            .deserialize()
            .collect::<std::result::Result<Vec<Sample>, _>>()
            .map_err(fmt)?;
        if let Some(i) = samples
            .iter()
            .position(|s| !s.input().iter().chain([&s.u_target]).all(|v| v.is_finite()))
        {
            return Err(Error::Format {
                path: csv_path.display().to_string(),
                msg: format!("row {i} has a non-finite entry"),
            });
        }
        Ok(Self { samples, meta })
    }

    pub fn inputs(&self) -> Vec<[f64; 4]> {
        self.samples.iter().map(Sample::input).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.u_target).collect()
    }

    /// Rows in the layout expected by [`crate::mlp::train`]: the first
    /// `n_in` of `(θ, φ, ψ, u_prev)` and the target.
    pub fn training_rows(&self, n_in: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if !(1..=4).contains(&n_in) {
            return Err(param(format!("dataset rows have at most 4 inputs, asked for {n_in}")));
        }
        Ok(self
            .samples
            .iter()
            .map(|s| (s.input()[..n_in].to_vec(), vec![s.u_target]))
            .unzip())
    }
}
