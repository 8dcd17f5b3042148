use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{CampaignConfig, ControllerKind, DistributionChoice, EstimatorKind};
use super::report::{emit_report, CampaignReport, ControllerSummary, IndicatorResult, RuntimeStats};
use crate::error::{Error, Result};
use crate::estimator::Ekf;
use crate::indicators::max_violation;
use crate::mlp::{KappaDnn, Model};
use crate::msnmpc::{KappaMs, MsNmpc};
use crate::plant::{simulate_closed_loop, ControlAction, Controller, KiteState, StateFeedback};
use crate::scenario::{batch_hash, scenario_batch, DistributionSpec, Family, Scenario};
use crate::trajectory::TrajectoryRecord;
use crate::validation::{certify_family, exact_min_samples, min_samples, IndicatorVector};

/// A controller ready to be instantiated once per scenario.
#[derive(Debug, Clone)]
pub enum ControllerProto {
    Ms(MsNmpc),
    Dnn(KappaDnn),
}

struct Named {
    id: String,
    inner: Box<dyn Controller>,
}

impl Controller for Named {
    fn id(&self) -> String {
        self.id.clone()
    }
    fn reset(&mut self) {
        self.inner.reset()
    }
    fn control(&mut self, x_hat: &KiteState, u_prev: f64) -> ControlAction {
        self.inner.control(x_hat, u_prev)
    }
}

impl ControllerProto {
    fn instantiate(&self, id: &str) -> Box<dyn Controller> {
        let inner: Box<dyn Controller> = match self {
            Self::Ms(m) => Box::new(KappaMs::new(m.clone())),
            Self::Dnn(d) => Box::new(d.clone()),
        };
        Box::new(Named {
            id: id.to_string(),
            inner,
        })
    }
}

/// Loads every controller of the family.
pub fn build_family(cfg: &CampaignConfig) -> Result<Vec<ControllerProto>> {
    cfg.controllers
        .iter()
        .map(|c| match c.kind {
            ControllerKind::Ms => {
                let mut ocp = cfg.ocp.clone();
                ocp.eta = c.eta;
                Ok(ControllerProto::Ms(MsNmpc::new(ocp, cfg.plant)?))
            }
            ControllerKind::Dnn => {
                let path = c.params.as_ref().expect("checked by validate_family");
                let model = Model::load(path).map_err(|e| {
                    Error::Config(format!("{}: cannot load {}: {e}", c.id(), path.display()))
                })?;
                Ok(ControllerProto::Dnn(KappaDnn::new(model, cfg.plant.u_max, c.id())?))
            }
        })
        .collect()
}

/// `(N used, closed-form N, exact N)`.
pub fn sample_size(cfg: &CampaignConfig) -> Result<(usize, usize, usize)> {
    let required = min_samples(&cfg.risk)?;
    let exact = exact_min_samples(&cfg.risk)?;
    let n = match cfg.n_scenarios {
        None => required,
        Some(n) if n >= required => n,
        Some(n) => {
            return Err(Error::Certification(format!(
                "n_scenarios = {n} is below the required {required}"
            )))
        }
    };
    Ok((n, required, exact))
}

/// Per-scenario reduction of a trajectory.
#[derive(Debug, Clone)]
struct Outcome {
    values: Vec<f64>,
    feasible: bool,
    fault: bool,
    avg_thrust: f64,
    solver_failures: usize,
}

fn outcome(rec: &TrajectoryRecord, cfg: &CampaignConfig) -> Outcome {
    let fault = rec.fault.is_some() || !rec.is_complete();
    Outcome {
        values: cfg.indicators.iter().map(|e| e.spec.evaluate(rec)).collect(),
        feasible: !fault && max_violation(rec, cfg.plant.h_min) <= 0.0,
        fault,
        avg_thrust: if fault || rec.thrust.is_empty() {
            f64::NAN
        } else {
            rec.thrust.iter().sum::<f64>() / rec.thrust.len() as f64
        },
        solver_failures: rec.solver_ok.iter().filter(|ok| !**ok).count(),
    }
}

/// Runs one controller on one scenario with the configured estimator.
pub fn simulate_scenario(
    proto: &ControllerProto,
    id: &str,
    sc: &Scenario,
    cfg: &CampaignConfig,
) -> Result<TrajectoryRecord> {
    let mut ctrl = proto.instantiate(id);
    match cfg.estimator {
        EstimatorKind::Ekf => simulate_closed_loop(
            sc,
            ctrl.as_mut(),
            &mut Ekf::new(cfg.ekf, cfg.plant),
            &cfg.sim,
            &cfg.plant,
            &cfg.wind,
        ),
        EstimatorKind::StateFeedback => simulate_closed_loop(
            sc,
            ctrl.as_mut(),
            &mut StateFeedback::default(),
            &cfg.sim,
            &cfg.plant,
            &cfg.wind,
        ),
    }
}

fn family_name(spec: &DistributionSpec) -> &'static str {
    match spec.family {
        Family::Uniform => "uniform",
        Family::Normal => "normal",
        Family::Beta => "beta",
        Family::Pareto => "pareto",
    }
}

fn trajectory_dir(out: &Path, controller: usize) -> PathBuf {
    out.join("trajectories").join(format!("c{controller}"))
}

fn trajectory_stem(scenario: u64) -> String {
    format!("s{scenario:06}")
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn aggregate(
    cfg: &CampaignConfig,
    sizes: (usize, usize, usize),
    hash: String,
    outcomes: Vec<Vec<Outcome>>,
    samples: Vec<Vec<TrajectoryRecord>>,
) -> Result<CampaignReport> {
    let (n, required_n, exact_n) = sizes;
    let ids: Vec<String> = cfg.controllers.iter().map(|c| c.id()).collect();
    let mut indicators = Vec::with_capacity(cfg.indicators.len());
    for (k, entry) in cfg.indicators.iter().enumerate() {
        let vectors = ids
            .iter()
            .zip(&outcomes)
            .map(|(id, runs)| IndicatorVector::new(id.clone(), runs.iter().map(|o| o.values[k]).collect()))
            .collect::<Result<Vec<_>>>()?;
        let certificate = certify_family(&vectors, &cfg.risk, entry.threshold)?;
        indicators.push(IndicatorResult {
            indicator: entry.spec.name().to_string(),
            vectors,
            certificate,
        });
    }
    let mut controllers = Vec::with_capacity(ids.len());
    for (i, runs) in outcomes.iter().enumerate() {
        let faults = runs.iter().filter(|o| o.fault).count();
        let thrusts: Vec<f64> = runs.iter().map(|o| o.avg_thrust).filter(|t| t.is_finite()).collect();
        controllers.push(ControllerSummary {
            id: ids[i].clone(),
            eta: cfg.controllers[i].eta,
            feasible: runs.iter().filter(|o| o.feasible).count(),
            faults,
            solver_failures: runs.iter().map(|o| o.solver_failures).sum(),
            mean_thrust_kn: if thrusts.is_empty() {
                f64::NAN
            } else {
                thrusts.iter().sum::<f64>() / thrusts.len() as f64 / 1e3
            },
            levels: indicators.iter().map(|r| r.certificate.levels[i]).collect(),
            safe: indicators[0].certificate.safe_flags[i],
            degraded: faults as f64 > cfg.max_fault_fraction * n as f64,
        });
    }
    Ok(CampaignReport {
        label: cfg.timing_label(),
        distribution: family_name(&cfg.distribution.resolve()?).to_string(),
        master_seed: cfg.master_seed,
        n_scenarios: n,
        required_n,
        exact_n,
        batch_hash: hash,
        h_min: cfg.plant.h_min,
        degraded: controllers.iter().any(|c| c.degraded),
        controllers,
        indicators,
        runtime: RuntimeStats::default(),
        samples,
    })
}

/// Simulates every controller on one shared scenario batch, certifies the
/// family and writes the report into `cfg.output_dir`.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    cfg.validate()?;
    cfg.validate_family()?;
    let protos = build_family(cfg)?;
    let sizes = sample_size(cfg)?;
    let dist = cfg.distribution.resolve()?;
    let batch = scenario_batch(&dist, &cfg.noise, &cfg.sim, cfg.master_seed, sizes.0)?;
    let hash = batch_hash(&batch)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let pool = pool(cfg.workers)?;
    let start = Instant::now();
    let mut per_controller = Vec::new();
    let mut outcomes = Vec::with_capacity(protos.len());
    let mut samples = Vec::with_capacity(protos.len());
    for (ci, proto) in protos.iter().enumerate() {
        let t = Instant::now();
        let id = cfg.controllers[ci].id();
        let dir = trajectory_dir(out, ci);
        // results come back in scenario order whatever the scheduling
        let runs = pool.install(|| {
            batch
                .par_iter()
                .map(|sc| -> Result<(Outcome, Option<TrajectoryRecord>)> {
                    let rec = simulate_scenario(proto, &id, sc, cfg)?;
                    if cfg.persist_trajectories {
                        rec.save(&dir, &trajectory_stem(sc.id))?;
                    }
                    let o = outcome(&rec, cfg);
                    Ok((o, (sc.id < cfg.plot_trajectories as u64).then_some(rec)))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (o, s): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        outcomes.push(o);
        samples.push(s.into_iter().flatten().collect());
        per_controller.push(t.elapsed().as_secs_f64());
    }
    let mut report = aggregate(cfg, sizes, hash, outcomes, samples)?;
    report.runtime = RuntimeStats {
        wall_seconds: start.elapsed().as_secs_f64(),
        per_controller_seconds: per_controller,
        workers: pool.current_num_threads(),
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    emit_report(&report, out)?;
    Ok(report)
}

/// Rebuilds the report of a persisted campaign from its trajectories.
pub fn report_from_dir(dir: &Path) -> Result<CampaignReport> {
    let text = fs::read_to_string(dir.join("config.toml"))?;
    let cfg: CampaignConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    if !cfg.persist_trajectories {
        return Err(Error::Config("campaign was run without persisted trajectories".into()));
    }
    cfg.validate()?;
    cfg.validate_family()?;
    let sizes = sample_size(&cfg)?;
    let dist = cfg.distribution.resolve()?;
    let batch = scenario_batch(&dist, &cfg.noise, &cfg.sim, cfg.master_seed, sizes.0)?;
    let hash = batch_hash(&batch)?;
    let mut outcomes = Vec::new();
    let mut samples = Vec::new();
    for ci in 0..cfg.controllers.len() {
        let tdir = trajectory_dir(dir, ci);
        let mut o = Vec::with_capacity(sizes.0);
        let mut s = Vec::new();
        for sc in &batch {
            let rec = TrajectoryRecord::load(&tdir, &trajectory_stem(sc.id))?;
            if rec.scenario_seed != sc.seed {
                return Err(Error::Format {
                    path: tdir.display().to_string(),
                    msg: format!("scenario {} does not match the configured batch", sc.id),
                });
            }
            o.push(outcome(&rec, &cfg));
            if sc.id < cfg.plot_trajectories as u64 {
                s.push(rec);
            }
        }
        outcomes.push(o);
        samples.push(s);
    }
    let mut report = aggregate(&cfg, sizes, hash, outcomes, samples)?;
    if let Ok(text) = fs::read_to_string(dir.join("runtime.json")) {
        report.runtime = serde_json::from_str(&text)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub distribution: String,
    pub controller: String,
    pub n: usize,
    pub feasible: usize,
    #[serde(with = "crate::serde_f64")]
    pub level: f64,
    #[serde(with = "crate::serde_f64")]
    pub mean_thrust_kn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    #[serde(skip)]
    pub reports: Vec<CampaignReport>,
}

impl RobustnessReport {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("distribution,controller,n,feasible,level,mean_thrust_kn\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.distribution, r.controller, r.n, r.feasible, r.level, r.mean_thrust_kn
            );
        }
        out
    }

    pub fn table_markdown(&self) -> String {
        let mut out = String::from(
            "| distribution | controller | feasible | ψ | mean thrust (kN) |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {}/{} | {:.3} | {:.1} |",
                r.distribution, r.controller, r.feasible, r.n, r.level, r.mean_thrust_kn
            );
        }
        out
    }
}

/// Re-runs the campaign under each alternative initial-condition and
/// parameter distribution, on the same seed and sample size.
pub fn robustness_study(cfg: &CampaignConfig, alts: &[DistributionSpec]) -> Result<RobustnessReport> {
    cfg.validate()?;
    let base = cfg.distribution.resolve()?;
    for alt in alts {
        alt.validate().map_err(|e| Error::Config(e.to_string()))?;
        if alt.family == Family::Beta && !alt.support_within(&base) {
            return Err(Error::Config(
                "beta distribution support is not contained in the nominal support".into(),
            ));
        }
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (i, alt) in alts.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.distribution = DistributionChoice::Spec(*alt);
        sub.output_dir = cfg
            .output_dir
            .join(format!("robustness_{i}_{}", family_name(alt)));
        let report = run_campaign(&sub)?;
        for c in &report.controllers {
            rows.push(RobustnessRow {
                distribution: family_name(alt).to_string(),
                controller: c.id.clone(),
                n: report.n_scenarios,
                feasible: c.feasible,
                level: c.levels[0],
                mean_thrust_kn: c.mean_thrust_kn,
            });
        }
        reports.push(report);
    }
    let rep = RobustnessReport { rows, reports };
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("robustness.csv"), rep.table_csv())?;
    fs::write(cfg.output_dir.join("robustness.md"), rep.table_markdown())?;
    Ok(rep)
}
