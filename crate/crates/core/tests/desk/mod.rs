//! Desk-scale pipeline shared by the end-to-end criteria: imitation data for
//! a backoff sweep, trained networks, a training-set study and campaigns.
//!
//! Networks see 1000 pairs instead of the 80000 of a full study, so closed
//! loops run for as long as the data loops (100 steps) rather than 400.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use probcert::campaign::{
    emit_report, report_from_dir, run_campaign, CampaignConfig, CampaignReport, ControllerSpec,
};
use probcert::mlp::{train, Model, TrainConfig};
use probcert::msnmpc::{generate_dataset, Dataset, DatasetConfig, DatasetKind, MsNmpc};
use probcert::trajectory::TrajectoryRecord;
use probcert::validation::RiskSpec;

use super::Verdict;

/// Backoffs of the sweep; the last one plays the part of the most
/// conservative controller of the full study.
pub const ETAS: [f64; 4] = [0.0, 4.0, 8.0, 12.0];
const STEPS: usize = 100;
const PAIRS: usize = 1000;
const EPOCHS: usize = 600;
/// Backoff of the training-set study.
const STUDY_ETA: f64 = 4.0;
const SEEDS: u64 = 5;

struct Desk {
    root: PathBuf,
    models: Vec<PathBuf>,
    /// Seconds spent on data and training for the two networks of the
    /// two-controller campaign.
    family_seconds: f64,
    /// Validation MSE on held-out closed-loop data, per training seed.
    mse_opt: Vec<f64>,
    mse_feas: Vec<f64>,
}

fn base_config(root: &Path) -> CampaignConfig {
    let mut cfg = CampaignConfig::default();
    cfg.master_seed = 2024;
    cfg.sim.n_sim = STEPS;
    cfg.dataset = DatasetConfig {
        n_target: PAIRS,
        steps_per_traj: STEPS,
        ..DatasetConfig::default()
    };
    cfg.training = TrainConfig { epochs: EPOCHS, ..TrainConfig::default() };
    cfg.output_dir = root.join("campaign");
    cfg
}

fn dataset(cfg: &CampaignConfig, eta: f64, kind: DatasetKind, n: usize, seed: u64) -> Dataset {
    let mut ocp = cfg.ocp.clone();
    ocp.eta = eta;
    let nmpc = MsNmpc::new(ocp, cfg.plant).unwrap();
    let dc = DatasetConfig {
        kind,
        n_target: n,
        master_seed: seed,
        ..cfg.dataset.clone()
    };
    let ds = generate_dataset(&dc, &nmpc, &cfg.sim, &cfg.wind).unwrap();
    assert!(ds.samples.len() >= n * 9 / 10, "only {} of {n} pairs", ds.samples.len());
    ds
}

fn fit(cfg: &CampaignConfig, ds: &Dataset, seed: u64) -> Model {
    let (x, y) = ds.training_rows(cfg.architecture.n_in).unwrap();
    let tc = TrainConfig { seed, ..cfg.training.clone() };
    train(&x, &y, cfg.architecture, &tc).unwrap()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
}

fn build() -> Desk {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(root.join("nets")).unwrap();
    let cfg = base_config(&root);

    let mut models = Vec::new();
    let mut family_seconds = 0.0;
    let mut study_data = None;
    for (i, &eta) in ETAS.iter().enumerate() {
        let t = Instant::now();
        let ds = dataset(&cfg, eta, DatasetKind::Opt, PAIRS, 10 + i as u64);
        ds.save(&root.join("data"), &format!("opt_eta{eta}")).unwrap();
        let model = fit(&cfg, &ds, 0);
        let path = root.join("nets").join(format!("eta{eta}.json"));
        model.save(&path).unwrap();
        if i == 0 || i == ETAS.len() - 1 {
            family_seconds += t.elapsed().as_secs_f64();
        }
        if eta == STUDY_ETA {
            study_data = Some(ds);
        }
        models.push(path);
    }

    let t_opt = study_data.expect("study backoff is part of the sweep");
    let v_opt = dataset(&cfg, STUDY_ETA, DatasetKind::Opt, PAIRS / 2, 99);
    let t_feas = dataset(&cfg, STUDY_ETA, DatasetKind::Feas, PAIRS, 98);
    let (vx, vy) = v_opt.training_rows(cfg.architecture.n_in).unwrap();
    let mut mse_opt = Vec::new();
    let mut mse_feas = Vec::new();
    for seed in 0..SEEDS {
        mse_opt.push(fit(&cfg, &t_opt, seed).mse(&vx, &vy).unwrap());
        mse_feas.push(fit(&cfg, &t_feas, seed).mse(&vx, &vy).unwrap());
    }
    Desk { root, models, family_seconds, mse_opt, mse_feas }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(build)
}

fn family(d: &Desk, idx: &[usize], risk: RiskSpec, dir: &str) -> CampaignConfig {
    let mut cfg = base_config(&d.root);
    cfg.risk = risk;
    cfg.controllers = idx
        .iter()
        .map(|&i| ControllerSpec::dnn(ETAS[i], d.models[i].clone()))
        .collect();
    cfg.output_dir = d.root.join(dir);
    cfg
}

fn desk_risk(m: usize) -> RiskSpec {
    RiskSpec::new(0.1, 0.01, 2, m).unwrap()
}

fn pair() -> [usize; 2] {
    [0, ETAS.len() - 1]
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_default()
}

/// Nominal two-controller campaign, run once and shared.
fn nominal() -> &'static (CampaignConfig, CampaignReport, f64) {
    static RUN: OnceLock<(CampaignConfig, CampaignReport, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let d = desk();
        let mut cfg = family(d, &pair(), desk_risk(2), "pair_a");
        cfg.workers = 1;
        let t = Instant::now();
        let report = run_campaign(&cfg).unwrap();
        (cfg, report, t.elapsed().as_secs_f64())
    })
}

pub fn c10() -> Verdict {
    let t = Instant::now();
    let d = desk();
    let (cfg, a, secs) = nominal();
    let mut again = cfg.clone();
    again.workers = 0;
    again.output_dir = d.root.join("pair_b");
    let mut b = run_campaign(&again).unwrap();
    // wall-clock figures and the worker count are expected to differ
    b.runtime = a.runtime.clone();
    let same_json = read(&cfg.output_dir.join("report.json")) == read(&again.output_dir.join("report.json"));
    let deterministic = a == &b && same_json && !read(&cfg.output_dir.join("report.json")).is_empty();

    let regen = d.root.join("pair_regen");
    let back = report_from_dir(&cfg.output_dir).unwrap();
    emit_report(&back, &regen).unwrap();
    let round_trip = ["report.json", "table.csv", "table.md"]
        .iter()
        .all(|f| read(&cfg.output_dir.join(f)) == read(&regen.join(f)));

    let [lo, hi] = [&a.controllers[0], &a.controllers[1]];
    let trend = hi.feasible >= lo.feasible;
    let elapsed = d.family_seconds + secs + t.elapsed().as_secs_f64();
    let fast = elapsed < 15.0 * 60.0;
    let n_ok = a.n_scenarios == 96;
    let detail = format!(
        "N = {}, deterministic {deterministic}, round trip {round_trip}, feasible {}/{} \
         (eta {}) vs {}/{} (eta {}), {:.0} s including data and training",
        a.n_scenarios, lo.feasible, a.n_scenarios, lo.eta, hi.feasible, a.n_scenarios, hi.eta, elapsed
    );
    if !(n_ok && deterministic && round_trip) {
        return Verdict::hard(false, detail);
    }
    Verdict::soft(trend && fast, detail)
}

pub fn c11() -> Verdict {
    let d = desk();
    let idx: Vec<usize> = (0..ETAS.len()).collect();
    let cfg = family(d, &idx, desk_risk(ETAS.len()), "sweep");
    let r = run_campaign(&cfg).unwrap();
    let feas: Vec<usize> = r.controllers.iter().map(|c| c.feasible).collect();
    let thrust: Vec<f64> = r.controllers.iter().map(|c| c.mean_thrust_kn).collect();
    let feas_ok = feas.windows(2).all(|w| w[1] >= w[0]);
    let thrust_ok = thrust.windows(2).all(|w| w[1] <= w[0]);
    let (mo, mf) = (median(&d.mse_opt), median(&d.mse_feas));
    let mse_ok = mo < mf;
    Verdict::soft(
        feas_ok && thrust_ok && mse_ok,
        format!(
            "sweep eta {ETAS:?} over N = {}: feasible {feas:?} (nondecreasing {feas_ok}), \
             mean thrust kN {:?} (nonincreasing {thrust_ok}); median validation MSE on closed-loop \
             data {mo:.4} (closed-loop training) vs {mf:.4} (box training)",
            r.n_scenarios,
            thrust.iter().map(|t| (t * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

pub fn c12() -> Verdict {
    let d = desk();
    let (nominal_cfg, nominal, _) = nominal();
    let mut cfg = family(d, &pair(), desk_risk(2), "pair_delay");
    cfg.sim.input_delay = 0.065;
    let r = run_campaign(&cfg).unwrap();
    let stem = "s000000";
    let a = TrajectoryRecord::load(&nominal_cfg.output_dir.join("trajectories").join("c1"), stem).unwrap();
    let b = TrajectoryRecord::load(&cfg.output_dir.join("trajectories").join("c1"), stem).unwrap();
    let changed = a.states != b.states && r.label == "input delay 65 ms" && nominal.label == "nominal";

    let hi = &r.controllers[1];
    let frac = (r.n_scenarios - hi.feasible) as f64 / r.n_scenarios as f64;
    let within = frac <= cfg.risk.epsilon;
    let detail = format!(
        "delay changes trajectories {changed}; eta {} violation fraction {frac:.3} \
         ({} of {}) vs epsilon {}",
        hi.eta,
        r.n_scenarios - hi.feasible,
        r.n_scenarios,
        cfg.risk.epsilon
    );
    if !changed {
        return Verdict::hard(false, detail);
    }
    Verdict::soft(within, detail)
}
