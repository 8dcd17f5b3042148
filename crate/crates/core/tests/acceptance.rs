//! Acceptance harness. Prints one PASS/FAIL line per criterion and fails the
//! test only when a hard (deterministic) requirement is broken. Empirical
//! trend checks on desk-scale training are reported but do not fail the run.

mod desk;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{SVector, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probcert::estimator::{min_eigenvalue, propagate, Ekf, EkfConfig, Vector5};
use probcert::mlp::{count_neurons, count_weights, train, Architecture, MlpParams, TrainConfig};
use probcert::msnmpc::{BoxObjective, MsNmpc, OcpConfig, TreeConfig};
use probcert::plant::integrate::{euler_step, rk4_step};
use probcert::plant::{
    kite_rhs, simulate_closed_loop, ControlAction, Controller, Estimator, KiteParams, KiteState,
    Observation, SimConfig, WindParams,
};
use probcert::scenario::{sample_scenario, DistributionSpec, NoiseSpec};
use probcert::validation::{binomial_tail, generalized_max_slice, min_samples, RiskSpec};

pub struct Verdict {
    pub pass: bool,
    /// Failing a soft verdict is reported, not asserted.
    pub hard: bool,
    pub detail: String,
}

impl Verdict {
    pub fn hard(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, hard: true, detail: detail.into() }
    }

    pub fn soft(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, hard: false, detail: detail.into() }
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.3} s of {:?}", e.as_secs_f64(), limit))
}

fn c1() -> Verdict {
    let t = Instant::now();
    let n = min_samples(&RiskSpec::new(0.02, 1e-6, 4, 4).unwrap()).unwrap();
    let (fast, time) = within(t, Duration::from_millis(1));
    Verdict::hard(n == 1388 && fast, format!("N = {n}, {time}"))
}

fn c2() -> Verdict {
    let t = Instant::now();
    let tail = binomial_tail(1388, 0.02, 3).unwrap();
    let (fast, time) = within(t, Duration::from_millis(1));
    Verdict::hard(tail <= 2.5e-7 && fast, format!("tail = {tail:.4e}, {time}"))
}

fn c3() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..1000 {
        let risk = RiskSpec::new(
            rng.random_range(0.005..=0.3),
            10f64.powf(rng.random_range(-8.0..=-1.0)),
            rng.random_range(1..=10),
            rng.random_range(1..=32),
        )
        .unwrap();
        let n = min_samples(&risk).unwrap();
        let tail = binomial_tail(n as u64, risk.epsilon, risk.r as u64 - 1).unwrap();
        let ratio = tail / risk.budget();
        worst = worst.max(ratio);
        if ratio > 1.0 {
            bad += 1;
        }
    }
    let (fast, time) = within(t, Duration::from_secs(5));
    Verdict::hard(
        bad == 0 && fast,
        format!("{bad} violations, worst tail/budget {worst:.3}, {time}"),
    )
}

fn c4() -> Verdict {
    let t = Instant::now();
    let (n, eps, r, reps) = (50usize, 0.1, 3usize, 100_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut v = vec![0.0; n];
    let mut hits = 0usize;
    for _ in 0..reps {
        v.iter_mut().for_each(|x| *x = rng.random::<f64>());
        let level = generalized_max_slice(&v, r).unwrap();
        // Pr{φ > level} for φ ~ U(0, 1)
        if 1.0 - level > eps {
            hits += 1;
        }
    }
    let p = binomial_tail(n as u64, eps, r as u64 - 1).unwrap();
    let freq = hits as f64 / reps as f64;
    let se = (p * (1.0 - p) / reps as f64).sqrt();
    let (fast, time) = within(t, Duration::from_secs(30));
    Verdict::hard(
        (freq - p).abs() <= 3.0 * se && fast,
        format!("frequency {freq:.5} vs {p:.5} (3 SE = {:.5}), {time}", 3.0 * se),
    )
}

fn c5() -> Verdict {
    let w = count_weights(3, 1, 6, 30);
    let n = count_neurons(6, 30);
    Verdict::hard(w == 4803 && n == 180, format!("weights {w}, neurons {n}"))
}

/// Kite angles plus the wind turbulence state, with input and white noise
/// held constant.
fn frozen_rhs(u: f64, w_tb: f64, e0: f64) -> impl Fn(&Vector4<f64>) -> Vector4<f64> {
    let p = KiteParams::default();
    let wp = WindParams::default();
    move |s: &Vector4<f64>| {
        let x = KiteState::new(s[0], s[1], s[2]);
        let d = kite_rhs(&x, u, wp.speed(s[3]), e0, &p).expect("stays in domain");
        Vector4::new(d[0], d[1], d[2], wp.p_dot(s[3], w_tb))
    }
}

fn integrate<const N: usize>(
    step: impl Fn(&SVector<f64, N>, f64) -> SVector<f64, N>,
    x0: SVector<f64, N>,
    h: f64,
    t_end: f64,
    record_every: usize,
) -> Vec<SVector<f64, N>> {
    let n = (t_end / h).round() as usize;
    let mut x = x0;
    let mut out = vec![x];
    for k in 1..=n {
        x = step(&x, h);
        if k % record_every == 0 {
            out.push(x);
        }
    }
    out
}

fn c6() -> Verdict {
    let t = Instant::now();
    let h = SimConfig::default().substep;
    let mut worst = 0.0f64;
    let mut min_order = f64::INFINITY;
    for (u, w_tb, x0) in [
        (0.0, 0.0, Vector4::new(0.5, 0.2, 0.3, 0.0)),
        (2.0, 0.3, Vector4::new(0.7, -0.4, 1.2, 0.5)),
        (-4.0, -0.2, Vector4::new(0.9, 0.6, -2.0, -0.3)),
    ] {
        let f = frozen_rhs(u, w_tb, 5.0);
        let rk = integrate(|x, h| rk4_step(&f, x, h), x0, h, 10.0, 1);
        let eu = integrate(|x, h| euler_step(&f, x, h), x0, h / 100.0, 10.0, 100);
        for (a, b) in rk.iter().zip(&eu) {
            worst = worst.max((a - b).norm() / b.norm());
        }
        let reference = *integrate(|x, h| rk4_step(&f, x, h), x0, h / 64.0, 10.0, 1).last().unwrap();
        let err = |hh: f64| (integrate(|x, h| rk4_step(&f, x, h), x0, hh, 10.0, 1).last().unwrap() - reference).norm();
        let order = (err(4.0 * h) / err(2.0 * h)).log2();
        min_order = min_order.min(order);
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    Verdict::hard(
        worst <= 1e-4 && min_order >= 3.5 && fast,
        format!("max relative gap to fine Euler {worst:.2e}, RK4 order {min_order:.2}, {time}"),
    )
}

/// Sweeping input so the filter sees a varied trajectory.
struct Sweep(usize);

impl Controller for Sweep {
    fn id(&self) -> String {
        "sweep".into()
    }

    fn reset(&mut self) {
        self.0 = 0;
    }

    fn control(&mut self, _: &KiteState, _: f64) -> ControlAction {
        self.0 += 1;
        ControlAction { u: 3.0 * (0.2 * self.0 as f64).sin(), ok: true }
    }
}

/// EKF that records the smallest covariance eigenvalue and the largest
/// asymmetry it ever holds.
struct Watched {
    ekf: Ekf,
    min_eig: f64,
    asym: f64,
}

impl Watched {
    fn watch(&mut self) {
        let p = self.ekf.state().expect("initialized").p;
        self.min_eig = self.min_eig.min(min_eigenvalue(&p));
        self.asym = self.asym.max((p - p.transpose()).abs().max());
    }
}

impl Estimator for Watched {
    fn initialize(&mut self, x0: &KiteState, e0: f64, v0: f64, d: &[f64; 5]) -> probcert::Result<()> {
        self.ekf.initialize(x0, e0, v0, d)?;
        self.watch();
        Ok(())
    }

    fn step(&mut self, u: f64, obs: &Observation) -> probcert::Result<()> {
        self.ekf.step(u, obs)?;
        self.watch();
        Ok(())
    }

    fn estimate(&self) -> [f64; 5] {
        self.ekf.estimate()
    }
}

fn c7() -> Verdict {
    let t = Instant::now();
    let p = KiteParams::default();
    let cfg = EkfConfig::default();
    let sim = SimConfig::default();
    let wind = WindParams::default();

    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    let mut complete = true;
    for i in 0..4 {
        let sc = sample_scenario(&DistributionSpec::uniform(), &NoiseSpec::default(), &sim, 5, i).unwrap();
        let mut est = Watched { ekf: Ekf::new(cfg, p), min_eig: f64::INFINITY, asym: 0.0 };
        let rec = simulate_closed_loop(&sc, &mut Sweep(0), &mut est, &sim, &p, &wind.with_mean(sc.v_m)).unwrap();
        complete &= rec.is_complete() && rec.fault.is_none();
        min_eig = min_eig.min(est.min_eig);
        asym = asym.max(est.asym);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut jac_err = 0.0f64;
    for _ in 0..100 {
        let x = Vector5::new(
            rng.random_range(0.3..1.2),
            rng.random_range(-1.0..1.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(4.0..6.0),
            rng.random_range(6.0..10.0),
        );
        let u = rng.random_range(-10.0..10.0);
        let (_, f) = propagate(&x, u, &cfg, &p).unwrap();
        for j in 0..5 {
            let h = 1e-6 * x[j].abs().max(1.0);
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let d = (propagate(&xp, u, &cfg, &p).unwrap().0 - propagate(&xm, u, &cfg, &p).unwrap().0) / (2.0 * h);
            for i in 0..5 {
                jac_err = jac_err.max((d[i] - f[(i, j)]).abs());
            }
        }
    }

    let quiet = NoiseSpec { meas_std: [0.0; 3], ..NoiseSpec::default() };
    let mut worst_late = 0.0f64;
    for i in 0..4 {
        let sc = sample_scenario(&DistributionSpec::uniform(), &quiet, &sim, 6, i).unwrap();
        let rec = simulate_closed_loop(&sc, &mut Sweep(0), &mut Ekf::new(cfg, p), &sim, &p, &wind.with_mean(sc.v_m)).unwrap();
        complete &= rec.fault.is_none();
        let k10 = (10.0 / sim.t_c).round() as usize;
        for (x, e) in rec.states.iter().zip(&rec.estimates).skip(k10) {
            let err = (x.theta - e[0]).abs().max((x.phi - e[1]).abs()).max((x.psi - e[2]).abs());
            worst_late = worst_late.max(err);
        }
    }
    let (fast, time) = within(t, Duration::from_secs(30));
    Verdict::hard(
        complete && min_eig >= 0.0 && asym <= 1e-12 && jac_err < 1e-5 && worst_late < 1e-2 && fast,
        format!(
            "min eig {min_eig:.2e}, asymmetry {asym:.1e}, Jacobian error {jac_err:.2e}, \
             noiseless angle error after 10 s {worst_late:.2e}, {time}"
        ),
    )
}

fn arch(n_in: usize, layers: usize, hidden: usize, n_out: usize) -> Architecture {
    Architecture { n_in, layers, hidden, n_out }
}

fn c8() -> Verdict {
    use nalgebra::DMatrix;
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = arch(rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(2..=6), rng.random_range(1..=2));
        let mut p = MlpParams::init(a, seed).unwrap();
        for b in p.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = DMatrix::from_fn(a.n_in, 7, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(a.n_out, 7, |_, _| rng.random_range(-1.0..1.0));
        let (_, g) = p.loss_and_grad(&x, &y);
        let loss = |q: &MlpParams| q.loss_and_grad(&x, &y).0;
        let mut check = |analytic: f64, bump: &dyn Fn(&mut MlpParams, f64)| {
            let h = 1e-6;
            let mut pp = p.clone();
            bump(&mut pp, h);
            let mut pm = p.clone();
            bump(&mut pm, -h);
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6));
        };
        for l in 0..p.weights.len() {
            for i in 0..p.weights[l].nrows() {
                for j in 0..p.weights[l].ncols() {
                    check(g.weights[l][(i, j)], &|q, h| q.weights[l][(i, j)] += h);
                }
                check(g.biases[l][i], &|q, h| q.biases[l][i] += h);
            }
        }
    }
    let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0, ((i * 7) % 10) as f64 / 9.0]).collect();
    let ys: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64 * 1.3).sin()]).collect();
    let cfg = TrainConfig {
        epochs: 3000,
        batch_size: 10,
        learning_rate: 3e-3,
        validation_fraction: 0.0,
        seed: 1,
        ..Default::default()
    };
    let m = train(&xs, &ys, arch(2, 2, 20, 1), &cfg).unwrap();
    let mse = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (m.predict(x).unwrap()[0] - y[0]).powi(2))
        .sum::<f64>()
        / xs.len() as f64;
    let (fast, time) = within(t, Duration::from_secs(60));
    Verdict::hard(
        worst < 1e-5 && mse < 1e-4 && fast,
        format!("worst relative gradient error {worst:.2e}, memorization MSE {mse:.2e}, {time}"),
    )
}

fn c9() -> Verdict {
    let t = Instant::now();
    let p = KiteParams::default();
    let nmpc = |eta: f64| {
        let cfg = OcpConfig { eta, tree: TreeConfig { n_p: 20, ..Default::default() }, ..Default::default() };
        MsNmpc::new(cfg, p).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let m = nmpc(2.0);
    let mut grad_err = 0.0f64;
    for _ in 0..5 {
        let x = KiteState::new(rng.random_range(0.25..0.5), rng.random_range(-0.6..0.6), rng.random_range(-1.5..1.5));
        let obj = m.objective(x, 1.0);
        let w: Vec<f64> = (0..m.tree.n_vars()).map(|_| rng.random_range(-8.0..8.0)).collect();
        let mut g = vec![0.0; w.len()];
        obj.value_grad(&w, &mut g);
        for i in 0..w.len() {
            let h = 1e-6;
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (obj.value(&wp) - obj.value(&wm)) / (2.0 * h);
            grad_err = grad_err.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2));
        }
    }

    // every branch reads the root input from one slot and owns the rest
    let tree = &m.tree;
    let mut slots = std::collections::HashSet::new();
    let mut structural = true;
    for b in 0..tree.n_branches() {
        structural &= tree.var_index(b, 0) == 0;
        for k in 1..tree.n_p {
            structural &= slots.insert(tree.var_index(b, k));
        }
    }
    structural &= slots.len() + 1 == tree.n_vars();

    // Best of a cold start and the closed-loop restart guesses, since the
    // problem is nonconvex. With the soft constraint, states whose tightened
    // bound cannot be met within the horizon may lose a few cm as the backoff
    // grows, hence the tolerance.
    let etas = [0.0, 2.0, 4.0, 6.0];
    let family: Vec<MsNmpc> = etas.iter().map(|&e| nmpc(e)).collect();
    let best = |m: &MsNmpc, x: &KiteState| {
        let mut best = m.solve(x, 0.0, None);
        for &c in &m.cfg.restart_inputs {
            let s = m.solve(x, 0.0, Some(&vec![c; m.tree.n_vars()]));
            if s.status.is_ok() && (!best.status.is_ok() || s.objective < best.objective) {
                best = s;
            }
        }
        best
    };
    let mut monotone = 0;
    let mut unattainable = 0;
    let mut shared_root = true;
    for _ in 0..20 {
        let x = KiteState::new(rng.random_range(0.25..0.6), rng.random_range(-0.6..0.6), rng.random_range(-3.0..3.0));
        let heights: Vec<f64> = family
            .iter()
            .map(|m| {
                let s = best(m, &x);
                shared_root &= s.branch_inputs.iter().all(|b| b[0].to_bits() == s.u0.to_bits());
                s.min_predicted_height(&p)
            })
            .collect();
        if heights[3] < p.h_min + etas[3] - 0.05 {
            unattainable += 1;
        }
        if heights.windows(2).all(|w| w[1] >= w[0] - 0.1) {
            monotone += 1;
        }
    }
    let (fast, time) = within(t, Duration::from_secs(300));
    Verdict::hard(
        grad_err < 1e-4 && structural && shared_root && monotone == 20 && fast,
        format!(
            "gradient error {grad_err:.2e}, tree structure {structural}, shared root {shared_root}, \
             backoff monotone on {monotone}/20 states ({unattainable} with an unattainable \
             tightened bound), {time}"
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<(usize, Box<dyn Fn() -> Verdict>)> = vec![
        (1, Box::new(c1)),
        (2, Box::new(c2)),
        (3, Box::new(c3)),
        (4, Box::new(c4)),
        (5, Box::new(c5)),
        (6, Box::new(c6)),
        (7, Box::new(c7)),
        (8, Box::new(c8)),
        (9, Box::new(c9)),
        (10, Box::new(desk::c10)),
        (11, Box::new(desk::c11)),
        (12, Box::new(desk::c12)),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut hard_failures = Vec::new();
    for (i, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&i)) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(|| f()))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::hard(false, format!("panicked: {msg}"))
            });
        // straight to the handle so the lines survive the harness capture
        let mut out = std::io::stdout().lock();
        writeln!(out, "criterion {i:>2}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail).unwrap();
        out.flush().unwrap();
        if !v.pass && v.hard {
            hard_failures.push(i);
        }
    }
    assert!(hard_failures.is_empty(), "hard failures: {hard_failures:?}");
}
