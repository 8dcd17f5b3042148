//! Scalar performance indicators of recorded trajectories.
//!
//! Faulted runs map to `+inf` (or 1 for the binary indicator) so they always
//! count as the worst outcome.

use serde::{Deserialize, Serialize};

use crate::trajectory::TrajectoryRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    MaxViolation,
    AvgViolation,
    AvgCost,
    HeightMargin,
    NegAvgThrust,
    BinaryAdmissible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSpec {
    pub kind: IndicatorKind,
    #[serde(default = "default_h_min")]
    pub h_min: f64,
    #[serde(default = "default_w_f")]
    pub w_f: f64,
    #[serde(default = "default_w_u")]
    pub w_u: f64,
}

fn default_h_min() -> f64 {
    100.0
}

fn default_w_f() -> f64 {
    1e-4
}

fn default_w_u() -> f64 {
    0.5
}

impl IndicatorSpec {
    pub fn new(kind: IndicatorKind) -> Self {
        Self {
            kind,
            h_min: default_h_min(),
            w_f: default_w_f(),
            w_u: default_w_u(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            IndicatorKind::MaxViolation => "max_violation",
            IndicatorKind::AvgViolation => "avg_violation",
            IndicatorKind::AvgCost => "avg_cost",
            IndicatorKind::HeightMargin => "height_margin",
            IndicatorKind::NegAvgThrust => "neg_avg_thrust",
            IndicatorKind::BinaryAdmissible => "binary_admissible",
        }
    }

    pub fn evaluate(&self, traj: &TrajectoryRecord) -> f64 {
        match self.kind {
            IndicatorKind::MaxViolation => max_violation(traj, self.h_min),
            IndicatorKind::AvgViolation => avg_violation(traj, self.h_min),
            IndicatorKind::AvgCost => avg_cost(traj, self.w_f, self.w_u),
            IndicatorKind::HeightMargin => height_margin(traj, self.h_min),
            IndicatorKind::NegAvgThrust => neg_avg_thrust(traj),
            IndicatorKind::BinaryAdmissible => binary_admissible(traj, self.h_min),
        }
    }
}

/// `max_k (h_min - h_k)`.
pub fn max_violation_of(heights: &[f64], h_min: f64) -> f64 {
    heights.iter().map(|h| h_min - h).fold(f64::NEG_INFINITY, f64::max)
}

/// `(1/N) Σ_k max(0, h_min - h_k)`.
pub fn avg_violation_of(heights: &[f64], h_min: f64) -> f64 {
    if heights.is_empty() {
        return 0.0;
    }
    heights.iter().map(|h| (h_min - h).max(0.0)).sum::<f64>() / heights.len() as f64
}

/// Mean of `-w_F T_F(k) + w_u (u(k) - u(k-1))²` with `u(-1) = u_prev0`.
pub fn avg_cost_of(thrust: &[f64], inputs: &[f64], u_prev0: f64, w_f: f64, w_u: f64) -> f64 {
    assert_eq!(thrust.len(), inputs.len(), "thrust/input length mismatch");
    if inputs.is_empty() {
        return 0.0;
    }
    let mut prev = u_prev0;
    let mut sum = 0.0;
    for (t, &u) in thrust.iter().zip(inputs) {
        sum += -w_f * t + w_u * (u - prev).powi(2);
        prev = u;
    }
    sum / inputs.len() as f64
}

pub fn neg_avg_thrust_of(thrust: &[f64]) -> f64 {
    if thrust.is_empty() {
        return 0.0;
    }
    -thrust.iter().sum::<f64>() / thrust.len() as f64
}

fn complete(traj: &TrajectoryRecord) -> bool {
    traj.fault.is_none()
}

/// Largest height violation over `k = 0..N_sim-1`.
pub fn max_violation(traj: &TrajectoryRecord, h_min: f64) -> f64 {
    if !complete(traj) {
        return f64::INFINITY;
    }
    max_violation_of(&traj.height[..traj.steps()], h_min)
}

pub fn avg_violation(traj: &TrajectoryRecord, h_min: f64) -> f64 {
    if !complete(traj) {
        return f64::INFINITY;
    }
    avg_violation_of(&traj.height[..traj.steps()], h_min)
}

pub fn avg_cost(traj: &TrajectoryRecord, w_f: f64, w_u: f64) -> f64 {
    if !complete(traj) {
        return f64::INFINITY;
    }
    avg_cost_of(&traj.thrust, &traj.inputs, traj.u_prev0, w_f, w_u)
}

/// Largest height violation over `k = 0..=N_sim`.
pub fn height_margin(traj: &TrajectoryRecord, h_min: f64) -> f64 {
    if !complete(traj) {
        return f64::INFINITY;
    }
    max_violation_of(&traj.height, h_min)
}

pub fn neg_avg_thrust(traj: &TrajectoryRecord) -> f64 {
    if !complete(traj) {
        return f64::INFINITY;
    }
    neg_avg_thrust_of(&traj.thrust)
}

/// 0 for an admissible run, 1 otherwise.
pub fn binary_admissible(traj: &TrajectoryRecord, h_min: f64) -> f64 {
    if avg_violation(traj, h_min) > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{KiteParams, KiteState, SimConfig, WindParams};
    use crate::scenario::Scenario;
    use proptest::prelude::*;

    #[test]
    fn max_violation_examples() {
        assert_eq!(max_violation_of(&[105.0, 103.0, 101.0], 100.0), -1.0);
        assert!((max_violation_of(&[120.0, 98.318, 110.0], 100.0) - 1.682).abs() < 1e-12);
        assert_eq!(max_violation_of(&[100.0; 4], 100.0), 0.0);
    }

    #[test]
    fn avg_violation_examples() {
        assert_eq!(avg_violation_of(&[101.0, 150.0], 100.0), 0.0);
        assert_eq!(avg_violation_of(&[99.0, 101.0], 100.0), 0.5);
        assert_eq!(avg_violation_of(&[98.0, 99.0, 103.0], 100.0), 1.0);
    }

    #[test]
    fn avg_cost_examples() {
        let n = 6;
        assert_eq!(avg_cost_of(&vec![-1.0; n], &vec![0.0; n], 0.0, 1.0, 0.0), 1.0);
        assert!((avg_cost_of(&vec![2e5; n], &vec![0.0; n], 0.0, 1e-4, 0.5) + 20.0).abs() < 1e-12);
        let alt: Vec<f64> = (0..n).map(|k| if k % 2 == 0 { -1.0 } else { 1.0 }).collect();
        assert_eq!(avg_cost_of(&vec![0.0; n], &alt, 1.0, 1e-4, 0.5), 2.0);
    }

    #[test]
    fn thrust_and_margin_examples() {
        assert!((neg_avg_thrust_of(&[224_185.0; 5]) + 224_185.0).abs() < 1e-9);
        assert_eq!(neg_avg_thrust_of(&[0.0; 3]), 0.0);
        assert_eq!(neg_avg_thrust_of(&[1e5, 3e5]), -2e5);
        assert!((max_violation_of(&[130.0, 100.316], 100.0) + 0.316).abs() < 1e-12);
        assert!((max_violation_of(&[101.818, 140.0], 100.0) + 1.818).abs() < 1e-12);
    }

    fn synthetic(heights: &[f64], fault: bool) -> TrajectoryRecord {
        let p = KiteParams::default();
        let n = heights.len() - 1;
        let sc = Scenario {
            id: 0,
            seed: 0,
            x0: KiteState::new(0.5, 0.0, 0.0),
            e0: 5.0,
            v_m: 8.0,
            p_v0: 0.0,
            u_prev0: 0.0,
            w_tb_seq: vec![],
            meas_noise_seq: vec![],
            init_deltas: [1.0; 5],
        };
        let sim = SimConfig { n_sim: n, ..Default::default() };
        let mut rec = TrajectoryRecord::new(&sc, "synthetic".into(), p, sim, WindParams::default());
        for (k, h) in heights.iter().enumerate() {
            let theta = (h / p.tether_length).asin();
            rec.push_state(KiteState::new(theta, 0.0, 0.0), 8.0, [0.0; 5]);
            if k < n {
                rec.push_input(0.0, 1e5, true);
            }
        }
        if fault {
            rec.fault = Some("test".into());
        }
        rec
    }

    #[test]
    fn record_level_index_ranges() {
        // final state only enters the height margin
        let rec = synthetic(&[110.0, 105.0, 99.0], false);
        assert!(max_violation(&rec, 100.0) < 0.0);
        assert!(height_margin(&rec, 100.0) > 0.0);
        assert_eq!(binary_admissible(&rec, 100.0), 0.0);
        let rec = synthetic(&[110.0, 99.0, 120.0], false);
        assert_eq!(binary_admissible(&rec, 100.0), 1.0);
    }

    #[test]
    fn faulted_runs_are_worst_case() {
        let rec = synthetic(&[110.0, 120.0], true);
        for kind in [
            IndicatorKind::MaxViolation,
            IndicatorKind::AvgViolation,
            IndicatorKind::AvgCost,
            IndicatorKind::HeightMargin,
            IndicatorKind::NegAvgThrust,
        ] {
            assert_eq!(IndicatorSpec::new(kind).evaluate(&rec), f64::INFINITY);
        }
        assert_eq!(IndicatorSpec::new(IndicatorKind::BinaryAdmissible).evaluate(&rec), 1.0);
    }

    proptest! {
        #[test]
        fn admissibility_equivalences(hs in prop::collection::vec(90.0f64..130.0, 2..40)) {
            let rec = synthetic(&hs, false);
            let bin = binary_admissible(&rec, 100.0);
            let mv = max_violation(&rec, 100.0);
            let av = avg_violation(&rec, 100.0);
            prop_assert_eq!(bin == 1.0, mv > 0.0);
            prop_assert_eq!(mv > 0.0, av > 0.0);
            let spec = IndicatorSpec::new(IndicatorKind::HeightMargin);
            prop_assert_eq!(spec.evaluate(&rec).to_bits(), spec.evaluate(&rec.clone()).to_bits());
            prop_assert_eq!(height_margin(&rec, 100.0), max_violation_of(&rec.height, 100.0));
        }
    }
}
