//! Reproducible i.i.d. scenario generation.
//!
//! Every scenario is drawn from ChaCha streams keyed by
//! `(master_seed, index, tag)`, so scenario `i` is the same no matter how
//! many scenarios are generated or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, Normal, Pareto, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{param, Result};
use crate::plant::{KiteState, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// `(a, b)`: uniform on `[a, b]`.
    Uniform,
    /// `(mean, std)`.
    Normal,
    /// `(scale, offset)`: `scale * Beta(2, 5) + offset`.
    Beta,
    /// `(tail_index, offset)`: unit-scale Pareto type I plus offset.
    Pareto,
}

/// Distribution family and per-variable parameter pairs. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub family: Family,
    pub theta0_deg: (f64, f64),
    pub phi0_deg: (f64, f64),
    pub psi0_deg: (f64, f64),
    pub e0: (f64, f64),
    pub v_m: (f64, f64),
}

const BETA_SHAPE: (f64, f64) = (2.0, 5.0);

impl DistributionSpec {
    pub fn uniform() -> Self {
        Self {
            family: Family::Uniform,
            theta0_deg: (28.0, 30.0),
            phi0_deg: (-10.0, 10.0),
            psi0_deg: (-2.0, 2.0),
            e0: (4.0, 6.0),
            v_m: (7.0, 9.0),
        }
    }

    pub fn normal() -> Self {
        Self {
            family: Family::Normal,
            theta0_deg: (29.0, 0.35),
            phi0_deg: (0.0, 3.5),
            psi0_deg: (0.0, 0.7),
            e0: (5.0, 0.35),
            v_m: (8.0, 0.35),
        }
    }

    pub fn beta() -> Self {
        Self {
            family: Family::Beta,
            theta0_deg: (2.0, 28.0),
            phi0_deg: (20.0, -10.0),
            psi0_deg: (4.0, -2.0),
            e0: (2.0, 4.0),
            v_m: (2.0, 7.0),
        }
    }

    pub fn pareto() -> Self {
        Self {
            family: Family::Pareto,
            theta0_deg: (5.0, 28.0),
            phi0_deg: (5.0, -10.0),
            psi0_deg: (5.0, 2.0),
            e0: (5.0, 4.5),
            v_m: (5.0, 7.5),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "uniform" => Some(Self::uniform()),
            "normal" => Some(Self::normal()),
            "beta" => Some(Self::beta()),
            "pareto" => Some(Self::pareto()),
            _ => None,
        }
    }

    fn pairs(&self) -> [(&'static str, (f64, f64)); 5] {
        [
            ("theta0", self.theta0_deg),
            ("phi0", self.phi0_deg),
            ("psi0", self.psi0_deg),
            ("e0", self.e0),
            ("v_m", self.v_m),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (a, b)) in self.pairs() {
            if !(a.is_finite() && b.is_finite()) {
                return Err(param(format!("{name}: non-finite distribution parameters")));
            }
            let ok = match self.family {
                Family::Uniform => a < b,
                Family::Normal => b > 0.0,
                Family::Beta => a > 0.0,
                Family::Pareto => a > 0.0,
            };
            if !ok {
                return Err(param(format!(
                    "{name}: parameters ({a}, {b}) invalid for {:?}",
                    self.family
                )));
            }
        }
        Ok(())
    }

    /// Closed support interval per variable (`±inf` for unbounded ends).
    pub fn support(&self) -> [(f64, f64); 5] {
        self.pairs().map(|(_, (a, b))| match self.family {
            Family::Uniform => (a, b),
            Family::Normal => (f64::NEG_INFINITY, f64::INFINITY),
            Family::Beta => (b, a + b),
            Family::Pareto => (b + 1.0, f64::INFINITY),
        })
    }

    /// True if every variable's support lies inside `other`'s.
    pub fn support_within(&self, other: &Self) -> bool {
        self.support()
            .iter()
            .zip(other.support().iter())
            .all(|(s, o)| s.0 >= o.0 && s.1 <= o.1)
    }

    fn draw_one(&self, pair: (f64, f64), rng: &mut ChaCha20Rng) -> f64 {
        let (a, b) = pair;
        match self.family {
            Family::Uniform => Uniform::new_inclusive(a, b).expect("validated").sample(rng),
            Family::Normal => Normal::new(a, b).expect("validated").sample(rng),
            Family::Beta => {
                a * Beta::new(BETA_SHAPE.0, BETA_SHAPE.1).expect("constant shape").sample(rng) + b
            }
            Family::Pareto => Pareto::new(1.0, a).expect("validated").sample(rng) + b,
        }
    }
}

/// Noise levels shared by every distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub p_v0_std: f64,
    pub w_tb_std: f64,
    /// Measurement noise standard deviations for `(θ, φ, v0)`.
    pub meas_std: [f64; 3],
    pub init_delta_std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            p_v0_std: 0.25,
            w_tb_std: 0.25,
            meas_std: [0.01, 0.01, 0.05],
            init_delta_std: 0.05,
        }
    }
}

/// One complete uncertainty realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub seed: u64,
    pub x0: KiteState,
    pub e0: f64,
    pub v_m: f64,
    pub p_v0: f64,
    pub u_prev0: f64,
    /// One white-noise sample per control period.
    pub w_tb_seq: Vec<f64>,
    /// One `(θ, φ, v0)` noise triple per estimator step.
    pub meas_noise_seq: Vec<[f64; 3]>,
    pub init_deltas: [f64; 5],
}

pub(crate) fn stream(master_seed: u64, index: u64, tag: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

pub fn sample_scenario(
    spec: &DistributionSpec,
    noise: &NoiseSpec,
    cfg: &SimConfig,
    master_seed: u64,
    index: u64,
) -> Result<Scenario> {
    spec.validate()?;
    let n_ekf = cfg.estimator_steps_per_control()? * cfg.n_sim;

    let mut prm = stream(master_seed, index, "params");
    let theta = spec.draw_one(spec.theta0_deg, &mut prm).to_radians();
    let phi = spec.draw_one(spec.phi0_deg, &mut prm).to_radians();
    let psi = spec.draw_one(spec.psi0_deg, &mut prm).to_radians();
    let e0 = spec.draw_one(spec.e0, &mut prm);
    let v_m = spec.draw_one(spec.v_m, &mut prm);

    let std_normal = |s: f64| Normal::new(0.0, s).map_err(|e| param(e.to_string()));

    let mut wind = stream(master_seed, index, "wind");
    let p_v0 = std_normal(noise.p_v0_std)?.sample(&mut wind);
    let wtb = std_normal(noise.w_tb_std)?;
    let w_tb_seq = (0..cfg.n_sim).map(|_| wtb.sample(&mut wind)).collect();

    let mut meas = stream(master_seed, index, "meas");
    let dists = [
        std_normal(noise.meas_std[0])?,
        std_normal(noise.meas_std[1])?,
        std_normal(noise.meas_std[2])?,
    ];
    let meas_noise_seq = (0..n_ekf)
        .map(|_| {
            [
                dists[0].sample(&mut meas),
                dists[1].sample(&mut meas),
                dists[2].sample(&mut meas),
            ]
        })
        .collect();

    let mut init = stream(master_seed, index, "init");
    let delta = Normal::new(1.0, noise.init_delta_std).map_err(|e| param(e.to_string()))?;
    let init_deltas = std::array::from_fn(|_| delta.sample(&mut init));

    let seed = stream(master_seed, index, "seed").random::<u64>();

    Ok(Scenario {
        id: index,
        seed,
        x0: KiteState::new(theta, phi, psi),
        e0,
        v_m,
        p_v0,
        u_prev0: 0.0,
        w_tb_seq,
        meas_noise_seq,
        init_deltas,
    })
}

pub fn scenario_batch(
    spec: &DistributionSpec,
    noise: &NoiseSpec,
    cfg: &SimConfig,
    master_seed: u64,
    n: usize,
) -> Result<Vec<Scenario>> {
    if n == 0 {
        return Err(param("scenario batch size must be >= 1"));
    }
    (0..n as u64)
        .map(|i| sample_scenario(spec, noise, cfg, master_seed, i))
        .collect()
}

/// SHA-256 over the JSON encoding of a batch, hex encoded.
pub fn batch_hash(batch: &[Scenario]) -> Result<String> {
    let mut h = Sha256::new();
    for s in batch {
        h.update(serde_json::to_vec(s)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
