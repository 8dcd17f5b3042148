//! Order-statistics certification of a finite family of controllers.
//!
//! Given `N` i.i.d. scenarios and `M` controllers, the `r`-th largest
//! indicator value of each controller is, with confidence at least `1 - δ`,
//! a level that the indicator exceeds with probability at most `ε`, for all
//! controllers simultaneously, provided
//!
//! ```text
//! sum_{j=0}^{r-1} C(N, j) ε^j (1-ε)^(N-j) <= δ / M.
//! ```
//!
//! [`min_samples`] gives the closed-form sufficient sample size and
//! [`exact_min_samples`] the smallest `N` that satisfies the inequality.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{param, Error, Result};

/// Indicator outcomes of one controller over a shared scenario set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    controller_id: String,
    #[serde(with = "crate::serde_f64::vec")]
    values: Vec<f64>,
}

impl IndicatorVector {
    /// Infinite entries are accepted (faulted simulations are recorded as
    /// `+inf`), NaN is not.
    pub fn new(controller_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(param("indicator vector must have at least one entry"));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(param(format!("indicator vector entry {i} is NaN")));
        }
        Ok(Self {
            controller_id: controller_id.into(),
            values,
        })
    }

    pub fn controller_id(&self) -> &str {
        &self.controller_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Violation probability, confidence, discarding parameter and family size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskSpec {
    pub epsilon: f64,
    pub delta: f64,
    pub r: usize,
    pub m: usize,
}

/// The nominal campaign: ε = 0.02, δ = 1e-6, four discarded worst cases,
/// four candidate controllers.
impl Default for RiskSpec {
    fn default() -> Self {
        Self { epsilon: 0.02, delta: 1e-6, r: 4, m: 4 }
    }
}

impl RiskSpec {
    pub fn new(epsilon: f64, delta: f64, r: usize, m: usize) -> Result<Self> {
        let spec = Self {
            epsilon,
            delta,
            r,
            m,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(param(format!("epsilon must lie in (0,1), got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(param(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.r < 1 {
            return Err(param("discarding parameter r must be >= 1"));
        }
        if self.m < 1 {
            return Err(param("family size M must be >= 1"));
        }
        Ok(())
    }

    /// Per-controller failure budget `δ / M`.
    pub fn budget(&self) -> f64 {
        self.delta / self.m as f64
    }
}

/// Result of certifying a family on a shared sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub risk: RiskSpec,
    pub n_used: usize,
    pub controller_ids: Vec<String>,
    #[serde(with = "crate::serde_f64::vec")]
    pub levels: Vec<f64>,
    pub safe_flags: Vec<bool>,
    pub threshold: f64,
    /// `binomial_tail(n_used, ε, r-1)`, kept for audit.
    pub failure_bound: f64,
}

impl Certificate {
    pub fn level_of(&self, controller_id: &str) -> Option<f64> {
        self.controller_ids
            .iter()
            .position(|c| c == controller_id)
            .map(|i| self.levels[i])
    }
}

/// The `r`-th largest entry of `v`, counting ties with multiplicity.
pub fn generalized_max(v: &IndicatorVector, r: usize) -> Result<f64> {
    generalized_max_slice(v.values(), r)
}

pub fn generalized_max_slice(values: &[f64], r: usize) -> Result<f64> {
    let n = values.len();
    if r < 1 || r > n {
        return Err(param(format!(
            "discarding parameter r={r} out of range 1..={n}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(param("generalized max of a vector containing NaN"));
    }
    let mut sorted = values.to_vec();
    // Descending; NaN excluded above so total_cmp agrees with the numeric order.
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[r - 1])
}

/// `sum_{j=0}^{k} C(n,j) ε^j (1-ε)^(n-j)`, evaluated term-wise in log space.
pub fn binomial_tail(n: u64, epsilon: f64, k: u64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(param(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if k >= n {
        return Ok(1.0);
    }
    let nf = n as f64;
    let ln_eps = epsilon.ln();
    let ln_1m = (-epsilon).ln_1p();
    let ln_n_fact = ln_gamma(nf + 1.0);
    let log_terms: Vec<f64> = (0..=k)
        .map(|j| {
            let jf = j as f64;
            let ln_choose = if j == 0 {
                0.0
            } else {
                ln_n_fact - ln_gamma(jf + 1.0) - ln_gamma(nf - jf + 1.0)
            };
            ln_choose + jf * ln_eps + (nf - jf) * ln_1m
        })
        .collect();
    let peak = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let scaled = neumaier_sum(log_terms.iter().map(|l| (l - peak).exp()));
    Ok((peak.exp() * scaled).clamp(0.0, 1.0))
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Closed-form sufficient sample size
/// `ceil((r-1 + ln(M/δ) + sqrt(2(r-1) ln(M/δ))) / ε)`.
///
/// The returned value is checked against the binomial inequality before it
/// is handed out.
pub fn min_samples(risk: &RiskSpec) -> Result<usize> {
    risk.validate()?;
    let rm1 = (risk.r - 1) as f64;
    let log_term = (risk.m as f64 / risk.delta).ln();
    let bound = (rm1 + log_term + (2.0 * rm1 * log_term).sqrt()) / risk.epsilon;
    let n = (bound.ceil() as usize).max(risk.r);
    let tail = binomial_tail(n as u64, risk.epsilon, (risk.r - 1) as u64)?;
    if tail > risk.budget() {
        return Err(Error::Numerical(format!(
            "closed-form N={n} violates the binomial inequality ({tail:e} > {:e})",
            risk.budget()
        )));
    }
    Ok(n)
}

/// Smallest `N >= r` with `binomial_tail(N, ε, r-1) <= δ/M`.
///
/// The tail is nonincreasing in `N`, so a bisection between `r` and the
/// closed-form bound finds it.
pub fn exact_min_samples(risk: &RiskSpec) -> Result<usize> {
    let upper = min_samples(risk)?;
    let k = (risk.r - 1) as u64;
    let budget = risk.budget();
    let ok = |n: usize| -> Result<bool> { Ok(binomial_tail(n as u64, risk.epsilon, k)? <= budget) };
    let mut lo = risk.r; // candidate, may fail
    let mut hi = upper; // known to satisfy
    if ok(lo)? {
        return Ok(lo);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Certifies every controller of the family at level `ψ(v_i, r)`.
///
/// All vectors must share one length `N`, the family must have exactly
/// `risk.m` members and `N` must satisfy the binomial inequality.
pub fn certify_family(
    vectors: &[IndicatorVector],
    risk: &RiskSpec,
    threshold: f64,
) -> Result<Certificate> {
    risk.validate()?;
    if vectors.len() != risk.m {
        return Err(Error::Certification(format!(
            "family has {} indicator vectors but the risk spec declares M={}",
            vectors.len(),
            risk.m
        )));
    }
    let n = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != n) {
        return Err(Error::Certification(format!(
            "indicator vectors have unequal lengths ({} has {}, expected {n})",
            bad.controller_id(),
            bad.len()
        )));
    }
    let required = exact_min_samples(risk)?;
    if n < required {
        return Err(Error::Certification(format!(
            "N={n} scenarios is below the required {required} for {risk:?}"
        )));
    }
    let failure_bound = binomial_tail(n as u64, risk.epsilon, (risk.r - 1) as u64)?;
    let levels = vectors
        .iter()
        .map(|v| generalized_max(v, risk.r))
        .collect::<Result<Vec<_>>>()?;
    let safe_flags = levels.iter().map(|&g| g <= threshold).collect();
    Ok(Certificate {
        risk: *risk,
        n_used: n,
        controller_ids: vectors.iter().map(|v| v.controller_id().to_string()).collect(),
        levels,
        safe_flags,
        threshold,
        failure_bound,
    })
}
