//! Scenario tree with a robust horizon of one stage.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub e0_values: Vec<f64>,
    pub v0_values: Vec<f64>,
    pub n_p: usize,
    pub robust_horizon: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            e0_values: vec![4.0, 6.0],
            v0_values: vec![6.0, 10.0],
            n_p: 40,
            robust_horizon: 1,
        }
    }
}

/// Parameter realization `(E0, v0)` carried by one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub e0: f64,
    pub v0: f64,
}

/// A shared root input followed by independent input sequences per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub branches: Vec<Branch>,
    pub n_p: usize,
}

pub fn build_tree(cfg: &TreeConfig) -> Result<ScenarioTree> {
    if cfg.robust_horizon != 1 {
        return Err(param(format!(
            "only a robust horizon of 1 is supported, got {}",
            cfg.robust_horizon
        )));
    }
    if cfg.n_p < 1 {
        return Err(param("prediction horizon must be >= 1"));
    }
    if cfg.e0_values.is_empty() || cfg.v0_values.is_empty() {
        return Err(param("scenario tree needs at least one E0 and one v0 value"));
    }
    let mut branches = Vec::with_capacity(cfg.e0_values.len() * cfg.v0_values.len());
    for &e0 in &cfg.e0_values {
        for &v0 in &cfg.v0_values {
            if !(e0 > 0.0 && v0 > 0.0) {
                return Err(param(format!("branch ({e0}, {v0}) must be positive")));
            }
            branches.push(Branch { e0, v0 });
        }
    }
    Ok(ScenarioTree {
        branches,
        n_p: cfg.n_p,
    })
}

impl ScenarioTree {
    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Input nodes at prediction stage `k`.
    pub fn nodes_at_stage(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            self.n_branches()
        }
    }

    /// Length of the decision vector: one root input plus `N_p - 1` inputs
    /// per branch.
    pub fn n_vars(&self) -> usize {
        1 + self.n_branches() * (self.n_p - 1)
    }

    /// Position of branch `b`'s stage-`k` input in the decision vector.
    pub fn var_index(&self, b: usize, k: usize) -> usize {
        debug_assert!(b < self.n_branches() && k < self.n_p);
        if k == 0 {
            0
        } else {
            1 + b * (self.n_p - 1) + (k - 1)
        }
    }

    /// Input sequence of branch `b` extracted from a decision vector.
    pub fn branch_inputs(&self, w: &[f64], b: usize) -> Vec<f64> {
        (0..self.n_p).map(|k| w[self.var_index(b, k)]).collect()
    }
}
