use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EkfConfig;
use crate::indicators::{IndicatorKind, IndicatorSpec};
use crate::mlp::{Architecture, TrainConfig};
use crate::msnmpc::{DatasetConfig, OcpConfig};
use crate::plant::{KiteParams, SimConfig, WindParams};
use crate::scenario::{DistributionSpec, NoiseSpec};
use crate::validation::RiskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// Scenario-tree NMPC solved online.
    Ms,
    /// Trained network loaded from `params`.
    Dnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    /// Height backoff the controller was designed for, m.
    #[serde(default)]
    pub eta: f64,
    /// Model file for `dnn`; unused for `ms`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ControllerSpec {
    pub fn ms(eta: f64) -> Self {
        Self {
            kind: ControllerKind::Ms,
            eta,
            params: None,
            label: None,
        }
    }

    pub fn dnn(eta: f64, params: impl Into<PathBuf>) -> Self {
        Self {
            kind: ControllerKind::Dnn,
            eta,
            params: Some(params.into()),
            label: None,
        }
    }

    pub fn id(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None => {
                let kind = match self.kind {
                    ControllerKind::Ms => "ms",
                    ControllerKind::Dnn => "dnn",
                };
                format!("{kind}(eta={})", self.eta)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ekf,
    /// The controller sees the true state.
    StateFeedback,
}

/// An indicator together with the level below which a controller counts as
/// safe for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorEntry {
    #[serde(flatten)]
    pub spec: IndicatorSpec,
    #[serde(default)]
    pub threshold: f64,
}

/// Either a family name (`"uniform"`, `"normal"`, `"beta"`, `"pareto"`)
/// with its built-in parameters, or a full specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistributionChoice {
    Named(String),
    Spec(DistributionSpec),
}

impl DistributionChoice {
    pub fn resolve(&self) -> Result<DistributionSpec> {
        match self {
            Self::Named(n) => DistributionSpec::by_name(n)
                .ok_or_else(|| Error::Config(format!("unknown distribution {n:?}"))),
            Self::Spec(s) => Ok(*s),
        }
    }
}

impl Default for DistributionChoice {
    fn default() -> Self {
        Self::Named("uniform".into())
    }
}

fn default_indicators() -> Vec<IndicatorEntry> {
    vec![
        IndicatorEntry {
            spec: IndicatorSpec::new(IndicatorKind::MaxViolation),
            threshold: 0.0,
        },
        IndicatorEntry {
            spec: IndicatorSpec::new(IndicatorKind::NegAvgThrust),
            threshold: 0.0,
        },
    ]
}

/// Everything a campaign, a dataset run or a training run needs. Every
/// section has defaults, so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for the scenario pool; 0 uses all cores.
    pub workers: usize,
    /// Scenario count; must not be below the required sample size.
    pub n_scenarios: Option<usize>,
    /// Share of faulted scenarios above which a controller is degraded.
    pub max_fault_fraction: f64,
    pub persist_trajectories: bool,
    /// Trajectories per controller drawn in the plots.
    pub plot_trajectories: usize,
    pub estimator: EstimatorKind,
    pub distribution: DistributionChoice,
    pub risk: RiskSpec,
    /// The first entry decides the safe flags of the report.
    pub indicators: Vec<IndicatorEntry>,
    pub controllers: Vec<ControllerSpec>,
    pub noise: NoiseSpec,
    pub sim: SimConfig,
    pub plant: KiteParams,
    pub wind: WindParams,
    pub ekf: EkfConfig,
    pub ocp: OcpConfig,
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    pub training: TrainConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            output_dir: PathBuf::from("out"),
            workers: 0,
            n_scenarios: None,
            max_fault_fraction: 0.05,
            persist_trajectories: true,
            plot_trajectories: 10,
            estimator: EstimatorKind::Ekf,
            distribution: DistributionChoice::default(),
            risk: RiskSpec::default(),
            indicators: default_indicators(),
            controllers: Vec::new(),
            noise: NoiseSpec::default(),
            sim: SimConfig::default(),
            plant: KiteParams::default(),
            wind: WindParams::default(),
            ekf: EkfConfig::default(),
            ocp: OcpConfig::default(),
            dataset: DatasetConfig::default(),
            architecture: Architecture::default(),
            training: TrainConfig::default(),
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    }
}

impl CampaignConfig {
    /// Reads a TOML file; relative model paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            for c in &mut cfg.controllers {
                if let Some(p) = &c.params {
                    if p.is_relative() {
                        c.params = Some(base.join(p));
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the general settings; the controller family is checked by
    /// [`validate_family`](Self::validate_family).
    pub fn validate(&self) -> Result<()> {
        self.risk.validate().map_err(config_err)?;
        self.distribution.resolve()?.validate().map_err(config_err)?;
        self.sim.validate().map_err(config_err)?;
        self.plant.validate().map_err(config_err)?;
        self.ekf.validate().map_err(config_err)?;
        self.ocp.validate().map_err(config_err)?;
        if !(0.0..=1.0).contains(&self.max_fault_fraction) {
            return Err(Error::Config("max_fault_fraction must lie in [0, 1]".into()));
        }
        if self.indicators.is_empty() {
            return Err(Error::Config("at least one indicator is required".into()));
        }
        if self.indicators.iter().any(|i| i.threshold.is_nan()) {
            return Err(Error::Config("indicator thresholds must not be NaN".into()));
        }
        Ok(())
    }

    pub fn validate_family(&self) -> Result<()> {
        if self.controllers.len() != self.risk.m {
            return Err(Error::Config(format!(
                "{} controllers configured but the risk spec declares M={}",
                self.controllers.len(),
                self.risk.m
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.controllers {
            if !(c.eta >= 0.0 && c.eta.is_finite()) {
                return Err(Error::Config(format!("{}: backoff must be >= 0", c.id())));
            }
            if c.kind == ControllerKind::Dnn && c.params.is_none() {
                return Err(Error::Config(format!("{}: dnn controllers need a params path", c.id())));
            }
            if !seen.insert(c.id()) {
                return Err(Error::Config(format!("duplicate controller id {}", c.id())));
            }
        }
        Ok(())
    }

    /// Label distinguishing delayed campaigns in reports.
    pub fn timing_label(&self) -> String {
        if self.sim.input_delay > 0.0 {
            format!("input delay {} ms", self.sim.input_delay * 1e3)
        } else {
            "nominal".into()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: CampaignConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, CampaignConfig::default());
        assert_eq!(cfg.risk.m, 4);
        assert_eq!(cfg.sim.n_sim, 400);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = CampaignConfig::default();
        cfg.controllers = vec![ControllerSpec::ms(2.0), ControllerSpec::dnn(4.0, "m.json")];
        cfg.risk.m = 2;
        let back: CampaignConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_sections_and_named_distribution() {
        let text = r#"
            master_seed = 9
            distribution = "pareto"
            [risk]
            epsilon = 0.1
            delta = 0.01
            r = 2
            m = 2
            [sim]
            input_delay = 0.065
            [[controllers]]
            kind = "ms"
            eta = 0.0
            [[controllers]]
            kind = "dnn"
            eta = 6.0
            params = "nets/eta6.json"
            [[indicators]]
            kind = "max_violation"
        "#;
        let cfg: CampaignConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        cfg.validate_family().unwrap();
        assert_eq!(cfg.distribution.resolve().unwrap(), DistributionSpec::pareto());
        assert_eq!(cfg.sim.t_c, 0.15);
        assert_eq!(cfg.indicators[0].threshold, 0.0);
        assert_eq!(cfg.indicators[0].spec.h_min, 100.0);
        assert_eq!(cfg.timing_label(), "input delay 65 ms");
        assert_eq!(cfg.controllers[1].id(), "dnn(eta=6)");
    }

    #[test]
    fn family_checks() {
        let mut cfg = CampaignConfig::default();
        cfg.risk.m = 2;
        cfg.controllers = vec![ControllerSpec::ms(1.0)];
        assert!(matches!(cfg.validate_family(), Err(Error::Config(_))));
        cfg.controllers.push(ControllerSpec::ms(1.0));
        assert!(matches!(cfg.validate_family(), Err(Error::Config(_))));
        cfg.controllers[1] = ControllerSpec {
            params: None,
            ..ControllerSpec::dnn(2.0, "x")
        };
        assert!(matches!(cfg.validate_family(), Err(Error::Config(_))));
        cfg.controllers[1] = ControllerSpec::dnn(2.0, "x");
        cfg.validate_family().unwrap();
    }

    #[test]
    fn unknown_distribution_is_a_config_error() {
        let cfg = CampaignConfig {
            distribution: DistributionChoice::Named("cauchy".into()),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
