use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{histogram, line_plot, HLine, Series};
use crate::error::Result;
use crate::mlp::Model;
use crate::trajectory::TrajectoryRecord;
use crate::validation::{Certificate, IndicatorVector};

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub id: String,
    pub eta: f64,
    /// Scenarios run to the end without dropping below `h_min`.
    pub feasible: usize,
    pub faults: usize,
    /// Control steps whose solver did not report success.
    pub solver_failures: usize,
    /// Mean over completed runs of the run-average thrust, kN.
    #[serde(with = "crate::serde_f64")]
    pub mean_thrust_kn: f64,
    /// `ψ(v, r)` per configured indicator.
    #[serde(with = "crate::serde_f64::vec")]
    pub levels: Vec<f64>,
    /// Safe flag of the first indicator's certificate.
    pub safe: bool,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorResult {
    pub indicator: String,
    pub vectors: Vec<IndicatorVector>,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub wall_seconds: f64,
    pub per_controller_seconds: Vec<f64>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    /// `nominal` or the input delay.
    pub label: String,
    pub distribution: String,
    pub master_seed: u64,
    pub n_scenarios: usize,
    /// Closed-form sample size and the smallest N passing the binomial test.
    pub required_n: usize,
    pub exact_n: usize,
    /// Fingerprint of the shared scenario batch.
    pub batch_hash: String,
    pub h_min: f64,
    pub controllers: Vec<ControllerSummary>,
    pub indicators: Vec<IndicatorResult>,
    pub degraded: bool,
    /// Wall-clock figures; kept out of the JSON so reruns compare equal.
    #[serde(skip)]
    pub runtime: RuntimeStats,
    /// First few trajectories per controller, for plotting.
    #[serde(skip)]
    pub samples: Vec<Vec<TrajectoryRecord>>,
}

impl CampaignReport {
    pub fn summary(&self, id: &str) -> Option<&ControllerSummary> {
        self.controllers.iter().find(|c| c.id == id)
    }

    /// Per-controller table as CSV.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("controller,eta,n,feasible,faults,solver_failures,mean_thrust_kn");
        for ind in &self.indicators {
            let _ = write!(out, ",psi_{}", ind.indicator);
        }
        out.push_str(",safe,degraded\n");
        for c in &self.controllers {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                csv_field(&c.id),
                c.eta,
                self.n_scenarios,
                c.feasible,
                c.faults,
                c.solver_failures,
                c.mean_thrust_kn
            );
            for l in &c.levels {
                let _ = write!(out, ",{l}");
            }
            let _ = writeln!(out, ",{},{}", c.safe, c.degraded);
        }
        out
    }

    /// Markdown rendering of the same table with certificate details.
    pub fn table_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Campaign ({}, {} scenarios)\n", self.label, self.distribution);
        let _ = writeln!(
            out,
            "N = {} (closed form {}, exact {}), seed {}, batch {}\n",
            self.n_scenarios,
            self.required_n,
            self.exact_n,
            self.master_seed,
            &self.batch_hash[..16.min(self.batch_hash.len())]
        );
        let mut head = String::from("| controller | η (m) | feasible | faults | mean thrust (kN) |");
        let mut rule = String::from("|---|---|---|---|---|");
        for ind in &self.indicators {
            let _ = write!(head, " ψ {} |", ind.indicator);
            rule.push_str("---|");
        }
        head.push_str(" safe |");
        rule.push_str("---|");
        let _ = writeln!(out, "{head}\n{rule}");
        for c in &self.controllers {
            let _ = write!(
                out,
                "| {} | {} | {}/{} | {} | {:.1} |",
                c.id, c.eta, c.feasible, self.n_scenarios, c.faults, c.mean_thrust_kn
            );
            for l in &c.levels {
                let _ = write!(out, " {l:.3} |");
            }
            let _ = writeln!(out, " {} |", if c.safe { "yes" } else { "no" });
        }
        if let Some(first) = self.indicators.first() {
            let cert = &first.certificate;
            let _ = writeln!(
                out,
                "\nCertificate on `{}`: ε = {}, δ = {}, r = {}, M = {}, threshold {}, \
                 binomial failure bound {:.3e} (budget δ/M = {:.3e}).",
                first.indicator,
                cert.risk.epsilon,
                cert.risk.delta,
                cert.risk.r,
                cert.risk.m,
                cert.threshold,
                cert.failure_bound,
                cert.risk.budget()
            );
        }
        if self.degraded {
            out.push_str("\n**Degraded:** at least one controller exceeded the fault budget.\n");
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Height over time with the `h_min` and `h_min + η` lines.
pub fn height_plot(title: &str, runs: &[TrajectoryRecord], h_min: f64, eta: f64) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: format!("scenario {}", r.scenario_id),
            points: r
                .height
                .iter()
                .enumerate()
                .map(|(k, h)| (k as f64 * r.sim.t_c, *h))
                .collect(),
        })
        .collect();
    let mut lines = vec![HLine {
        y: h_min,
        label: format!("h_min = {h_min} m"),
        dashed: false,
    }];
    if eta > 0.0 {
        lines.push(HLine {
            y: h_min + eta,
            label: format!("h_min + η = {} m", h_min + eta),
            dashed: true,
        });
    }
    line_plot(title, "time (s)", "height (m)", &series, &lines)
}

/// Trajectories in the (φ, θ) plane, degrees.
pub fn phi_theta_plot(title: &str, runs: &[TrajectoryRecord]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: format!("scenario {}", r.scenario_id),
            points: r
                .states
                .iter()
                .map(|x| (x.phi.to_degrees(), x.theta.to_degrees()))
                .collect(),
        })
        .collect();
    line_plot(title, "φ (deg)", "θ (deg)", &series, &[])
}

/// Training and validation MSE per epoch on a log10 scale.
pub fn training_plot(title: &str, model: &Model) -> String {
    let log = |v: f64| if v > 0.0 { v.log10() } else { f64::NAN };
    let mut series = vec![Series {
        label: "training".into(),
        points: model.curve.iter().map(|e| (e.epoch as f64, log(e.train_mse))).collect(),
    }];
    if model.curve.iter().any(|e| e.val_mse.is_some()) {
        series.push(Series {
            label: "validation".into(),
            points: model
                .curve
                .iter()
                .filter_map(|e| e.val_mse.map(|v| (e.epoch as f64, log(v))))
                .collect(),
        });
    }
    line_plot(title, "epoch", "log10 MSE", &series, &[])
}

/// Writes tables, JSON and plots into `dir`; returns the files written.
pub fn emit_report(report: &CampaignReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("report.json".into(), serde_json::to_string_pretty(report)?)?;
    put("table.csv".into(), report.table_csv())?;
    put("table.md".into(), report.table_markdown())?;
    put("runtime.json".into(), serde_json::to_string_pretty(&report.runtime)?)?;
    for (i, c) in report.controllers.iter().enumerate() {
        let tag = slug(&c.id);
        if let Some(runs) = report.samples.get(i).filter(|r| !r.is_empty()) {
            put(
                format!("height_{tag}.svg"),
                height_plot(&format!("{} ({})", c.id, report.label), runs, report.h_min, c.eta),
            )?;
            put(
                format!("phi_theta_{tag}.svg"),
                phi_theta_plot(&format!("{} ({})", c.id, report.label), runs),
            )?;
        }
        for ind in &report.indicators {
            put(
                format!("hist_{}_{tag}.svg", ind.indicator),
                histogram(
                    &format!("{} of {}", ind.indicator, c.id),
                    &ind.indicator,
                    ind.vectors[i].values(),
                    30,
                ),
            )?;
        }
    }
    Ok(written)
}
