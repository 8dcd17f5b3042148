use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use probcert::campaign::{
    build_family, emit_report, height_plot, phi_theta_plot, report_from_dir, robustness_study,
    run_campaign, simulate_scenario, training_plot, CampaignConfig, CampaignReport,
};
use probcert::mlp::train;
use probcert::msnmpc::{generate_dataset, Dataset, DatasetKind, MsNmpc};
use probcert::scenario::{batch_hash, scenario_batch, DistributionSpec};
use probcert::validation::{exact_min_samples, min_samples, RiskSpec};
use probcert::{Error, Result};

#[derive(Parser)]
#[command(name = "probcert", version, about = "Probabilistic validation of kite controllers")]
struct Cli {
    /// TOML configuration; every field has a default.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `workers` (0 = all cores).
    #[arg(short, long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Opt,
    Feas,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the required number of scenarios, closed form and exact.
    Samples {
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(short)]
        r: Option<usize>,
        #[arg(short)]
        m: Option<usize>,
    },
    /// Draw the scenario batch and write it as JSON.
    SampleScenarios {
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Generate an imitation dataset from the scenario-tree NMPC.
    GenData {
        #[arg(long, value_enum, default_value = "opt")]
        kind: Kind,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long, default_value = "dataset")]
        stem: String,
    },
    /// Train a network on a dataset written by `gen-data`.
    Train {
        /// Directory holding the dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dataset")]
        stem: String,
        /// Model file; defaults to `<output_dir>/model.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one controller of the family on one scenario.
    Simulate {
        #[arg(long, default_value_t = 0)]
        controller: usize,
        #[arg(long, default_value_t = 0)]
        scenario: u64,
    },
    /// Run the full campaign and certify the family.
    Validate,
    /// Repeat the campaign under other initial-condition distributions.
    Robustness {
        #[arg(long, value_delimiter = ',', default_value = "normal,beta,pareto")]
        distributions: Vec<String>,
    },
    /// Rebuild tables and plots from a persisted campaign.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<CampaignConfig> {
    let mut cfg = match &cli.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn print_report(r: &CampaignReport) {
    println!(
        "{} campaign, {} scenarios ({}), batch {}",
        r.label,
        r.n_scenarios,
        r.distribution,
        &r.batch_hash[..12]
    );
    print!("{}", r.table_markdown());
    if r.degraded {
        println!("campaign degraded: too many faulted scenarios");
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    match &cli.cmd {
        Cmd::Samples { epsilon, delta, r, m } => {
            let risk = RiskSpec::new(
                epsilon.unwrap_or(cfg.risk.epsilon),
                delta.unwrap_or(cfg.risk.delta),
                r.unwrap_or(cfg.risk.r),
                m.unwrap_or(cfg.risk.m),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            println!("closed form: {}", min_samples(&risk)?);
            println!("exact:       {}", exact_min_samples(&risk)?);
        }
        Cmd::SampleScenarios { n } => {
            cfg.validate()?;
            let n = n.unwrap_or(min_samples(&cfg.risk)?);
            let dist = cfg.distribution.resolve()?;
            let batch = scenario_batch(&dist, &cfg.noise, &cfg.sim, cfg.master_seed, n)?;
            fs::create_dir_all(&out)?;
            let path = out.join("scenarios.json");
            fs::write(&path, serde_json::to_string(&batch)?)?;
            println!("{} scenarios, hash {}", batch.len(), batch_hash(&batch)?);
            println!("wrote {}", path.display());
        }
        Cmd::GenData { kind, eta, n, stem } => {
            cfg.validate()?;
            let mut ocp = cfg.ocp.clone();
            if let Some(e) = eta {
                ocp.eta = *e;
            }
            let mut dc = cfg.dataset.clone();
            dc.kind = match kind {
                Kind::Opt => DatasetKind::Opt,
                Kind::Feas => DatasetKind::Feas,
            };
            if let Some(n) = n {
                dc.n_target = *n;
            }
            let nmpc = MsNmpc::new(ocp, cfg.plant).map_err(|e| Error::Config(e.to_string()))?;
            let ds = generate_dataset(&dc, &nmpc, &cfg.sim, &cfg.wind)?;
            let (csv, _) = ds.save(&out, stem)?;
            println!(
                "{} pairs, {} solver faults, {} truncated loops",
                ds.samples.len(),
                ds.meta.solver_faults,
                ds.meta.truncated_loops
            );
            println!("wrote {}", csv.display());
        }
        Cmd::Train { data, stem, out: model_path, seed } => {
            let ds = Dataset::load(data, stem)?;
            let (x, y) = ds.training_rows(cfg.architecture.n_in)?;
            let mut tc = cfg.training.clone();
            if let Some(s) = seed {
                tc.seed = *s;
            }
            let model = train(&x, &y, cfg.architecture, &tc)?;
            let path = model_path.clone().unwrap_or_else(|| out.join("model.json"));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            model.save(&path)?;
            let plot = path.with_extension("svg");
            fs::write(&plot, training_plot("training", &model))?;
            let best = &model.curve[model.best_epoch];
            println!(
                "best epoch {}: train MSE {:.4e}, validation MSE {}",
                model.best_epoch,
                best.train_mse,
                best.val_mse.map_or("-".into(), |v| format!("{v:.4e}"))
            );
            println!("wrote {} and {}", path.display(), plot.display());
        }
        Cmd::Simulate { controller, scenario } => {
            cfg.validate()?;
            let family = build_family(&cfg)?;
            let proto = family
                .get(*controller)
                .ok_or_else(|| Error::Config(format!("no controller #{controller}")))?;
            let spec = &cfg.controllers[*controller];
            let dist = cfg.distribution.resolve()?;
            let sc = probcert::scenario::sample_scenario(&dist, &cfg.noise, &cfg.sim, cfg.master_seed, *scenario)?;
            let rec = simulate_scenario(proto, &spec.id(), &sc, &cfg)?;
            let stem = format!("sim_c{controller}_s{scenario}");
            let (csv, _) = rec.save(&out, &stem)?;
            let runs = [rec];
            fs::write(
                out.join(format!("{stem}_height.svg")),
                height_plot(&spec.id(), &runs, cfg.plant.h_min, spec.eta),
            )?;
            fs::write(out.join(format!("{stem}_phi_theta.svg")), phi_theta_plot(&spec.id(), &runs))?;
            let rec = &runs[0];
            let h = rec.height.iter().copied().fold(f64::INFINITY, f64::min);
            let t = rec.thrust.iter().sum::<f64>() / rec.thrust.len().max(1) as f64;
            println!("min height {h:.2} m, mean thrust {:.1} kN", t / 1e3);
            if let Some(f) = &rec.fault {
                println!("fault: {f}");
            }
            println!("wrote {}", csv.display());
        }
        Cmd::Validate => {
            let report = run_campaign(&cfg)?;
            print_report(&report);
            println!("wrote {}", out.display());
            if report.degraded {
                return Ok(ExitCode::from(4));
            }
        }
        Cmd::Robustness { distributions } => {
            let alts = distributions
                .iter()
                .map(|n| {
                    DistributionSpec::by_name(n)
                        .ok_or_else(|| Error::Config(format!("unknown distribution {n:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let rob = robustness_study(&cfg, &alts)?;
            print!("{}", rob.table_markdown());
            if rob.reports.iter().any(|r| r.degraded) {
                return Ok(ExitCode::from(4));
            }
        }
        Cmd::Report { dir } => {
            let dir = dir.as_deref().unwrap_or(Path::new(&out));
            let report = report_from_dir(dir)?;
            let files = emit_report(&report, dir)?;
            print_report(&report);
            println!("wrote {} files into {}", files.len(), dir.display());
            if report.degraded {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parameter(_) => ExitCode::from(2),
                Error::Certification(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
