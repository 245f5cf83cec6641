use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mfa_core::config::{load_config, ExperimentConfig};
use mfa_core::harness::{convergence_sweep, SweepOutcome};
use mfa_core::report::{errors_csv, param_div_csv, read_errors_csv, summarize, summary_csv, to_json, write_text, RunManifest};
use mfa_core::verify::{grad_check_suite, verify_bounds};

#[derive(Parser)]
#[command(name = "mfa", version, about = "Mean-field limit laboratory for depth-scaled attention-only transformers")]
struct Cli {
    /// TOML configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for the sweep; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fuzz every inequality and check a training run against its bounds.
    VerifyBounds,
    /// Finite-difference check of the adjoint gradient.
    GradCheck,
    /// Convergence sweep over the (L, H) grid with rate fits.
    Sweep,
    /// Parameter divergence between the flowed and trained head clouds.
    ParamDiv,
    /// Recompute summaries and fits from an existing errors.csv.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::VerifyBounds => "verify-bounds",
            Command::GradCheck => "grad-check",
            Command::Sweep => "sweep",
            Command::ParamDiv => "param-div",
            Command::Report => "report",
        }
    }
}

/// Artifacts written by a subcommand and the first failed invariant, if any.
struct Outcome {
    artifacts: Vec<&'static str>,
    failure: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(name)) => {
            eprintln!("FAILED: first failing invariant: {name}");
            ExitCode::from(1)
        }
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<Option<String>> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building the thread pool")?;
    }
    let dir = cli.out_dir.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let out = match cli.command {
        Command::VerifyBounds => verify(&cfg, dir)?,
        Command::GradCheck => grad_check(&cfg, dir)?,
        Command::Sweep => sweep(&cfg, dir)?,
        Command::ParamDiv => param_div(&cfg, dir)?,
        Command::Report => report(dir)?,
    };
    let mut artifacts = out.artifacts;
    artifacts.push("manifest.json");
    let manifest = RunManifest::new(cli.command.name(), &cfg, &artifacts);
    write_text(dir, "manifest.json", &to_json(&manifest)?)?;
    Ok(out.failure)
}

fn verify(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let rep = verify_bounds(cfg)?;
    write_text(dir, "bounds_report.json", &to_json(&rep)?)?;
    for c in &rep.checks {
        println!("{:<32} {:>7} worst {:>10.3e}  {}", c.name, c.instances, c.worst, if c.pass { "ok" } else { "FAIL" });
    }
    for c in &rep.run.checks {
        println!("{:<32} {:>7} worst {:>10.3e}  {}", c.name, "run", c.worst, if c.pass { "ok" } else { "FAIL" });
    }
    if !rep.vacuous.is_empty() {
        println!("vacuous bounds at this configuration: {}", rep.vacuous.join(", "));
    }
    Ok(Outcome {
        artifacts: vec!["bounds_report.json"],
        failure: rep.first_failure(),
    })
}

#[derive(serde::Serialize)]
struct GradCheckSummary {
    tolerance: f64,
    max_rel_err: f64,
    cases: Vec<mfa_core::verify::GradCheckCase>,
}

fn grad_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let cases = grad_check_suite(cfg)?;
    let tolerance = cfg.grad_check.tolerance;
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failure = cases
        .iter()
        .find(|c| !(c.max_rel_err <= tolerance))
        .map(|c| format!("grad_check[{} seed {}]", c.loss, c.seed));
    println!("max relative error {max_rel_err:.3e} over {} cases (tolerance {tolerance:e})", cases.len());
    write_text(dir, "grad_check.json", &to_json(&GradCheckSummary { tolerance, max_rel_err, cases })?)?;
    Ok(Outcome {
        artifacts: vec!["grad_check.json"],
        failure,
    })
}

#[derive(serde::Serialize)]
struct Timing {
    total_secs: f64,
    reference_secs: f64,
    cells: Vec<mfa_core::harness::CellTiming>,
}

fn run_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<SweepOutcome> {
    let start = Instant::now();
    let outcome = convergence_sweep(&cfg.sweep_config()?)?;
    let timing = Timing {
        total_secs: start.elapsed().as_secs_f64(),
        reference_secs: outcome.reference_secs,
        cells: outcome.timing.clone(),
    };
    write_text(dir, "timing.json", &to_json(&timing)?)?;
    let incomplete = outcome.table.rows.iter().filter(|r| !r.completed).count();
    if incomplete > 0 {
        eprintln!("warning: {incomplete} rows incomplete within the time budget");
    }
    Ok(outcome)
}

fn sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let outcome = run_sweep(cfg, dir)?;
    write_text(dir, "errors.csv", &errors_csv(&outcome.table)?)?;
    let mut artifacts = vec!["timing.json", "errors.csv"];
    artifacts.extend(write_summaries(&outcome.table, dir)?);
    Ok(Outcome { artifacts, failure: None })
}

fn param_div(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let outcome = run_sweep(cfg, dir)?;
    let (stats, rates) = summarize(&outcome.table);
    write_text(dir, "errors.csv", &errors_csv(&outcome.table)?)?;
    write_text(dir, "param_div.csv", &param_div_csv(&stats)?)?;
    // Both clouds start from the same draw, so any divergence at τ = 0 is a bug.
    let failure = outcome
        .table
        .rows
        .iter()
        .find(|r| r.tau == 0 && r.completed && r.param_coupled_sq != 0.0)
        .map(|r| format!("param_div_tau0[L={} H={} seed={}]", r.l, r.h, r.seed));
    for s in &rates.steps {
        println!("tau {}: {} W2 band violations", s.tau, s.w2_band_violations.len());
    }
    Ok(Outcome {
        artifacts: vec!["timing.json", "errors.csv", "param_div.csv"],
        failure,
    })
}

fn report(dir: &Path) -> Result<Outcome> {
    let path = dir.join("errors.csv");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let table = read_errors_csv(&text)?;
    Ok(Outcome {
        artifacts: write_summaries(&table, dir)?,
        failure: None,
    })
}

fn write_summaries(table: &mfa_core::harness::ErrorTable, dir: &Path) -> Result<Vec<&'static str>> {
    let (stats, rates) = summarize(table);
    write_text(dir, "summary.csv", &summary_csv(&stats)?)?;
    write_text(dir, "param_div.csv", &param_div_csv(&stats)?)?;
    write_text(dir, "rates.json", &to_json(&rates)?)?;
    for s in &rates.steps {
        let shape = s
            .shape
            .as_ref()
            .map_or("no fit".to_string(), |f| format!("a={:.3e} b={:.3e} max residual {:.3}", f.a, f.b, f.max_rel_residual));
        println!("tau {}: shape {shape}; H-doubling ratios {:.3?}", s.tau, s.h_doubling_ratios);
    }
    Ok(vec!["summary.csv", "param_div.csv", "rates.json"])
}
