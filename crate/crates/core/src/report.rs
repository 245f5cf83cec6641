//! Deterministic artifacts: error tables, seed-averaged summaries, fitted
//! rates and the run manifest. Wall-clock data is kept out of all of these.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::harness::ErrorTable;
use crate::seed::{derive_seed, Stream};
use crate::stats::{band_violations, cell_stats, fit_bound_shape, rate_fit, AxisFit, Axis, BandViolation, CellStat, ShapeFit};

/// One row per `(L, H, seed)` with a column group per training step.
pub fn errors_csv(table: &ErrorTable) -> Result<String> {
    let steps = table.rows.iter().map(|r| r.tau).max().unwrap_or(0);
    let mut cells: BTreeMap<(usize, usize, u64), Vec<&crate::harness::ErrorRow>> = BTreeMap::new();
    for r in &table.rows {
        cells.entry((r.l, r.h, r.seed)).or_default().push(r);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["L".to_string(), "H".into(), "seed".into(), "completed".into()];
    for name in ["eps2", "eps2_half_probes", "w2_sq", "coupled_sq"] {
        header.extend((0..=steps).map(|t| format!("{name}_tau{t}")));
    }
    w.write_record(&header)?;
    for ((l, h, seed), mut rows) in cells {
        rows.sort_by_key(|r| r.tau);
        let mut rec = vec![l.to_string(), h.to_string(), seed.to_string(), rows.iter().all(|r| r.completed).to_string()];
        let column = |f: &dyn Fn(&crate::harness::ErrorRow) -> f64| -> Vec<String> {
            (0..=steps)
                .map(|t| rows.iter().find(|r| r.tau == t).map_or(String::new(), |r| f(r).to_string()))
                .collect()
        };
        rec.extend(column(&|r| r.eps2));
        rec.extend(column(&|r| r.eps2_half_probes));
        rec.extend(column(&|r| r.param_w2_sq));
        rec.extend(column(&|r| r.param_coupled_sq));
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Inverse of [`errors_csv`]. Floats are written in shortest round-trip form,
/// so the table comes back bit for bit.
pub fn read_errors_csv(text: &str) -> Result<ErrorTable> {
    let bad = |m: String| crate::error::Error::InvalidInput(format!("errors.csv: {m}"));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column {name}")));
    let (cl, ch, cs, cc) = (col("L")?, col("H")?, col("seed")?, col("completed")?);
    let mut taus: Vec<usize> = header.iter().filter_map(|h| h.strip_prefix("eps2_tau")?.parse().ok()).collect();
    taus.sort_unstable();
    let groups = taus
        .iter()
        .map(|t| {
            Ok((
                *t,
                [col(&format!("eps2_tau{t}"))?, col(&format!("eps2_half_probes_tau{t}"))?, col(&format!("w2_sq_tau{t}"))?, col(&format!("coupled_sq_tau{t}"))?],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = ErrorTable::default();
    for rec in r.records() {
        let rec = rec?;
        let int = |i: usize| rec[i].parse::<u64>().map_err(|e| bad(format!("{}: {e}", &rec[i])));
        let (l, h, seed) = (int(cl)? as usize, int(ch)? as usize, int(cs)?);
        let completed = rec[cc].parse::<bool>().map_err(|e| bad(e.to_string()))?;
        for (tau, cols) in &groups {
            if rec[cols[0]].is_empty() {
                continue;
            }
            let v = cols
                .iter()
                .map(|&i| rec[i].parse::<f64>().map_err(|e| bad(format!("{}: {e}", &rec[i]))))
                .collect::<Result<Vec<_>>>()?;
            table.rows.push(crate::harness::ErrorRow {
                l,
                h,
                seed,
                tau: *tau,
                eps2: v[0],
                eps2_half_probes: v[1],
                param_w2_sq: v[2],
                param_coupled_sq: v[3],
                completed,
            });
        }
    }
    Ok(table)
}

/// Plot-ready seed averages of the trajectory discrepancy.
pub fn summary_csv(stats: &[CellStat]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["L", "H", "tau", "mean_eps2", "stderr"])?;
    for s in stats {
        w.write_record([s.l.to_string(), s.h.to_string(), s.tau.to_string(), s.mean_eps2.to_string(), s.stderr_eps2.to_string()])?;
    }
    finish(w)
}

/// Seed averages of the parameter divergence.
pub fn param_div_csv(stats: &[CellStat]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["L", "H", "tau", "mean_w2_sq", "stderr", "mean_coupled_sq"])?;
    for s in stats {
        w.write_record([
            s.l.to_string(),
            s.h.to_string(),
            s.tau.to_string(),
            s.mean_w2.to_string(),
            s.stderr_w2.to_string(),
            s.mean_coupled.to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fits for one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRates {
    pub tau: usize,
    pub l_fits: Vec<AxisFit>,
    pub h_fits: Vec<AxisFit>,
    pub shape: Option<ShapeFit>,
    pub eps2_band_violations: Vec<BandViolation>,
    pub w2_band_violations: Vec<BandViolation>,
    /// Ratios of mean ε² under successive doublings of H at the largest L.
    pub h_doubling_ratios: Vec<f64>,
    /// Largest relative gap between the full and half probe-set suprema.
    pub probe_sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatesReport {
    pub steps: Vec<StepRates>,
}

pub fn rates(stats: &[CellStat]) -> RatesReport {
    let mut taus: Vec<usize> = stats.iter().map(|s| s.tau).collect();
    taus.sort_unstable();
    taus.dedup();
    let steps = taus
        .into_iter()
        .map(|tau| {
            let at: Vec<&CellStat> = stats.iter().filter(|s| s.tau == tau).collect();
            let pts: Vec<(usize, usize, f64)> = at.iter().map(|s| (s.l, s.h, s.mean_eps2)).collect();
            let l_max = at.iter().map(|s| s.l).max().unwrap_or(0);
            let mut top: Vec<&&CellStat> = at.iter().filter(|s| s.l == l_max).collect();
            top.sort_by_key(|s| s.h);
            let h_doubling_ratios = top
                .windows(2)
                .filter(|w| w[1].h == 2 * w[0].h)
                .map(|w| w[1].mean_eps2 / w[0].mean_eps2)
                .collect();
            let probe_sensitivity = at
                .iter()
                .filter(|s| s.mean_eps2 > 0.0)
                .map(|s| 1.0 - s.mean_eps2_half_probes / s.mean_eps2)
                .fold(0.0, f64::max);
            StepRates {
                tau,
                l_fits: rate_fit(stats, Axis::L, tau),
                h_fits: rate_fit(stats, Axis::H, tau),
                shape: fit_bound_shape(&pts).ok(),
                eps2_band_violations: violations(stats, tau, |s| (s.mean_eps2, s.stderr_eps2)),
                w2_band_violations: violations(stats, tau, |s| (s.mean_w2, s.stderr_w2)),
                h_doubling_ratios,
                probe_sensitivity,
            }
        })
        .collect();
    RatesReport { steps }
}

fn violations(stats: &[CellStat], tau: usize, value: impl Fn(&CellStat) -> (f64, f64) + Copy) -> Vec<BandViolation> {
    [Axis::L, Axis::H]
        .into_iter()
        .flat_map(|axis| band_violations(stats, axis, value))
        .filter(|v| v.tau == tau)
        .collect()
}

/// Convenience: seed averages and fits straight from a table.
pub fn summarize(table: &ErrorTable) -> (Vec<CellStat>, RatesReport) {
    let stats = cell_stats(table);
    let r = rates(&stats);
    (stats, r)
}

/// Everything needed to reproduce a run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub master_seed: u64,
    /// FNV-1a hash of the canonical TOML rendering of `config`.
    pub config_hash: String,
    pub derived_seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &ExperimentConfig, artifacts: &[&str]) -> Self {
        let m = config.master_seed;
        let derived_seeds = [
            ("pi", Stream::Pi),
            ("data", Stream::Data),
            ("probes", Stream::Probes),
            ("init", Stream::Init),
            ("fuzz", Stream::Fuzz),
        ]
        .into_iter()
        .map(|(name, s)| (name.to_string(), derive_seed(m, s, &[])))
        .collect();
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            master_seed: m,
            config_hash: format!("{:016x}", fnv1a(config.to_toml().as_bytes())),
            derived_seeds,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            config: config.clone(),
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ErrorRow;

    fn row(l: usize, h: usize, seed: u64, tau: usize, eps2: f64) -> ErrorRow {
        ErrorRow {
            l,
            h,
            seed,
            tau,
            eps2,
            eps2_half_probes: eps2,
            param_coupled_sq: 0.0,
            param_w2_sq: 0.0,
            completed: true,
        }
    }

    #[test]
    fn wide_table_has_one_row_per_cell_and_seed() {
        let mut table = ErrorTable::default();
        for l in [2, 4] {
            for seed in 0..3 {
                for tau in 0..=1 {
                    table.rows.push(row(l, 1, seed, tau, 0.5));
                }
            }
        }
        let text = errors_csv(&table).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text.starts_with("L,H,seed,completed,eps2_tau0,eps2_tau1,"));
    }

    #[test]
    fn wide_table_reads_back_exactly() {
        let mut table = ErrorTable::default();
        for seed in 0..2 {
            for tau in 0..=2 {
                let mut r = row(8, 4, seed, tau, 1.0 / 3.0 + tau as f64 * 1e-17);
                r.param_w2_sq = 0.1 * tau as f64;
                r.eps2_half_probes = f64::NAN;
                table.rows.push(r);
            }
        }
        let back = read_errors_csv(&errors_csv(&table).unwrap()).unwrap();
        assert_eq!(back.rows.len(), table.rows.len());
        for (a, b) in table.rows.iter().zip(&back.rows) {
            assert_eq!((a.l, a.h, a.seed, a.tau, a.eps2, a.param_w2_sq), (b.l, b.h, b.seed, b.tau, b.eps2, b.param_w2_sq));
            assert!(b.eps2_half_probes.is_nan());
        }
    }

    #[test]
    fn manifest_is_stable() {
        let cfg = ExperimentConfig::default();
        let a = to_json(&RunManifest::new("sweep", &cfg, &["errors.csv"])).unwrap();
        let b = to_json(&RunManifest::new("sweep", &cfg, &["errors.csv"])).unwrap();
        assert_eq!(a, b);
    }
}
