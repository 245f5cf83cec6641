//! Seed averages, log-log rate fits and the two-term bound-shape fit.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::harness::ErrorTable;

/// Seed average of one `(L, H, τ)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub l: usize,
    pub h: usize,
    pub tau: usize,
    pub n: usize,
    pub mean_eps2: f64,
    pub stderr_eps2: f64,
    /// Mean over seeds of the half-probe-set supremum.
    pub mean_eps2_half_probes: f64,
    pub mean_w2: f64,
    pub stderr_w2: f64,
    pub mean_coupled: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Seed-averaged statistics, ordered by `(τ, L, H)`. Incomplete rows are skipped.
pub fn cell_stats(table: &ErrorTable) -> Vec<CellStat> {
    let mut keys: Vec<(usize, usize, usize)> = table
        .rows
        .iter()
        .filter(|r| r.completed)
        .map(|r| (r.tau, r.l, r.h))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(tau, l, h)| {
            let rows: Vec<_> = table
                .rows
                .iter()
                .filter(|r| r.completed && r.tau == tau && r.l == l && r.h == h)
                .collect();
            let (mean_eps2, stderr_eps2) = mean_se(&rows.iter().map(|r| r.eps2).collect::<Vec<_>>());
            let (mean_eps2_half_probes, _) = mean_se(&rows.iter().map(|r| r.eps2_half_probes).collect::<Vec<_>>());
            let (mean_w2, stderr_w2) = mean_se(&rows.iter().map(|r| r.param_w2_sq).collect::<Vec<_>>());
            let (mean_coupled, _) = mean_se(&rows.iter().map(|r| r.param_coupled_sq).collect::<Vec<_>>());
            CellStat {
                l,
                h,
                tau,
                n: rows.len(),
                mean_eps2,
                stderr_eps2,
                mean_eps2_half_probes,
                mean_w2,
                stderr_w2,
                mean_coupled,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    L,
    H,
}

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval for the slope; unbounded with two points.
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
    /// Points dropped because their value was not strictly positive.
    pub excluded: usize,
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let excluded = xs.len() - pts.len();
    if pts.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "rate fit needs two positive points, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("rate fit needs two distinct axis values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (ci_low, ci_high) = if pts.len() > 2 {
        let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let se = (sse / (n - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, n - 2.0)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .inverse_cdf(0.975);
        (slope - t * se, slope + t * se)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    Ok(RateFit {
        slope,
        intercept,
        ci_low,
        ci_high,
        points: pts.len(),
        excluded,
    })
}

/// Power-law fit along one axis for every value of the other axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisFit {
    pub axis: Axis,
    pub tau: usize,
    /// Value of the axis held fixed.
    pub fixed: usize,
    pub fit: RateFit,
}

pub fn rate_fit(stats: &[CellStat], axis: Axis, tau: usize) -> Vec<AxisFit> {
    let mut fixed: Vec<usize> = stats
        .iter()
        .filter(|s| s.tau == tau)
        .map(|s| match axis {
            Axis::L => s.h,
            Axis::H => s.l,
        })
        .collect();
    fixed.sort_unstable();
    fixed.dedup();
    fixed
        .into_iter()
        .filter_map(|f| {
            let pts: Vec<(f64, f64)> = stats
                .iter()
                .filter(|s| s.tau == tau)
                .filter_map(|s| match axis {
                    Axis::L if s.h == f => Some((s.l as f64, s.mean_eps2)),
                    Axis::H if s.l == f => Some((s.h as f64, s.mean_eps2)),
                    _ => None,
                })
                .collect();
            if pts.len() < 3 {
                return None;
            }
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            fit_power_law(&xs, &ys).ok().map(|fit| AxisFit { axis, tau, fixed: f, fit })
        })
        .collect()
}

/// Nonnegative fit `y ≈ a/L² + b/(L^{2/3} H)` minimising the largest
/// residual relative to the fitted value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFit {
    pub a: f64,
    pub b: f64,
    pub max_rel_residual: f64,
    /// `(L, H, observed, fitted)`.
    pub points: Vec<(usize, usize, f64, f64)>,
}

pub fn fit_bound_shape(points: &[(usize, usize, f64)]) -> Result<ShapeFit> {
    let pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| p.2 > 0.0 && p.2.is_finite())
        .map(|&(l, h, y)| {
            let l = l as f64;
            (1.0 / (l * l), 1.0 / (l.powf(2.0 / 3.0) * h as f64), y)
        })
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidInput("shape fit needs two positive points".into()));
    }
    // Feasibility of max relative residual ≤ t is a 2-variable linear
    // program; bisect on t and test all constraint-pair vertices.
    let feasible = |t: f64| -> Option<(f64, f64)> {
        let mut cons: Vec<(f64, f64, f64)> = Vec::with_capacity(2 * pts.len() + 2);
        // Each constraint reads c0·a + c1·b ≥ c2.
        for &(u, v, y) in &pts {
            cons.push((u, v, y / (1.0 + t)));
            if t < 1.0 {
                cons.push((-u, -v, -y / (1.0 - t)));
            }
        }
        cons.push((1.0, 0.0, 0.0));
        cons.push((0.0, 1.0, 0.0));
        let ok = |a: f64, b: f64| {
            cons.iter()
                .all(|&(c0, c1, c2)| c0 * a + c1 * b >= c2 - 1e-12 * c2.abs().max(1e-300))
        };
        for i in 0..cons.len() {
            for j in i + 1..cons.len() {
                let (a0, a1, a2) = cons[i];
                let (b0, b1, b2) = cons[j];
                let det = a0 * b1 - a1 * b0;
                if det.abs() < 1e-300 {
                    continue;
                }
                let a = (a2 * b1 - a1 * b2) / det;
                let b = (a0 * b2 - a2 * b0) / det;
                if ok(a, b) {
                    return Some((a.max(0.0), b.max(0.0)));
                }
            }
        }
        None
    };
    let rel = |a: f64, b: f64| {
        pts.iter()
            .map(|&(u, v, y)| {
                let f = a * u + b * v;
                (y - f).abs() / f
            })
            .fold(0.0, f64::max)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while feasible(hi).is_none() {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InvalidInput("shape fit did not converge".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let (a, b) = feasible(hi).expect("hi is feasible");
    let fitted: Vec<(usize, usize, f64, f64)> = points
        .iter()
        .map(|&(l, h, y)| {
            let lf = l as f64;
            (l, h, y, a / (lf * lf) + b / (lf.powf(2.0 / 3.0) * h as f64))
        })
        .collect();
    Ok(ShapeFit {
        a,
        b,
        max_rel_residual: rel(a, b),
        points: fitted,
    })
}

/// A pair of neighbouring grid cells where the seed average grew by more
/// than two combined standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandViolation {
    pub axis: Axis,
    pub tau: usize,
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub increase: f64,
    pub band: f64,
}

/// Checks that `value(cell)` is non-increasing along `axis` within
/// `2·sqrt(se₁² + se₂²)`.
pub fn band_violations(stats: &[CellStat], axis: Axis, value: impl Fn(&CellStat) -> (f64, f64)) -> Vec<BandViolation> {
    let mut out = Vec::new();
    for s in stats {
        let next = stats
            .iter()
            .filter(|t| t.tau == s.tau)
            .filter(|t| match axis {
                Axis::L => t.h == s.h && t.l > s.l,
                Axis::H => t.l == s.l && t.h > s.h,
            })
            .min_by_key(|t| match axis {
                Axis::L => t.l,
                Axis::H => t.h,
            });
        if let Some(t) = next {
            let (m0, se0) = value(s);
            let (m1, se1) = value(t);
            let band = 2.0 * (se0 * se0 + se1 * se1).sqrt();
            if m1 - m0 > band {
                out.push(BandViolation {
                    axis,
                    tau: s.tau,
                    from: (s.l, s.h),
                    to: (t.l, t.h),
                    increase: m1 - m0,
                    band,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws_are_recovered() {
        let xs = [4.0, 8.0, 16.0, 32.0, 64.0];
        let inv: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        let fit = fit_power_law(&xs, &inv).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        let sq: Vec<f64> = xs.iter().map(|x| 0.5 / (x * x)).collect();
        assert!((fit_power_law(&xs, &sq).unwrap().slope + 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_fit_recovers_coefficients() {
        let (a, b) = (0.7, 2.3);
        let mut pts = Vec::new();
        for l in [8usize, 16, 32, 64] {
            for h in [4usize, 8, 16, 32, 64] {
                let lf = l as f64;
                pts.push((l, h, a / (lf * lf) + b / (lf.powf(2.0 / 3.0) * h as f64)));
            }
        }
        let f = fit_bound_shape(&pts).unwrap();
        assert!((f.a / a - 1.0).abs() < 0.05, "{f:?}");
        assert!((f.b / b - 1.0).abs() < 0.05, "{f:?}");
        assert!(f.max_rel_residual < 1e-9);
    }
}
