//! Exact optimal transport between finitely supported measures.

use crate::error::{check_dim, Error, Result};
use crate::linalg::dist_sq;
use crate::measure::EmpiricalMeasure;
use crate::params::HeadCloud;

const FLOW_TOL: f64 = 1e-15;

/// Order of a Wasserstein distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    One,
    Two,
    Infinity,
}

impl Order {
    pub fn from_p(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(Order::One)
        } else if p == 2.0 {
            Ok(Order::Two)
        } else if p == f64::INFINITY {
            Ok(Order::Infinity)
        } else {
            Err(Error::InvalidInput(format!("unsupported Wasserstein order {p}; use 1, 2 or inf")))
        }
    }
}

/// `W_p(µ, ν)`. Uses an assignment solver when both measures carry the same
/// number of equally weighted atoms, and a min-cost flow otherwise.
pub fn wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, order: Order) -> Result<f64> {
    check_dim("transport dimension", mu.dim(), nu.dim())?;
    let n = mu.len();
    let m = nu.len();
    let dist: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| dist_sq(mu.atom(i), nu.atom(j)).sqrt())
        .collect();
    let uniform = n == m && is_uniform(mu.weights()) && is_uniform(nu.weights());
    match order {
        Order::Infinity => Ok(w_infinity(&dist, mu.weights(), nu.weights(), uniform)),
        Order::One | Order::Two => {
            let cost: Vec<f64> = match order {
                Order::One => dist.clone(),
                _ => dist.iter().map(|v| v * v).collect(),
            };
            let total = if uniform {
                let perm = hungarian(&cost, n);
                perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
            } else {
                transport_cost(&cost, mu.weights(), nu.weights())
            };
            Ok(match order {
                Order::One => total,
                _ => total.max(0.0).sqrt(),
            })
        }
    }
}

/// Squared 2-Wasserstein distance between two head clouds, viewed as
/// measures on the flattened parameter space.
pub fn cloud_w2_sq(a: &HeadCloud, b: &HeadCloud) -> Result<f64> {
    let w = wasserstein(&cloud_measure(a)?, &cloud_measure(b)?, Order::Two)?;
    Ok(w * w)
}

pub fn cloud_measure(c: &HeadCloud) -> Result<EmpiricalMeasure> {
    let dim = c.heads()[0].as_slice().len();
    let atoms = c.heads().iter().flat_map(|h| h.as_slice().iter().copied()).collect();
    EmpiricalMeasure::new(dim, atoms, c.weights().to_vec())
}

/// `(Σ_i w_i ‖a_i − b_i‖²)^{1/2}` for two measures whose atoms are paired by
/// index. Both must carry identical weights.
pub fn coupled_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    check_dim("coupled measures", a.len(), b.len())?;
    check_dim("coupled dimension", a.dim(), b.dim())?;
    if a.weights() != b.weights() {
        return Err(Error::InvalidInput("coupled measures must share weights".into()));
    }
    Ok((0..a.len())
        .map(|i| a.weight(i) * dist_sq(a.atom(i), b.atom(i)))
        .sum::<f64>()
        .sqrt())
}

/// Squared coupled distance between two head clouds of equal size.
pub fn cloud_coupled_sq(a: &HeadCloud, b: &HeadCloud) -> Result<f64> {
    let d = coupled_distance(&cloud_measure(a)?, &cloud_measure(b)?)?;
    Ok(d * d)
}

fn is_uniform(w: &[f64]) -> bool {
    let first = w[0];
    w.iter().all(|v| *v == first)
}

/// Minimum-cost perfect assignment on an `n × n` cost matrix (row-major).
/// Returns `perm[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Shortest augmenting path with row/column potentials; index 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Optimal transport cost `min_π Σ π_ij c_ij` by successive shortest paths.
pub fn transport_cost(cost: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let plan = transport_plan(cost, a, b);
    plan.iter().zip(cost).map(|(p, c)| p * c).sum()
}

/// Optimal coupling, row-major `n × m`.
pub fn transport_plan(cost: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let m = b.len();
    let mut flow = vec![0.0; n * m];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    // Nodes: rows 0..n, columns n..n+m.
    let nodes = n + m;
    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= FLOW_TOL {
            break;
        }
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        for i in 0..n {
            if supply[i] > FLOW_TOL {
                dist[i] = 0.0;
            }
        }
        // Bellman-Ford; the residual graph has no negative cycles at optimality.
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let nd = dist[i] + cost[i * m + j];
                        if nd < dist[n + j] - 1e-15 * nd.abs().max(1.0) {
                            dist[n + j] = nd;
                            prev[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i * m + j] > FLOW_TOL {
                            let nd = dist[n + j] - cost[i * m + j];
                            if nd < dist[i] - 1e-15 * nd.abs().max(1.0) {
                                dist[i] = nd;
                                prev[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let end = (0..m)
            .filter(|&j| demand[j] > FLOW_TOL && dist[n + j].is_finite())
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]));
        let Some(end) = end else { break };
        // Walk back to find the bottleneck.
        let mut delta = demand[end];
        let mut node = n + end;
        let mut path = Vec::new();
        loop {
            let p = prev[node];
            if node >= n {
                path.push((p, node - n, true));
                node = p;
                if prev[node] == usize::MAX {
                    break;
                }
            } else {
                let j = p - n;
                delta = delta.min(flow[node * m + j]);
                path.push((node, j, false));
                node = p;
            }
        }
        delta = delta.min(supply[node]);
        for (i, j, forward) in path {
            let f = &mut flow[i * m + j];
            if forward {
                *f += delta;
            } else {
                *f -= delta;
                if *f <= FLOW_TOL {
                    *f = 0.0;
                }
            }
        }
        supply[node] -= delta;
        demand[end] -= delta;
    }
    flow
}

fn w_infinity(dist: &[f64], a: &[f64], b: &[f64], uniform: bool) -> f64 {
    let mut cands: Vec<f64> = dist.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let (mut lo, mut hi) = (0usize, cands.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        let ok = if uniform {
            perfect_matching(dist, a.len(), cands[mid])
        } else {
            max_flow(dist, a, b, cands[mid]) >= 1.0 - 1e-12
        };
        if ok {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    cands[lo]
}

fn perfect_matching(dist: &[f64], n: usize, thr: f64) -> bool {
    let mut match_col = vec![usize::MAX; n];
    fn try_row(i: usize, n: usize, dist: &[f64], thr: f64, seen: &mut [bool], match_col: &mut [usize]) -> bool {
        for j in 0..n {
            if dist[i * n + j] <= thr && !seen[j] {
                seen[j] = true;
                if match_col[j] == usize::MAX || try_row(match_col[j], n, dist, thr, seen, match_col) {
                    match_col[j] = i;
                    return true;
                }
            }
        }
        false
    }
    for i in 0..n {
        let mut seen = vec![false; n];
        if !try_row(i, n, dist, thr, &mut seen, &mut match_col) {
            return false;
        }
    }
    true
}

/// Maximum flow from supplies `a` to demands `b` along edges with
/// `dist ≤ thr`, by breadth-first augmenting paths.
fn max_flow(dist: &[f64], a: &[f64], b: &[f64], thr: f64) -> f64 {
    let n = a.len();
    let m = b.len();
    let mut flow = vec![0.0; n * m];
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut total = 0.0;
    loop {
        let mut prev = vec![usize::MAX; n + m];
        let mut queue = std::collections::VecDeque::new();
        let mut seen = vec![false; n + m];
        for i in 0..n {
            if supply[i] > FLOW_TOL {
                seen[i] = true;
                queue.push_back(i);
            }
        }
        let mut end = None;
        while let Some(u) = queue.pop_front() {
            if u < n {
                for j in 0..m {
                    if !seen[n + j] && dist[u * m + j] <= thr {
                        seen[n + j] = true;
                        prev[n + j] = u;
                        if demand[j] > FLOW_TOL {
                            end = Some(j);
                            break;
                        }
                        queue.push_back(n + j);
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if !seen[i] && flow[i * m + j] > FLOW_TOL {
                        seen[i] = true;
                        prev[i] = u;
                        queue.push_back(i);
                    }
                }
            }
            if end.is_some() {
                break;
            }
        }
        let Some(end) = end else { break };
        let mut delta = demand[end];
        let mut node = n + end;
        let mut path = Vec::new();
        loop {
            let p = prev[node];
            if node >= n {
                path.push((p, node - n, true));
                node = p;
                if prev[node] == usize::MAX {
                    break;
                }
            } else {
                delta = delta.min(flow[node * m + (p - n)]);
                path.push((node, p - n, false));
                node = p;
            }
        }
        delta = delta.min(supply[node]);
        for (i, j, forward) in path {
            let f = &mut flow[i * m + j];
            if forward {
                *f += delta;
            } else {
                *f -= delta;
                if *f <= FLOW_TOL {
                    *f = 0.0;
                }
            }
        }
        supply[node] -= delta;
        demand[end] -= delta;
        total += delta;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_picks_antidiagonal() {
        let cost = [5.0, 1.0, 1.0, 5.0];
        assert_eq!(hungarian(&cost, 2), vec![1, 0]);
    }

    #[test]
    fn dirac_distances_are_the_point_distance() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![3.0, 4.0]).unwrap();
        for o in [Order::One, Order::Two, Order::Infinity] {
            assert_eq!(wasserstein(&a, &b, o).unwrap(), 5.0);
        }
    }

    #[test]
    fn unequal_weights_split_mass() {
        // Half of the mass at 0 must travel to 2.
        let a = EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.75, 0.25]).unwrap();
        let b = EmpiricalMeasure::new(1, vec![0.0, 2.0], vec![0.25, 0.75]).unwrap();
        let w1 = wasserstein(&a, &b, Order::One).unwrap();
        assert!((w1 - (0.5 * 2.0 + 0.25 * 1.0)).abs() < 1e-14, "{w1}");
        assert_eq!(wasserstein(&a, &b, Order::Infinity).unwrap(), 2.0);
    }
}
