#![allow(dead_code)]

use mfa_core::EmpiricalMeasure;

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// `(W₁, W₂, W_∞)` between two uniform measures of equal size by
/// enumerating every assignment.
pub fn brute_force_w(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> (f64, f64, f64) {
    let n = mu.len();
    let d = |i: usize, j: usize| mfa_core::linalg::dist_sq(mu.atom(i), nu.atom(j)).sqrt();
    let (mut w1, mut w2, mut wi) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for p in permutations(n) {
        w1 = w1.min(p.iter().enumerate().map(|(i, &j)| d(i, j)).sum::<f64>() / n as f64);
        w2 = w2.min(p.iter().enumerate().map(|(i, &j)| d(i, j) * d(i, j)).sum::<f64>() / n as f64);
        wi = wi.min(p.iter().enumerate().map(|(i, &j)| d(i, j)).fold(0.0, f64::max));
    }
    (w1, w2.sqrt(), wi)
}
