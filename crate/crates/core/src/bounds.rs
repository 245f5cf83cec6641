//! Closed-form a priori constants and run-time checks against them.

use serde::{Deserialize, Serialize};

use crate::attention::LayerKernel;
use crate::discrete::{LossSpec, Trajectory};
use crate::error::Result;
use crate::linalg::norm;
use crate::optim::{b_beta, c_kappa, r_map, OptConfig, RMode};
use crate::params::HeadCloud;

/// A constant that is either a usable finite number or overflowed the
/// double range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Bound {
    Finite(f64),
    Vacuous,
}

impl Bound {
    pub fn new(v: f64) -> Self {
        if v.is_finite() {
            Bound::Finite(v)
        } else {
            Bound::Vacuous
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Bound::Finite(v) => Some(v),
            Bound::Vacuous => None,
        }
    }

    pub fn is_vacuous(self) -> bool {
        matches!(self, Bound::Vacuous)
    }

    fn and_then(self, f: impl FnOnce(f64) -> f64) -> Bound {
        match self {
            Bound::Finite(v) => Bound::new(f(v)),
            Bound::Vacuous => Bound::Vacuous,
        }
    }
}

/// Inputs to [`compute_bounds`].
#[derive(Clone, Debug, PartialEq)]
pub struct BoundInputs<'a> {
    pub d: usize,
    pub k: usize,
    pub beta: f64,
    /// Radius of the initial token ball.
    pub r0: f64,
    /// Radius containing every label, for the labelled loss.
    pub label_radius: f64,
    pub opt: &'a OptConfig,
    pub loss: &'a LossSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    pub b_beta: f64,
    pub c_kappa: f64,
    /// `B_β/λ`: radius of the invariant set in the optimizer's own `R` norm.
    pub r_param: f64,
    pub r_theta: f64,
    pub r_x: Bound,
    pub b_tilde_k: Bound,
    pub r_a: Bound,
    /// `R_X R_θ²`.
    pub velocity: Bound,
    /// `R_a B̃_𝒦`.
    pub drift: Bound,
    pub mode: RMode,
}

impl BoundSet {
    pub fn vacuous_names(&self) -> Vec<&'static str> {
        [
            ("r_x", self.r_x),
            ("b_tilde_k", self.b_tilde_k),
            ("r_a", self.r_a),
            ("velocity", self.velocity),
            ("drift", self.drift),
        ]
        .into_iter()
        .filter(|(_, b)| b.is_vacuous())
        .map(|(n, _)| n)
        .collect()
    }
}

/// `R_X = R₀ exp(R_θ²)`.
pub fn state_radius(r0: f64, r_theta: f64) -> Bound {
    Bound::new(r0 * (r_theta * r_theta).exp())
}

/// `B̃_𝒦 = R₂² (2βR₁²R₂² + (1 + 2βR₂²R₁²) exp(2βR₁²R₂²))`.
pub fn drift_constant(beta: f64, r1: f64, r2: f64) -> f64 {
    let s = 2.0 * beta * r1 * r1 * r2 * r2;
    r2 * r2 * (s + (1.0 + s) * s.exp())
}

/// `‖Γ(x, µ, ν)‖ ≤ R₁R₂²` for µ in the `R₁` ball and block norms at most `R₂`.
pub fn velocity_bound(r1: f64, r2: f64) -> f64 {
    r1 * r2 * r2
}

/// `‖∇_x ℋ‖ ≤ 2βR₂⁴R₁²‖a‖`.
pub fn hamiltonian_grad_bound(beta: f64, r1: f64, r2: f64, a_norm: f64) -> f64 {
    2.0 * beta * r2.powi(4) * r1 * r1 * a_norm
}

/// `Λ_{µ,p}(‖z‖) = (1 + 2R‖z‖) exp(2R‖z‖/p)`, the Lipschitz constant of
/// `µ ↦ γ(z, µ)` in `W_p` for measures supported in the `R` ball.
pub fn lip_mu(r: f64, z_norm: f64, p: f64) -> f64 {
    let base = 1.0 + 2.0 * r * z_norm;
    if p.is_infinite() {
        base
    } else {
        base * (2.0 * r * z_norm / p).exp()
    }
}

/// Lipschitz constant of `z ↦ γ(z, µ)` and bound on `‖D_zγ‖`.
pub fn gamma_lip_z(r1: f64) -> f64 {
    2.0 * r1 * r1
}

/// Hilbert-Schmidt bound on the second z-derivative of γ.
pub fn gamma_zz_bound(r1: f64) -> f64 {
    8.0 * r1.powi(3)
}

/// Terminal costate radius `K(R)` for the built-in losses.
pub fn loss_k(loss: &LossSpec, r: f64, label_radius: f64) -> f64 {
    match loss {
        LossSpec::GlobalQuadratic { target } => r + norm(target),
        LossSpec::LabelQuadratic => r + label_radius,
    }
}

pub fn compute_bounds(inp: &BoundInputs<'_>) -> Result<BoundSet> {
    inp.opt.validate()?;
    let bb = b_beta(inp.opt.beta1, inp.opt.beta2);
    let r_param = bb / inp.opt.lambda;
    let c_r = match inp.opt.mode {
        RMode::Blockwise => 1.0,
        RMode::Identity => ((inp.d * inp.k) as f64).sqrt(),
    };
    let r_theta = c_r * r_param;
    let r_x = state_radius(inp.r0, r_theta);
    let b_tilde_k = r_x.and_then(|rx| drift_constant(inp.beta, rx, r_theta));
    let r_a = match (r_x, b_tilde_k) {
        (Bound::Finite(rx), Bound::Finite(bk)) => Bound::new(loss_k(inp.loss, rx, inp.label_radius) * bk.exp()),
        _ => Bound::Vacuous,
    };
    let velocity = r_x.and_then(|rx| velocity_bound(rx, r_theta));
    let drift = match (r_a, b_tilde_k) {
        (Bound::Finite(ra), Bound::Finite(bk)) => Bound::new(ra * bk),
        _ => Bound::Vacuous,
    };
    Ok(BoundSet {
        b_beta: bb,
        c_kappa: c_kappa(inp.opt.beta1, inp.opt.beta2),
        r_param,
        r_theta,
        r_x,
        b_tilde_k,
        r_a,
        velocity,
        drift,
        mode: inp.opt.mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub limit: Bound,
    /// `limit − worst`; absent when the limit is vacuous.
    pub margin: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub checks: Vec<CheckResult>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// Slack granted to every comparison, for rounding in the measured side.
pub const CHECK_SLACK: f64 = 1e-12;

fn check(name: &str, worst: f64, limit: Bound) -> CheckResult {
    let (margin, pass) = match limit {
        Bound::Finite(l) => (Some(l - worst), worst <= l + CHECK_SLACK * l.max(1.0)),
        Bound::Vacuous => (None, true),
    };
    CheckResult {
        name: name.to_string(),
        worst,
        limit,
        margin,
        pass,
    }
}

/// Trajectories together with the per-layer head clouds that produced them.
#[derive(Clone, Copy, Debug)]
pub struct RunRecord<'a> {
    pub layers: &'a [HeadCloud],
    pub trajectories: &'a [Trajectory],
}

/// Checks a finished run against the invariant-set and trajectory bounds.
pub fn check_run(bounds: &BoundSet, beta: f64, runs: &[RunRecord<'_>]) -> BoundReport {
    let mut param_r = 0.0f64;
    let mut param_block = 0.0f64;
    let (mut xs, mut as_, mut vel, mut drift) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for run in runs {
        for cloud in run.layers {
            for h in cloud.heads() {
                param_r = param_r.max(r_map(h, bounds.mode).max_abs());
                param_block = param_block.max(h.block_norms().into_iter().fold(0.0, f64::max));
            }
        }
        let kernels: Vec<LayerKernel> = run.layers.iter().map(|c| LayerKernel::new(c, beta)).collect();
        for t in run.trajectories {
            xs = xs.max(t.max_state_norm());
            as_ = as_.max(t.max_adjoint_norm());
            let mut buf = vec![0.0; t.states[0].len()];
            for (r, k) in kernels.iter().enumerate().take(t.steps()) {
                k.velocity(&t.states[r], &t.weights, &mut buf);
                vel = vel.max(buf.chunks_exact(t.d).map(norm).fold(0.0, f64::max));
                if t.has_adjoints() {
                    k.adjoint_drift(&t.states[r], &t.weights, &t.adjoints[r + 1], &mut buf);
                    drift = drift.max(buf.chunks_exact(t.d).map(norm).fold(0.0, f64::max));
                }
            }
        }
    }
    BoundReport {
        checks: vec![
            check("param_r_norm", param_r, Bound::Finite(bounds.r_param)),
            check("param_invariant_set", param_block, Bound::Finite(bounds.r_theta)),
            check("state_radius", xs, bounds.r_x),
            check("costate_radius", as_, bounds.r_a),
            check("velocity", vel, bounds.velocity),
            check("adjoint_drift", drift, bounds.drift),
        ],
    }
}
