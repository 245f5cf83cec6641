//! AdamW with either entrywise or block-Frobenius second moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Block, HeadParams};

/// Normalization applied to the gradient before it enters the second moment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RMode {
    /// Plain AdamW: `R(g) = g`.
    Identity,
    /// Blockwise AdamW: every entry of a block carries that block's Frobenius norm.
    Blockwise,
}

/// Learning-rate schedule `η_j`, `j ≥ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSchedule {
    Constant(f64),
    /// Explicit rates for steps `1..=len`; later steps reuse the last entry.
    Sequence(Vec<f64>),
}

impl StepSchedule {
    pub fn at(&self, j: usize) -> f64 {
        assert!(j >= 1, "steps are numbered from 1");
        match self {
            StepSchedule::Constant(e) => *e,
            StepSchedule::Sequence(v) => v[(j - 1).min(v.len() - 1)],
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            StepSchedule::Constant(e) => vec![*e],
            StepSchedule::Sequence(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub eta: StepSchedule,
    pub mode: RMode,
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("optimizer.beta1 = {} must lie in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("optimizer.beta2 = {} must lie in [0, 1)", self.beta2));
        }
        if self.beta1 > self.beta2 {
            return bad(format!(
                "optimizer.beta1 = {} exceeds optimizer.beta2 = {}; the update bounds require 0 <= beta1 <= beta2 < 1",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return bad(format!("optimizer.eps = {} must be positive", self.eps));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!(
                "optimizer.lambda = {} must be positive; the invariant parameter ball has radius proportional to 1/lambda",
                self.lambda
            ));
        }
        let etas = self.eta.values();
        if etas.is_empty() {
            return bad("optimizer.eta is an empty schedule".into());
        }
        for e in etas {
            if !(e > 0.0) || !e.is_finite() {
                return bad(format!("optimizer.eta entry {e} must be positive"));
            }
            if e * self.lambda >= 1.0 {
                return bad(format!(
                    "optimizer.eta * optimizer.lambda = {} is not below 1; step sizes must lie in (0, 1/lambda)",
                    e * self.lambda
                ));
            }
        }
        Ok(())
    }

    pub fn eta_at(&self, j: usize) -> f64 {
        self.eta.at(j)
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub step: usize,
}

impl OptState {
    pub fn new(k: usize, d: usize) -> Self {
        Self {
            m: HeadParams::zeros(k, d),
            v: HeadParams::zeros(k, d),
            step: 0,
        }
    }
}

/// `R(g)`: identity, or the block Frobenius norm broadcast over each block.
pub fn r_map(g: &HeadParams, mode: RMode) -> HeadParams {
    match mode {
        RMode::Identity => g.clone(),
        RMode::Blockwise => {
            let mut out = HeadParams::zeros(g.k(), g.d());
            let norms = g.block_norms();
            for b in Block::ALL {
                out.block_mut(b).iter_mut().for_each(|v| *v = norms[b.index()]);
            }
            out
        }
    }
}

/// One AdamW step; returns the new parameters and optimizer state.
pub fn adamw_step(theta: &HeadParams, state: &OptState, grad: &HeadParams, cfg: &OptConfig) -> Result<(HeadParams, OptState)> {
    let mut t = theta.clone();
    let mut s = state.clone();
    adamw_step_in_place(&mut t, &mut s, grad, cfg)?;
    Ok((t, s))
}

pub fn adamw_step_in_place(theta: &mut HeadParams, state: &mut OptState, grad: &HeadParams, cfg: &OptConfig) -> Result<()> {
    if !theta.same_shape(grad) || !theta.same_shape(&state.m) {
        return Err(Error::InvalidInput("AdamW operands differ in shape".into()));
    }
    if grad.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericBlowup("non-finite gradient".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let r = r_map(grad, cfg.mode);
    for ((m, v), (g, rg)) in state
        .m
        .as_mut_slice()
        .iter_mut()
        .zip(state.v.as_mut_slice().iter_mut())
        .zip(grad.as_slice().iter().zip(r.as_slice()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * rg * rg;
    }
    state.step += 1;
    let j = state.step;
    let eta = cfg.eta_at(j);
    let c1 = 1.0 - b1.powi(j as i32);
    let c2 = 1.0 - b2.powi(j as i32);
    let decay = 1.0 - eta * cfg.lambda;
    for (th, (m, v)) in theta
        .as_mut_slice()
        .iter_mut()
        .zip(state.m.as_slice().iter().zip(state.v.as_slice()))
    {
        let upd = (m / c1) / ((v / c2).sqrt() + cfg.eps);
        *th = decay * *th - eta * upd;
    }
    Ok(())
}

/// The normalized update `m̂ / (√v̂ + ε)` for the state's current step.
pub fn update_direction(state: &OptState, cfg: &OptConfig) -> HeadParams {
    let j = state.step.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(j);
    let c2 = 1.0 - cfg.beta2.powi(j);
    let mut out = HeadParams::zeros(state.m.k(), state.m.d());
    for (o, (m, v)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(state.m.as_slice().iter().zip(state.v.as_slice()))
    {
        *o = (m / c1) / ((v / c2).sqrt() + cfg.eps);
    }
    out
}

/// `B_β = √((1 − β₁)/(1 − β₂))`.
pub fn b_beta(beta1: f64, beta2: f64) -> f64 {
    ((1.0 - beta1) / (1.0 - beta2)).sqrt()
}

/// Bound on `‖R(update)‖_∞` at step `j`; increases to `B_β`.
pub fn step_bound(beta1: f64, beta2: f64, j: usize) -> f64 {
    let j = j as i32;
    ((1.0 - beta2.powi(j)) * (1.0 - beta1) / ((1.0 - beta1.powi(j)) * (1.0 - beta2))).sqrt()
}

/// `C_κ = 1 + 2 B_β²`.
pub fn c_kappa(beta1: f64, beta2: f64) -> f64 {
    let b = b_beta(beta1, beta2);
    1.0 + 2.0 * b * b
}

/// Upper bound on `‖Δ update_j‖²_F` given past gradient differences
/// `deltas[i-1] = ‖g_i − g'_i‖_F`, `i = 1..=j`.
pub fn update_stability_bound(cfg: &OptConfig, deltas: &[f64]) -> f64 {
    let j = deltas.len();
    if j == 0 {
        return 0.0;
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let pre = 2.0 * (1.0 - b1) / (cfg.eps * cfg.eps * (1.0 - b1.powi(j as i32)));
    let s: f64 = deltas
        .iter()
        .enumerate()
        .map(|(idx, dl)| {
            let lag = (j - 1 - idx) as i32;
            (b1.powi(lag) + 2.0 * b2.powi(lag)) * dl * dl
        })
        .sum();
    pre * s
}

/// `α_{i,τ} = ∏_{j=i}^{τ} (1 − η_j λ)`, equal to 1 when `i > τ`.
pub fn alpha(cfg: &OptConfig, i: usize, tau: usize) -> f64 {
    (i.max(1)..=tau).map(|j| 1.0 - cfg.eta_at(j) * cfg.lambda).product()
}

/// Sensitivity weights of the trajectory to a perturbation at step `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaTable {
    pub horizon: usize,
    pub b_beta: f64,
    pub c_kappa: f64,
    /// `kappa0[i] = κ⁰_{i,T}` for `i = 0..T`.
    pub kappa0: Vec<f64>,
    /// `kappa_lambda[i] = κ^λ_{i,T}` for `i = 0..T`.
    pub kappa_lambda: Vec<f64>,
    /// `Σ_{j=1}^{T} η_j α_{j+1,T}`.
    pub decay_sum: f64,
}

pub fn kappa_constants(cfg: &OptConfig, horizon: usize) -> Result<KappaTable> {
    cfg.validate()?;
    let t = horizon;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    // α_{τ+1,T} for τ = 0..=T.
    let mut tail = vec![1.0; t + 2];
    for tau in (1..=t).rev() {
        tail[tau] = tail[tau + 1] * (1.0 - cfg.eta_at(tau) * cfg.lambda);
    }
    let mut kappa0 = vec![0.0; t];
    let mut kappa_lambda = vec![0.0; t];
    for i in 0..t {
        let (mut k0, mut kl) = (0.0, 0.0);
        for tau in i + 1..=t {
            let lag = (tau - i - 1) as i32;
            let term = (1.0 - b1) * cfg.eta_at(tau) * (b1.powi(lag) + 2.0 * b2.powi(lag)) / (1.0 - b1.powi(tau as i32));
            k0 += term;
            kl += term * tail[tau + 1];
        }
        kappa0[i] = k0;
        kappa_lambda[i] = kl;
    }
    let decay_sum = (1..=t).map(|j| cfg.eta_at(j) * tail[j + 1]).sum();
    Ok(KappaTable {
        horizon: t,
        b_beta: b_beta(b1, b2),
        c_kappa: c_kappa(b1, b2),
        kappa0,
        kappa_lambda,
        decay_sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: RMode) -> OptConfig {
        OptConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.1,
            eta: StepSchedule::Constant(0.05),
            mode,
        }
    }

    #[test]
    fn worked_constants() {
        assert!((b_beta(0.9, 0.999) - 10.0).abs() < 1e-12);
        assert!((c_kappa(0.9, 0.999) - 201.0).abs() < 1e-9);
        assert_eq!(c_kappa(0.5, 0.5), 3.0);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let c = cfg(RMode::Identity);
        let theta = HeadParams::zeros(1, 2);
        let mut g = HeadParams::zeros(1, 2);
        g.as_mut_slice()[0] = 3.0;
        g.as_mut_slice()[5] = -0.5;
        let (t, s) = adamw_step(&theta, &OptState::new(1, 2), &g, &c).unwrap();
        assert_eq!(s.step, 1);
        assert!((t.as_slice()[0] + 0.05).abs() < 1e-9);
        assert!((t.as_slice()[5] - 0.05).abs() < 1e-9);
    }

    #[test]
    fn blockwise_r_map_broadcasts_block_norms() {
        let mut g = HeadParams::zeros(1, 2);
        g.block_mut(Block::Key).copy_from_slice(&[3.0, 4.0]);
        let r = r_map(&g, RMode::Blockwise);
        assert_eq!(r.block(Block::Key), &[5.0, 5.0]);
        assert_eq!(r.block(Block::Query), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_inverted_betas() {
        let mut c = cfg(RMode::Blockwise);
        c.beta1 = 0.999;
        c.beta2 = 0.9;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("beta1 <= beta2"), "{msg}");
    }
}
