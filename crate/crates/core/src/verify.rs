//! Randomized verification of the analytic derivatives and of every
//! inequality the analysis relies on, plus the finite-difference gradient
//! suite. Each check reports its worst instance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    adjoint_drift, attention_gamma, gamma_mu_derivative, gamma_z_jacobian, hamiltonian_grad_x, head_gradient,
    mha_velocity,
};
use crate::bounds::{check_run, compute_bounds, drift_constant, gamma_lip_z, lip_mu, velocity_bound, BoundInputs, BoundReport, BoundSet, RunRecord};
use crate::config::ExperimentConfig;
use crate::discrete::{DiscreteModel, LossSpec, Trajectory};
use crate::error::Result;
use crate::harness::{data_batch, grad_check, relative_error};
use crate::linalg::{dist_sq, dot, norm, Matrix};
use crate::mean_field::MeanFieldParams;
use crate::measure::EmpiricalMeasure;
use crate::optim::{
    adamw_step_in_place, b_beta, c_kappa, kappa_constants, r_map, step_bound, update_direction, update_stability_bound,
    OptConfig, OptState, RMode, StepSchedule,
};
use crate::params::{Block, HeadCloud, HeadParams};
use crate::seed::{rng_for, sample_ball, xavier_head, Stream};
use crate::transport::{wasserstein, Order};

/// Stencil step of the derivative checks. With a fourth-order stencil the
/// rounding error `ε|f|/h` dominates below this step.
pub const FD_STEP: f64 = 1e-3;
/// Largest accepted relative error of a derivative against differences.
pub const FD_TOLERANCE: f64 = 1e-6;
/// Absolute slack granted to every inequality.
pub const INEQUALITY_SLACK: f64 = 1e-10;

/// Worst instance of one randomized check. For inequalities `worst` is the
/// largest `lhs − rhs`; for derivative checks it is the largest relative
/// error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzCheck {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl FuzzCheck {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            worst,
            tolerance,
            pass: worst <= tolerance,
        }
    }
}

fn run_check(name: &str, n: usize, tol: f64, rng: &mut ChaCha8Rng, mut f: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<FuzzCheck> {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n {
        let v = f(rng)?;
        // NaN must fail the check, not vanish in the max.
        worst = if v.is_nan() { f64::INFINITY } else { worst.max(v) };
    }
    Ok(FuzzCheck::new(name, n, worst, tol))
}

/// Jacobian of `f` at `x` by the fourth-order five-point stencil. The plain
/// central quotient carries an `h² f‴/6` truncation error that exceeds the
/// tolerance on steep attention logits.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
    let m = f(x)?.len();
    let mut jac = Matrix::zeros(m, x.len());
    let mut p = x.to_vec();
    for j in 0..x.len() {
        let mut at = |s: f64| {
            p[j] = x[j] + s * h;
            let v = f(&p);
            p[j] = x[j];
            v
        };
        let (u2, u1, d1, d2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
        for i in 0..m {
            jac[(i, j)] = (8.0 * (u1[i] - d1[i]) - (u2[i] - d2[i])) / (12.0 * h);
        }
    }
    Ok(jac)
}

/// Largest [`relative_error`] between two arrays, floored relative to the
/// largest difference quotient.
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| relative_error(*a, *b, scale))
        .fold(0.0, f64::max)
}

pub fn random_weights<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// Randomly weighted measure with `n` atoms in the `radius` ball.
pub fn random_measure<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize, radius: f64) -> Result<EmpiricalMeasure> {
    let atoms = (0..n).flat_map(|_| sample_ball(rng, d, radius)).collect();
    let w = random_weights(rng, n);
    EmpiricalMeasure::new(d, atoms, w)
}

fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize, r: f64) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::uniform(d, (0..n).flat_map(|_| sample_ball(rng, d, r)).collect())
}

pub fn random_cloud<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, heads: usize) -> Result<HeadCloud> {
    let hs = (0..heads).map(|_| xavier_head(rng, k, d)).collect();
    let w = random_weights(rng, heads);
    HeadCloud::new(hs, w)
}

/// Head whose four blocks have Frobenius norms drawn uniformly in `[0, r2]`.
pub fn head_in_set<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, r2: f64) -> HeadParams {
    let mut h = xavier_head(rng, k, d);
    for b in [Block::Query, Block::Key, Block::Value, Block::Output] {
        let target = rng.random_range(0.0..=r2);
        let blk = h.block_mut(b);
        let n = norm(blk);
        if n > 0.0 {
            blk.iter_mut().for_each(|v| *v *= target / n);
        }
    }
    h
}

fn cloud_in_set<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, heads: usize, r2: f64) -> Result<HeadCloud> {
    let hs = (0..heads).map(|_| head_in_set(rng, k, d, r2)).collect();
    let w = random_weights(rng, heads);
    HeadCloud::new(hs, w)
}

/// Radial retraction onto the closed `r` ball.
fn clip(mut p: Vec<f64>, r: f64) -> Vec<f64> {
    let s = norm(&p);
    if s > r {
        p.iter_mut().for_each(|v| *v *= r / s);
    }
    p
}

pub fn jacobian_error<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let d = rng.random_range(2..=5);
    let n = rng.random_range(2..=6);
    let mu = random_measure(rng, d, n, 1.5)?;
    let z = sample_ball(rng, d, 2.0);
    let j = gamma_z_jacobian(&z, &mu)?;
    let fd = central_differences(&z, FD_STEP, |p| Ok(attention_gamma(p, &mu, None)?.value))?;
    Ok(max_relative_error(j.as_slice(), fd.as_slice()))
}

/// Moving atom `j` of µ changes γ at rate `w_j ∂_µ γ(z, µ)(y_j)`.
pub fn measure_derivative_error<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let d = rng.random_range(2..=5);
    let n = rng.random_range(2..=6);
    let mu = random_measure(rng, d, n, 1.5)?;
    let z = sample_ball(rng, d, 2.0);
    let j = rng.random_range(0..n);
    let analytic = gamma_mu_derivative(&z, &mu, mu.atom(j))?.scale(mu.weight(j));
    let fd = central_differences(mu.atom(j), FD_STEP, |y| {
        let mut atoms = mu.atoms().to_vec();
        atoms[j * d..(j + 1) * d].copy_from_slice(y);
        let moved = EmpiricalMeasure::new(d, atoms, mu.weights().to_vec())?;
        Ok(attention_gamma(&z, &moved, None)?.value)
    })?;
    Ok(max_relative_error(analytic.as_slice(), fd.as_slice()))
}

pub fn hamiltonian_error<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let d = 4;
    let n_atoms = rng.random_range(2..=5);
    let mu = random_measure(rng, d, n_atoms, 1.5)?;
    let n_heads = rng.random_range(1..=3);
    let nu = random_cloud(rng, 2, d, n_heads)?;
    let x = sample_ball(rng, d, 1.5);
    let a = sample_ball(rng, d, 1.0);
    let beta = rng.random_range(0.5..1.5);
    let g = hamiltonian_grad_x(&x, &mu, &nu, &a, beta)?;
    let fd = central_differences(&x, FD_STEP, |p| Ok(vec![dot(&a, &mha_velocity(p, &mu, &nu, beta)?)]))?;
    Ok(max_relative_error(&g, fd.as_slice()))
}

/// `∂/∂x_i Σ_j w_j ⟨a_j, Γ(x_j, µ_X, ν)⟩ = w_i 𝒦(x_i, ρ, ν, a_i)`: every
/// token moves both as a query and as an atom of µ.
pub fn drift_error<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let d = 4;
    let n = rng.random_range(2..=5);
    let w = random_weights(rng, n);
    let xs: Vec<f64> = (0..n).flat_map(|_| sample_ball(rng, d, 1.5)).collect();
    let costates: Vec<f64> = (0..n).flat_map(|_| sample_ball(rng, d, 1.0)).collect();
    let n_heads = rng.random_range(1..=3);
    let nu = random_cloud(rng, 2, d, n_heads)?;
    let beta = rng.random_range(0.5..1.5);
    let i = rng.random_range(0..n);
    let tok = |v: &[f64], j: usize| v[j * d..(j + 1) * d].to_vec();
    let pairs: Vec<f64> = (0..n).flat_map(|j| [tok(&xs, j), tok(&costates, j)].concat()).collect();
    let rho = EmpiricalMeasure::new(2 * d, pairs, w.clone())?;
    let k: Vec<f64> = adjoint_drift(&tok(&xs, i), &rho, &nu, &tok(&costates, i), beta)?
        .into_iter()
        .map(|v| w[i] * v)
        .collect();
    let fd = central_differences(&tok(&xs, i), FD_STEP, |p| {
        let mut moved = xs.clone();
        moved[i * d..(i + 1) * d].copy_from_slice(p);
        let mu = EmpiricalMeasure::new(d, moved.clone(), w.clone())?;
        let mut total = 0.0;
        for j in 0..n {
            total += w[j] * dot(&tok(&costates, j), &mha_velocity(&tok(&moved, j), &mu, &nu, beta)?);
        }
        Ok(vec![total])
    })?;
    Ok(max_relative_error(&k, fd.as_slice()))
}

/// Per-block errors of [`head_gradient`] against differences of
/// `⟨a, θ_Oᵀ θ_V γ(β θ_Kᵀ θ_Q x, µ)⟩`, in `[Q, K, V, O]` order.
pub fn head_gradient_errors<R: Rng + ?Sized>(rng: &mut R) -> Result<[f64; 4]> {
    let (k, d) = (rng.random_range(1..=3), 4);
    let n_atoms = rng.random_range(2..=5);
    let mu = random_measure(rng, d, n_atoms, 1.5)?;
    let theta = xavier_head(rng, k, d);
    let x = sample_ball(rng, d, 1.5);
    let a = sample_ball(rng, d, 1.0);
    let beta = rng.random_range(0.5..1.5);
    let g = head_gradient(&x, &mu, &a, &theta, beta)?;
    let fd = central_differences(theta.as_slice(), FD_STEP, |p| {
        let cloud = HeadCloud::uniform(vec![HeadParams::from_flat(k, d, p.to_vec())?])?;
        Ok(vec![dot(&a, &mha_velocity(&x, &mu, &cloud, beta)?)])
    })?;
    let fd = HeadParams::from_flat(k, d, fd.into_vec())?;
    Ok([Block::Query, Block::Key, Block::Value, Block::Output].map(|b| max_relative_error(g.block(b), fd.block(b))))
}

/// Derivative formulas against central differences, `n` instances each.
pub fn derivative_checks(master: u64, n: usize) -> Result<Vec<FuzzCheck>> {
    let mut out = Vec::new();
    let mut rng = rng_for(master, Stream::Fuzz, &[1]);
    out.push(run_check("gamma_z_jacobian", n, FD_TOLERANCE, &mut rng, |r| jacobian_error(r))?);
    out.push(run_check("gamma_mu_derivative", n, FD_TOLERANCE, &mut rng, |r| measure_derivative_error(r))?);
    out.push(run_check("hamiltonian_grad_x", n, FD_TOLERANCE, &mut rng, |r| hamiltonian_error(r))?);
    out.push(run_check("adjoint_drift", n, FD_TOLERANCE, &mut rng, |r| drift_error(r))?);
    let mut worst = [f64::NEG_INFINITY; 4];
    for _ in 0..n {
        for (w, e) in worst.iter_mut().zip(head_gradient_errors(&mut rng)?) {
            *w = if e.is_nan() { f64::INFINITY } else { w.max(e) };
        }
    }
    for (name, w) in ["head_gradient_q", "head_gradient_k", "head_gradient_v", "head_gradient_o"].iter().zip(worst) {
        out.push(FuzzCheck::new(name, n, w, FD_TOLERANCE));
    }
    Ok(out)
}

/// `‖γ(z, µ) − γ(z, µ̃)‖ − Λ_{µ,p}(‖z‖) W_p(µ, µ̃)` for measures in the `R` ball.
pub fn lip_mu_excess<R: Rng + ?Sized>(rng: &mut R, order: Order) -> Result<f64> {
    let d = rng.random_range(1..=4);
    let n = rng.random_range(1..=5);
    let r = rng.random_range(0.2..2.0);
    let mu = uniform_in_ball(rng, d, n, r)?;
    // Small perturbations probe the local constant, independent draws the global one.
    let nu = if rng.random_bool(0.5) {
        let atoms = (0..n)
            .flat_map(|i| {
                let p: Vec<f64> = mu.atom(i).iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
                clip(p, r)
            })
            .collect();
        EmpiricalMeasure::uniform(d, atoms)?
    } else {
        uniform_in_ball(rng, d, n, r)?
    };
    let z_radius = rng.random_range(0.0..3.0);
    let z = sample_ball(rng, d, z_radius);
    let p = match order {
        Order::One => 1.0,
        Order::Two => 2.0,
        Order::Infinity => f64::INFINITY,
    };
    let g1 = attention_gamma(&z, &mu, None)?.value;
    let g2 = attention_gamma(&z, &nu, None)?.value;
    let w = wasserstein(&mu, &nu, order)?;
    Ok(dist_sq(&g1, &g2).sqrt() - lip_mu(r, norm(&z), p) * w)
}

/// `‖γ(z) − γ(z̃)‖ − 2R₁²‖z − z̃‖` with queries and atoms in the `R₁` ball.
pub fn gamma_lip_z_excess<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let d = rng.random_range(1..=4);
    let r1 = rng.random_range(0.1..2.0);
    let n = rng.random_range(1..=6);
    let mu = uniform_in_ball(rng, d, n, r1)?;
    let z = sample_ball(rng, d, r1);
    let zt = if rng.random_bool(0.5) {
        clip(z.iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect(), r1)
    } else {
        sample_ball(rng, d, r1)
    };
    let g1 = attention_gamma(&z, &mu, None)?.value;
    let g2 = attention_gamma(&zt, &mu, None)?.value;
    Ok(dist_sq(&g1, &g2).sqrt() - gamma_lip_z(r1) * dist_sq(&z, &zt).sqrt())
}

/// `‖Γ(x, µ, ν)‖ − R₁R₂²` with µ in the `R₁` ball and ν in `𝔖(R₂)`.
pub fn velocity_excess<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let (k, d) = (rng.random_range(1..=3), rng.random_range(2..=4));
    let r1 = rng.random_range(0.1..2.0);
    let r2 = rng.random_range(0.1..2.0);
    let n_atoms = rng.random_range(1..=5);
    let mu = uniform_in_ball(rng, d, n_atoms, r1)?;
    let heads = rng.random_range(1..=4);
    let nu = cloud_in_set(rng, k, d, heads, r2)?;
    let x = sample_ball(rng, d, 3.0);
    let beta = rng.random_range(0.1..2.0);
    Ok(norm(&mha_velocity(&x, &mu, &nu, beta)?) - velocity_bound(r1, r2))
}

/// `‖𝒦(x, ρ, ν, a)‖ − R₃ B̃_𝒦` with states in the `R₁` ball, costates in the
/// `R₃` ball and ν in `𝔖(R₂)`.
pub fn drift_excess<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let (k, d) = (rng.random_range(1..=3), rng.random_range(2..=4));
    let r1 = rng.random_range(0.1..1.5);
    let r2 = rng.random_range(0.1..1.5);
    let r3 = rng.random_range(0.1..2.0);
    let n = rng.random_range(1..=5);
    let pairs: Vec<f64> = (0..n)
        .flat_map(|_| [sample_ball(rng, d, r1), sample_ball(rng, d, r3)].concat())
        .collect();
    let w = random_weights(rng, n);
    let rho = EmpiricalMeasure::new(2 * d, pairs, w)?;
    let heads = rng.random_range(1..=3);
    let nu = cloud_in_set(rng, k, d, heads, r2)?;
    let x = sample_ball(rng, d, r1);
    let a = sample_ball(rng, d, r3);
    let beta = rng.random_range(0.1..2.0);
    Ok(norm(&adjoint_drift(&x, &rho, &nu, &a, beta)?) - r3 * drift_constant(beta, r1, r2))
}

/// Random valid optimizer: `β₁ ≤ β₂`, `ηλ < 1`, either `R` mode.
pub fn random_opt<R: Rng + ?Sized>(rng: &mut R) -> OptConfig {
    let beta2 = rng.random_range(0.0..0.9999);
    let beta1 = rng.random_range(0.0..=beta2);
    let lambda = rng.random_range(0.01..2.0);
    OptConfig {
        beta1,
        beta2,
        eps: 10f64.powf(rng.random_range(-8.0..0.0)),
        lambda,
        eta: StepSchedule::Constant(rng.random_range(0.01..0.99) / lambda),
        mode: if rng.random_bool(0.5) { RMode::Identity } else { RMode::Blockwise },
    }
}

/// Gradient with entries spread over five orders of magnitude.
pub fn random_grad<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize) -> HeadParams {
    let scale = 10f64.powf(rng.random_range(-3.0..2.0));
    let mut g = HeadParams::zeros(k, d);
    g.as_mut_slice().iter_mut().for_each(|v| *v = scale * rng.random_range(-1.0..1.0));
    g
}

/// Largest `‖R(u_j)‖_∞ − bound(j)` along one random gradient stream.
pub fn update_bound_excess<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> Result<f64> {
    let cfg = random_opt(rng);
    let (k, d) = (2, 3);
    let mut st = OptState::new(k, d);
    let mut theta = HeadParams::zeros(k, d);
    let mut worst = f64::NEG_INFINITY;
    for j in 1..=steps {
        let g = random_grad(rng, k, d);
        adamw_step_in_place(&mut theta, &mut st, &g, &cfg)?;
        let u = r_map(&update_direction(&st, &cfg), cfg.mode).max_abs();
        worst = worst.max(u - step_bound(cfg.beta1, cfg.beta2, j));
    }
    Ok(worst)
}

/// Two gradient streams from a common start: largest
/// `‖u_j − u'_j‖²_F − bound_j` over the steps.
pub fn update_stability_excess<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> Result<f64> {
    let cfg = random_opt(rng);
    let (k, d) = (1, 3);
    let (mut s1, mut s2) = (OptState::new(k, d), OptState::new(k, d));
    let (mut t1, mut t2) = (HeadParams::zeros(k, d), HeadParams::zeros(k, d));
    let mut deltas = Vec::with_capacity(steps);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..steps {
        let g1 = random_grad(rng, k, d);
        let mut g2 = g1.clone();
        if rng.random_bool(0.7) {
            let bump = random_grad(rng, k, d);
            g2.add_scaled(rng.random_range(0.0..1.0), &bump);
        }
        deltas.push(g1.dist_sq(&g2).sqrt());
        adamw_step_in_place(&mut t1, &mut s1, &g1, &cfg)?;
        adamw_step_in_place(&mut t2, &mut s2, &g2, &cfg)?;
        let gap = update_direction(&s1, &cfg).dist_sq(&update_direction(&s2, &cfg));
        worst = worst.max(gap - update_stability_bound(&cfg, &deltas));
    }
    Ok(worst)
}

/// Lipschitz and size inequalities, `n` instances each.
pub fn inequality_checks(master: u64, n: usize) -> Result<Vec<FuzzCheck>> {
    let mut rng = rng_for(master, Stream::Fuzz, &[2]);
    let s = INEQUALITY_SLACK;
    Ok(vec![
        run_check("lip_mu_p1", n, s, &mut rng, |r| lip_mu_excess(r, Order::One))?,
        run_check("lip_mu_p2", n, s, &mut rng, |r| lip_mu_excess(r, Order::Two))?,
        run_check("lip_mu_pinf", n, s, &mut rng, |r| lip_mu_excess(r, Order::Infinity))?,
        run_check("gamma_lip_z", n, s, &mut rng, |r| gamma_lip_z_excess(r))?,
        run_check("bounded_velocity", n, s, &mut rng, |r| velocity_excess(r))?,
        run_check("bounded_drift", n, s, &mut rng, |r| drift_excess(r))?,
        run_check("update_stability", n, s, &mut rng, |r| {
            let steps = r.random_range(1..=10);
            update_stability_excess(r, steps)
        })?,
    ])
}

/// At least `total_steps` fuzzed Adam updates against the step bound.
pub fn update_bound_check(master: u64, total_steps: usize) -> Result<FuzzCheck> {
    let mut rng = rng_for(master, Stream::Fuzz, &[3]);
    let per = 20;
    let streams = total_steps.div_ceil(per);
    let mut c = run_check("update_step_bound", streams, INEQUALITY_SLACK, &mut rng, |r| update_bound_excess(r, per))?;
    c.instances = streams * per;
    Ok(c)
}

/// `Σ_{j<T} κ^λ_{j,T} − C_κ/λ` over random configurations, `T ≤ 50`.
pub fn kappa_check(master: u64, configs: usize) -> Result<FuzzCheck> {
    let mut rng = rng_for(master, Stream::Fuzz, &[4]);
    run_check("kappa_sum", configs, INEQUALITY_SLACK, &mut rng, |r| {
        let mut cfg = random_opt(r);
        if r.random_bool(0.2) {
            cfg.beta1 = cfg.beta2;
        }
        let t = r.random_range(1..=50);
        let k = kappa_constants(&cfg, t)?;
        let sum: f64 = k.kappa_lambda.iter().sum();
        let bound = c_kappa(cfg.beta1, cfg.beta2) / cfg.lambda;
        // Relative slack: the sums reach 10⁴ for small λ.
        Ok((sum - bound) / bound.max(1.0))
    })
}

/// Largest `‖R(θ)‖_∞ − B_β/λ` over random gradient streams started anywhere
/// in the invariant set.
pub fn invariant_stream_check(master: u64, streams: usize, steps: usize, opt: &OptConfig) -> Result<FuzzCheck> {
    let mut rng = rng_for(master, Stream::Fuzz, &[5]);
    let radius = b_beta(opt.beta1, opt.beta2) / opt.lambda;
    let (k, d) = (2, 4);
    run_check("invariant_set_streams", streams, 1e-12, &mut rng, |r| {
        let mut theta = xavier_head(r, k, d);
        let s = r_map(&theta, opt.mode).max_abs();
        theta = theta.scaled(r.random_range(0.0..=1.0) * radius / s);
        let mut st = OptState::new(k, d);
        // Persistent signs push the parameters outward as hard as Adam allows.
        let sign = random_grad(r, k, d);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..steps {
            let mut g = random_grad(r, k, d);
            if r.random_bool(0.5) {
                g = sign.scaled(r.random_range(0.1..10.0));
            }
            adamw_step_in_place(&mut theta, &mut st, &g, opt)?;
            worst = worst.max(r_map(&theta, opt.mode).max_abs() - radius);
        }
        Ok(worst)
    })
}

/// Discrete and mean-field training under `opt`: the parameter radius at
/// every step, and the trajectory bounds on the final models.
pub fn training_run_check(cfg: &ExperimentConfig, opt: &OptConfig) -> Result<(FuzzCheck, BoundReport, BoundSet)> {
    let v = &cfg.verify;
    let m = &cfg.model;
    let loss = cfg.loss_spec();
    let mut pcfg = cfg.clone();
    pcfg.optimizer.lambda = opt.lambda;
    pcfg.optimizer.mode = opt.mode;
    let pi = pcfg.pi()?;
    let mut dm = DiscreteModel::from_pi(&pi, v.layers, v.heads, m.beta, &mut rng_for(cfg.master_seed, Stream::Init, &[u64::MAX]))?;
    let mut mf = MeanFieldParams::from_pi(&pi, 4 * v.layers, m.beta)?;
    let radius = b_beta(opt.beta1, opt.beta2) / opt.lambda;
    let worst_r = |clouds: &[HeadCloud]| {
        clouds
            .iter()
            .flat_map(|c| c.heads())
            .map(|h| r_map(h, opt.mode).max_abs())
            .fold(0.0, f64::max)
    };
    let mut worst = worst_r(dm.layers()).max(worst_r(mf.clouds())) - radius;
    let (mut dtrajs, mut mtrajs): (Vec<Trajectory>, Vec<Trajectory>) = (Vec::new(), Vec::new());
    for tau in 0..v.train_steps {
        let batch = data_batch(cfg.master_seed, tau, cfg.sweep.batch, m.tokens, m.d, m.r0, &loss)?;
        dtrajs = dm.train_step(&batch, &loss, opt)?;
        mtrajs = mf.train_step(&batch, &loss, opt)?;
        worst = worst.max(worst_r(dm.layers()).max(worst_r(mf.clouds())) - radius);
    }
    let bounds = compute_bounds(&BoundInputs {
        d: m.d,
        k: m.k,
        beta: m.beta,
        r0: m.r0,
        label_radius: m.r0,
        opt,
        loss: &loss,
    })?;
    let report = check_run(
        &bounds,
        m.beta,
        &[
            RunRecord {
                layers: dm.layers(),
                trajectories: &dtrajs,
            },
            RunRecord {
                layers: mf.clouds(),
                trajectories: &mtrajs,
            },
        ],
    );
    let name = format!("invariant_set_training_{:?}", opt.mode).to_lowercase();
    Ok((FuzzCheck::new(&name, v.train_steps, worst, 1e-12), report, bounds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bounds: BoundSet,
    /// Bounds that overflowed and are therefore vacuous at this configuration.
    pub vacuous: Vec<String>,
    pub checks: Vec<FuzzCheck>,
    pub run: BoundReport,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass) && self.run.all_pass()
    }

    /// Name of the first failing invariant, if any.
    pub fn first_failure(&self) -> Option<String> {
        self.checks
            .iter()
            .find(|c| !c.pass)
            .map(|c| c.name.clone())
            .or_else(|| self.run.first_failure().map(|c| c.name.clone()))
    }
}

/// The full inequality suite at the configured sizes.
pub fn verify_bounds(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let n = cfg.verify.instances;
    let seed = cfg.master_seed;
    let opt = cfg.opt();
    let mut checks = derivative_checks(seed, n.div_ceil(10))?;
    checks.extend(inequality_checks(seed, n)?);
    checks.push(update_bound_check(seed, 10 * n)?);
    checks.push(kappa_check(seed, n.div_ceil(10))?);
    checks.push(invariant_stream_check(seed, n.div_ceil(10), cfg.verify.train_steps, &opt)?);
    let (train, run, bounds) = training_run_check(cfg, &opt)?;
    checks.push(train);
    Ok(VerifyReport {
        vacuous: bounds.vacuous_names().into_iter().map(String::from).collect(),
        bounds,
        checks,
        run,
    })
}

/// One finite-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub loss: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

/// [`grad_check`] over both losses and the configured seeds, on models drawn
/// from the configured π.
pub fn grad_check_suite(cfg: &ExperimentConfig) -> Result<Vec<GradCheckCase>> {
    let g = &cfg.grad_check;
    let m = &cfg.model;
    let pi = cfg.pi()?;
    let target = cfg.loss.target.clone().unwrap_or_else(|| {
        let mut t = vec![0.0; m.d];
        t[0] = 0.5;
        t
    });
    let mut out = Vec::new();
    for (name, loss) in [
        ("global_quadratic", LossSpec::GlobalQuadratic { target }),
        ("label_quadratic", LossSpec::LabelQuadratic),
    ] {
        for seed in 0..g.seeds as u64 {
            let mut rng = rng_for(cfg.master_seed, Stream::Init, &[u64::MAX - 1, seed]);
            let model = DiscreteModel::from_pi(&pi, g.layers, g.heads, m.beta, &mut rng)?;
            let batch = data_batch(cfg.master_seed ^ seed.wrapping_add(1), 0, g.batch, g.tokens, m.d, m.r0, &loss)?;
            let rep = grad_check(&model, &loss, &batch, g.step, None)?;
            out.push(GradCheckCase {
                loss: name.into(),
                seed,
                max_rel_err: rep.max_rel_err,
            });
        }
    }
    Ok(out)
}
