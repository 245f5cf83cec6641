//! Attention map, its derivatives, and the per-layer kernels used by the
//! forward and adjoint passes.

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{dot, mat_t_vec, mat_vec, norm, tree_sum, Matrix};
use crate::measure::EmpiricalMeasure;
use crate::params::{Block, HeadCloud, HeadParams};

/// Soft projection onto a ball of radius `r`: the identity inside, a smooth
/// radial contraction outside.
pub fn project_ball(x: &[f64], r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidInput(format!("projection radius must be positive, got {r}")));
    }
    check_finite("projected point", x)?;
    let excess = (norm(x) - r).max(0.0);
    let scale = 8.0 * r.max(1.0) * r.max(1.0);
    let f = 1.0 + excess * excess / scale;
    Ok(x.iter().map(|v| v / f).collect())
}

/// Attention value together with its normalizer, stored as
/// `Σ w e^{⟨z,y⟩} = shifted_sum · e^{shift}` so that it never overflows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub value: Vec<f64>,
    pub shift: f64,
    pub shifted_sum: f64,
}

impl AttentionOutput {
    pub fn log_normalizer(&self) -> f64 {
        self.shift + self.shifted_sum.ln()
    }

    pub fn normalizer(&self) -> f64 {
        self.shifted_sum * self.shift.exp()
    }
}

fn validate_query(z: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
    check_dim("attention query", mu.dim(), z.len())?;
    check_finite("attention query", z)
}

fn max_logit(z: &[f64], mu: &EmpiricalMeasure) -> f64 {
    mu.iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(y, _)| dot(z, y))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `γ(z, µ) = ∫ e^{⟨z,y⟩} y dµ / ∫ e^{⟨z,y⟩} dµ`, optionally with the atoms of
/// µ passed through [`project_ball`] first.
pub fn attention_gamma(z: &[f64], mu: &EmpiricalMeasure, projection: Option<f64>) -> Result<AttentionOutput> {
    validate_query(z, mu)?;
    match projection {
        None => Ok(gamma_with_shift(z, mu, max_logit(z, mu))),
        Some(r) => {
            let mut atoms = Vec::with_capacity(mu.atoms().len());
            for (y, _) in mu.iter() {
                atoms.extend(project_ball(y, r)?);
            }
            let projected = EmpiricalMeasure::new(mu.dim(), atoms, mu.weights().to_vec())?;
            Ok(gamma_with_shift(z, &projected, max_logit(z, &projected)))
        }
    }
}

/// Attention value computed with a caller-chosen exponent shift. The result
/// is mathematically independent of `shift`; [`attention_gamma`] uses the
/// largest logit.
pub fn gamma_with_shift(z: &[f64], mu: &EmpiricalMeasure, shift: f64) -> AttentionOutput {
    let d = mu.dim();
    let mut value = vec![0.0; d];
    let mut s = 0.0;
    for (y, w) in mu.iter() {
        let e = w * (dot(z, y) - shift).exp();
        s += e;
        for (v, yi) in value.iter_mut().zip(y) {
            *v += e * yi;
        }
    }
    value.iter_mut().for_each(|v| *v /= s);
    AttentionOutput {
        value,
        shift,
        shifted_sum: s,
    }
}

/// `D_z γ(z, µ)`: the covariance of µ tilted by `e^{⟨z,·⟩}`.
pub fn gamma_z_jacobian(z: &[f64], mu: &EmpiricalMeasure) -> Result<Matrix> {
    let g = attention_gamma(z, mu, None)?;
    let d = mu.dim();
    let mut jac = Matrix::zeros(d, d);
    let mut c = vec![0.0; d];
    for (y, w) in mu.iter() {
        let p = w * (dot(z, y) - g.shift).exp() / g.shifted_sum;
        if p == 0.0 {
            continue;
        }
        for i in 0..d {
            c[i] = y[i] - g.value[i];
        }
        for i in 0..d {
            for j in 0..d {
                jac[(i, j)] += p * c[i] * c[j];
            }
        }
    }
    Ok(jac)
}

/// Intrinsic measure derivative `∂_µ γ(z, µ)(y) = e^{⟨z,y⟩}/Z · [(y − γ) zᵀ + I]`.
/// Moving an atom `y_j` of weight `w_j` changes γ at rate `w_j ∂_µ γ(z, µ)(y_j)`.
pub fn gamma_mu_derivative(z: &[f64], mu: &EmpiricalMeasure, y: &[f64]) -> Result<Matrix> {
    check_dim("measure-derivative point", mu.dim(), y.len())?;
    check_finite("measure-derivative point", y)?;
    let g = attention_gamma(z, mu, None)?;
    let c = (dot(z, y) - g.shift).exp() / g.shifted_sum;
    let d = mu.dim();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = c * (y[i] - g.value[i]) * z[j];
        }
        m[(i, i)] += c;
    }
    Ok(m)
}

fn validate_cloud(nu: &HeadCloud, d: usize) -> Result<()> {
    check_dim("head cloud dimension", d, nu.d())
}

/// Multi-head velocity `Γ(x, µ, ν) = ∫ θ_Oᵀ θ_V γ(β θ_Kᵀ θ_Q x, µ) dν(θ)`.
pub fn mha_velocity(x: &[f64], mu: &EmpiricalMeasure, nu: &HeadCloud, beta: f64) -> Result<Vec<f64>> {
    validate_query(x, mu)?;
    validate_cloud(nu, x.len())?;
    let d = x.len();
    let kernels: Vec<HeadKernel> = nu.iter().map(|(h, w)| HeadKernel::new(h, w, beta)).collect();
    let mut out = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut g = vec![0.0; d];
    tree_sum(kernels.len(), &mut out, &mut |h, buf| {
        let k = &kernels[h];
        mat_vec(&k.a, d, d, x, &mut z);
        let gam = gamma_with_shift(&z, mu, max_logit(&z, mu));
        mat_vec(&k.u, d, d, &gam.value, &mut g);
        for (b, v) in buf.iter_mut().zip(&g) {
            *b = k.weight * v;
        }
    });
    Ok(out)
}

/// `∇_x ℋ(x, µ, ν, a)` with `ℋ = ⟨a, Γ(x, µ, ν)⟩` and µ held fixed.
pub fn hamiltonian_grad_x(
    x: &[f64],
    mu: &EmpiricalMeasure,
    nu: &HeadCloud,
    a: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    validate_query(x, mu)?;
    validate_cloud(nu, x.len())?;
    check_dim("costate", x.len(), a.len())?;
    let d = x.len();
    let kernels: Vec<HeadKernel> = nu.iter().map(|(h, w)| HeadKernel::new(h, w, beta)).collect();
    let mut out = vec![0.0; d];
    tree_sum(kernels.len(), &mut out, &mut |h, buf| {
        let k = &kernels[h];
        let z = Matrix::from_row_major(d, d, k.a.clone()).mul_vec(x);
        let mut q = vec![0.0; d];
        mat_t_vec(&k.u, d, d, a, &mut q);
        let jq = gamma_z_jacobian(&z, mu).expect("validated").mul_vec(&q);
        let mut r = vec![0.0; d];
        mat_t_vec(&k.a, d, d, &jq, &mut r);
        for (b, v) in buf.iter_mut().zip(&r) {
            *b = k.weight * v;
        }
    });
    Ok(out)
}

/// Adjoint drift `𝒦(x, ρ, ν, a)`: the Hamiltonian gradient at `x` plus the
/// back-reaction through the measure argument. `rho` is a measure on
/// state-costate pairs in ℝ^{2d}.
pub fn adjoint_drift(
    x: &[f64],
    rho: &EmpiricalMeasure,
    nu: &HeadCloud,
    a: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    let d = x.len();
    check_dim("state-costate measure", 2 * d, rho.dim())?;
    let mu = rho.marginal(0, d)?;
    let own = hamiltonian_grad_x(x, &mu, nu, a, beta)?;
    let kernels: Vec<HeadKernel> = nu.iter().map(|(h, w)| HeadKernel::new(h, w, beta)).collect();
    let mut out = vec![0.0; d];
    tree_sum(kernels.len(), &mut out, &mut |h, buf| {
        let k = &kernels[h];
        buf.iter_mut().for_each(|b| *b = 0.0);
        let mut z = vec![0.0; d];
        let mut q = vec![0.0; d];
        for (pair, w) in rho.iter() {
            let (y, p) = pair.split_at(d);
            mat_vec(&k.a, d, d, y, &mut z);
            mat_t_vec(&k.u, d, d, p, &mut q);
            let g = gamma_with_shift(&z, &mu, max_logit(&z, &mu));
            let c = w * (dot(&z, x) - g.shift).exp() / g.shifted_sum;
            let mut s = 0.0;
            for i in 0..d {
                s += (x[i] - g.value[i]) * q[i];
            }
            for i in 0..d {
                buf[i] += c * (z[i] * s + q[i]);
            }
        }
        buf.iter_mut().for_each(|b| *b *= k.weight);
    });
    for (o, v) in out.iter_mut().zip(&own) {
        *o += v;
    }
    Ok(out)
}

/// Gradient of `⟨a, θ_Oᵀ θ_V γ(β θ_Kᵀ θ_Q x, µ)⟩` with respect to the four
/// blocks of θ.
pub fn head_gradient(
    x: &[f64],
    mu: &EmpiricalMeasure,
    a: &[f64],
    theta: &HeadParams,
    beta: f64,
) -> Result<HeadParams> {
    validate_query(x, mu)?;
    check_dim("costate", x.len(), a.len())?;
    check_dim("head dimension", x.len(), theta.d())?;
    let mut out = HeadParams::zeros(theta.k(), theta.d());
    let mut scratch = GradScratch::new(theta.k(), theta.d());
    let a_mat = theta.interaction(beta);
    let u_mat = theta.value_output();
    let mut z = vec![0.0; x.len()];
    mat_vec(&a_mat, x.len(), x.len(), x, &mut z);
    let g = gamma_with_shift(&z, mu, max_logit(&z, mu));
    let jac = gamma_z_jacobian(&z, mu)?;
    let mut q = vec![0.0; x.len()];
    mat_t_vec(&u_mat, x.len(), x.len(), a, &mut q);
    let jq = jac.mul_vec(&q);
    scratch.accumulate(theta, beta, x, a, &g.value, &jq, 1.0, &mut out);
    Ok(out)
}

/// Precomputed `(w, β θ_Kᵀ θ_Q, θ_Oᵀ θ_V)` for one head.
#[derive(Clone, Debug)]
pub struct HeadKernel {
    pub(crate) weight: f64,
    pub(crate) a: Vec<f64>,
    pub(crate) u: Vec<f64>,
}

impl HeadKernel {
    pub fn new(theta: &HeadParams, weight: f64, beta: f64) -> Self {
        Self {
            weight,
            a: theta.interaction(beta),
            u: theta.value_output(),
        }
    }
}

/// All heads of one layer, ready to act on a token cloud.
#[derive(Clone, Debug)]
pub struct LayerKernel {
    d: usize,
    heads: Vec<HeadKernel>,
}

/// Softmax rows of one head over a token cloud.
struct Softmax {
    n: usize,
    d: usize,
    z: Vec<f64>,
    /// `probs[j*n + l]` = weight of token l in the attention of query j.
    probs: Vec<f64>,
    /// `scaled[j*n + l] = e^{⟨z_j, x_l⟩ − shift_j} / shifted_sum_j`, without token weight.
    scaled: Vec<f64>,
    gamma: Vec<f64>,
}

impl Softmax {
    fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            z: vec![0.0; n * d],
            probs: vec![0.0; n * n],
            scaled: vec![0.0; n * n],
            gamma: vec![0.0; n * d],
        }
    }

    fn compute(&mut self, a: &[f64], states: &[f64], weights: &[f64], with_scaled: bool) {
        let (n, d) = (self.n, self.d);
        for j in 0..n {
            let zj = &mut self.z[j * d..(j + 1) * d];
            mat_vec(a, d, d, &states[j * d..(j + 1) * d], zj);
        }
        for j in 0..n {
            let zj = &self.z[j * d..(j + 1) * d];
            let row = &mut self.probs[j * n..(j + 1) * n];
            let mut m = f64::NEG_INFINITY;
            for l in 0..n {
                let v = dot(zj, &states[l * d..(l + 1) * d]);
                row[l] = v;
                if weights[l] > 0.0 && v > m {
                    m = v;
                }
            }
            let mut s = 0.0;
            for l in 0..n {
                let e = (row[l] - m).exp();
                row[l] = e;
                s += weights[l] * e;
            }
            let srow = &mut self.scaled[j * n..(j + 1) * n];
            for l in 0..n {
                let c = row[l] / s;
                if with_scaled {
                    srow[l] = c;
                }
                row[l] = weights[l] * row[l] / s;
            }
            let gj = &mut self.gamma[j * d..(j + 1) * d];
            gj.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..n {
                let p = row[l];
                let xl = &states[l * d..(l + 1) * d];
                for i in 0..d {
                    gj[i] += p * xl[i];
                }
            }
        }
    }

    /// `J_j q` for the tilted covariance at query j.
    fn cov_apply(&self, states: &[f64], j: usize, q: &[f64], out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        let gj = &self.gamma[j * d..(j + 1) * d];
        out.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..n {
            let p = self.probs[j * n + l];
            if p == 0.0 {
                continue;
            }
            let xl = &states[l * d..(l + 1) * d];
            let mut s = 0.0;
            for i in 0..d {
                s += (xl[i] - gj[i]) * q[i];
            }
            let ps = p * s;
            for i in 0..d {
                out[i] += ps * (xl[i] - gj[i]);
            }
        }
    }
}

impl LayerKernel {
    pub fn new(cloud: &HeadCloud, beta: f64) -> Self {
        Self {
            d: cloud.d(),
            heads: cloud.iter().map(|(h, w)| HeadKernel::new(h, w, beta)).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// `out_i = Γ(x_i, m, ν)` for every token of the cloud `m = Σ w_l δ_{x_l}`.
    pub fn velocity(&self, states: &[f64], weights: &[f64], out: &mut [f64]) {
        let d = self.d;
        let n = weights.len();
        debug_assert_eq!(states.len(), n * d);
        let mut sm = Softmax::new(n, d);
        tree_sum(self.heads.len(), out, &mut |h, buf| {
            let k = &self.heads[h];
            sm.compute(&k.a, states, weights, false);
            for j in 0..n {
                let o = &mut buf[j * d..(j + 1) * d];
                mat_vec(&k.u, d, d, &sm.gamma[j * d..(j + 1) * d], o);
                o.iter_mut().for_each(|v| *v *= k.weight);
            }
        });
    }

    /// `out_i = 𝒦(x_i, ρ, ν, p_i)` with `ρ = Σ w_l δ_{(x_l, p_l)}`.
    pub fn adjoint_drift(&self, states: &[f64], weights: &[f64], costates: &[f64], out: &mut [f64]) {
        let d = self.d;
        let n = weights.len();
        debug_assert_eq!(states.len(), n * d);
        debug_assert_eq!(costates.len(), n * d);
        let mut sm = Softmax::new(n, d);
        let mut q = vec![0.0; n * d];
        let mut jq = vec![0.0; d];
        let mut t = vec![0.0; d];
        tree_sum(self.heads.len(), out, &mut |h, buf| {
            let k = &self.heads[h];
            sm.compute(&k.a, states, weights, true);
            for j in 0..n {
                mat_t_vec(&k.u, d, d, &costates[j * d..(j + 1) * d], &mut q[j * d..(j + 1) * d]);
            }
            for i in 0..n {
                let xi = &states[i * d..(i + 1) * d];
                sm.cov_apply(states, i, &q[i * d..(i + 1) * d], &mut jq);
                mat_t_vec(&k.a, d, d, &jq, &mut t);
                for j in 0..n {
                    let c = weights[j] * sm.scaled[j * n + i];
                    if c == 0.0 {
                        continue;
                    }
                    let zj = &sm.z[j * d..(j + 1) * d];
                    let gj = &sm.gamma[j * d..(j + 1) * d];
                    let qj = &q[j * d..(j + 1) * d];
                    let mut s = 0.0;
                    for l in 0..d {
                        s += (xi[l] - gj[l]) * qj[l];
                    }
                    for l in 0..d {
                        t[l] += c * (zj[l] * s + qj[l]);
                    }
                }
                let o = &mut buf[i * d..(i + 1) * d];
                for l in 0..d {
                    o[l] = k.weight * t[l];
                }
            }
        });
    }
}

/// Accumulates `scale · Σ_i w_i ∇_θ ⟨p_i, θ_Oᵀθ_V γ(β θ_Kᵀθ_Q x_i, m)⟩` over a
/// token cloud into `out`.
pub fn accumulate_layer_gradient(
    theta: &HeadParams,
    beta: f64,
    states: &[f64],
    weights: &[f64],
    costates: &[f64],
    scale: f64,
    out: &mut HeadParams,
) {
    let d = theta.d();
    let n = weights.len();
    let a_mat = theta.interaction(beta);
    let u_mat = theta.value_output();
    let mut sm = Softmax::new(n, d);
    sm.compute(&a_mat, states, weights, false);
    let mut scratch = GradScratch::new(theta.k(), d);
    let mut q = vec![0.0; d];
    let mut jq = vec![0.0; d];
    for i in 0..n {
        let p = &costates[i * d..(i + 1) * d];
        mat_t_vec(&u_mat, d, d, p, &mut q);
        sm.cov_apply(states, i, &q, &mut jq);
        scratch.accumulate(
            theta,
            beta,
            &states[i * d..(i + 1) * d],
            p,
            &sm.gamma[i * d..(i + 1) * d],
            &jq,
            scale * weights[i],
            out,
        );
    }
}

struct GradScratch {
    k: usize,
    d: usize,
    vg: Vec<f64>,
    oa: Vec<f64>,
    qx: Vec<f64>,
    kw: Vec<f64>,
}

impl GradScratch {
    fn new(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            vg: vec![0.0; k],
            oa: vec![0.0; k],
            qx: vec![0.0; k],
            kw: vec![0.0; k],
        }
    }

    /// Adds `s ·` the head gradient at one token, given `g = γ(Ax, m)` and
    /// `w = D_zγ · Uᵀ a`.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(&mut self, theta: &HeadParams, beta: f64, x: &[f64], a: &[f64], g: &[f64], w: &[f64], s: f64, out: &mut HeadParams) {
        let (k, d) = (self.k, self.d);
        mat_vec(theta.v(), k, d, g, &mut self.vg);
        mat_vec(theta.o(), k, d, a, &mut self.oa);
        mat_vec(theta.q(), k, d, x, &mut self.qx);
        mat_vec(theta.key(), k, d, w, &mut self.kw);
        let rank1 = |blk: &mut [f64], left: &[f64], right: &[f64], c: f64| {
            for r in 0..k {
                let lr = c * left[r];
                if lr == 0.0 {
                    continue;
                }
                let row = &mut blk[r * d..(r + 1) * d];
                for j in 0..d {
                    row[j] += lr * right[j];
                }
            }
        };
        rank1(out.block_mut(Block::Output), &self.vg, a, s);
        rank1(out.block_mut(Block::Value), &self.oa, g, s);
        rank1(out.block_mut(Block::Key), &self.qx, w, s * beta);
        rank1(out.block_mut(Block::Query), &self.kw, x, s * beta);
    }
}
