//! Depth-L, H-head residual attention model and its exact adjoint.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{accumulate_layer_gradient, LayerKernel};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::measure::{validate_weights, EmpiricalMeasure};
use crate::optim::{adamw_step_in_place, OptConfig, OptState};
use crate::params::{HeadCloud, HeadParams};

/// Terminal loss on the token cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// `ℓ(µ) = ½ ∫ ‖y − c*‖² dµ(y)`.
    GlobalQuadratic { target: Vec<f64> },
    /// Tokens carry frozen labels `c`; `ℓ(µ) = ½ ∫ ‖x − c‖² dµ(x, c)`.
    LabelQuadratic,
}

impl LossSpec {
    pub fn needs_labels(&self) -> bool {
        matches!(self, LossSpec::LabelQuadratic)
    }
}

/// One token cloud: `N` states in ℝ^d with probability weights and, for the
/// labelled loss, one label per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub d: usize,
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
    pub labels: Option<Vec<f64>>,
}

impl Sample {
    pub fn new(d: usize, states: Vec<f64>, weights: Vec<f64>, labels: Option<Vec<f64>>) -> Result<Self> {
        if d == 0 || weights.is_empty() {
            return Err(Error::InvalidInput("sample needs d > 0 and at least one token".into()));
        }
        check_dim("sample states", weights.len() * d, states.len())?;
        check_finite("sample states", &states)?;
        validate_weights(&weights)?;
        if let Some(l) = &labels {
            check_dim("sample labels", states.len(), l.len())?;
            check_finite("sample labels", l)?;
        }
        Ok(Self { d, states, weights, labels })
    }

    pub fn uniform(d: usize, states: Vec<f64>, labels: Option<Vec<f64>>) -> Result<Self> {
        let n = if d == 0 { 0 } else { states.len() / d };
        Self::new(d, states, vec![1.0 / n.max(1) as f64; n], labels)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn measure(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::new(self.d, self.states.clone(), self.weights.clone())
    }
}

/// States `x_0..x_L` and costates `a_0..a_L` of one sample, each stored as a
/// flat `N × d` buffer. `adjoints` is empty after a forward-only pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub d: usize,
    pub weights: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub adjoints: Vec<Vec<f64>>,
    pub labels: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_states(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn has_adjoints(&self) -> bool {
        !self.adjoints.is_empty()
    }

    pub fn state_measure(&self, r: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::new(self.d, self.states[r].clone(), self.weights.clone())
    }

    /// Largest token norm over all layers.
    pub fn max_state_norm(&self) -> f64 {
        max_row_norm(&self.states, self.d)
    }

    pub fn max_adjoint_norm(&self) -> f64 {
        max_row_norm(&self.adjoints, self.d)
    }
}

fn max_row_norm(bufs: &[Vec<f64>], d: usize) -> f64 {
    bufs.iter()
        .flat_map(|b| b.chunks_exact(d))
        .map(crate::linalg::norm)
        .fold(0.0, f64::max)
}

/// `∂_µ ℓ(µ)(y)`. For the labelled loss `point` is the pair `(x, c)` and the
/// result has zero label component.
pub fn loss_grad_measure(loss: &LossSpec, mu_final: &EmpiricalMeasure, point: &[f64]) -> Result<Vec<f64>> {
    match loss {
        LossSpec::GlobalQuadratic { target } => {
            check_dim("loss point", mu_final.dim(), point.len())?;
            check_dim("loss target", point.len(), target.len())?;
            Ok(point.iter().zip(target).map(|(y, c)| y - c).collect())
        }
        LossSpec::LabelQuadratic => {
            check_dim("labelled loss point", mu_final.dim(), point.len())?;
            if point.len() % 2 != 0 {
                return Err(Error::InvalidInput("labelled loss expects (x, c) pairs".into()));
            }
            let d = point.len() / 2;
            let mut g: Vec<f64> = (0..d).map(|i| point[i] - point[d + i]).collect();
            g.extend(std::iter::repeat(0.0).take(d));
            Ok(g)
        }
    }
}

fn targets<'a>(loss: &'a LossSpec, labels: Option<&'a [f64]>, i: usize, d: usize) -> Result<&'a [f64]> {
    match loss {
        LossSpec::GlobalQuadratic { target } => {
            check_dim("loss target", d, target.len())?;
            Ok(target)
        }
        LossSpec::LabelQuadratic => labels
            .map(|l| &l[i * d..(i + 1) * d])
            .ok_or_else(|| Error::InvalidInput("labelled loss on a sample without labels".into())),
    }
}

/// Loss of a final token cloud.
pub fn loss_value(loss: &LossSpec, final_states: &[f64], weights: &[f64], labels: Option<&[f64]>, d: usize) -> Result<f64> {
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let c = targets(loss, labels, i, d)?;
        total += 0.5 * w * crate::linalg::dist_sq(&final_states[i * d..(i + 1) * d], c);
    }
    Ok(total)
}

/// Terminal costates `a_L^i = ∂_µ ℓ(m_L)(x_L^i)` restricted to the state channel.
pub fn terminal_costate(loss: &LossSpec, final_states: &[f64], weights: &[f64], labels: Option<&[f64]>, d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(final_states.len());
    for i in 0..weights.len() {
        let c = targets(loss, labels, i, d)?;
        out.extend(final_states[i * d..(i + 1) * d].iter().zip(c).map(|(x, c)| x - c));
    }
    Ok(out)
}

/// Forward Euler with step `1/len(kernels)`.
pub(crate) fn integrate_states(kernels: &[LayerKernel], sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let h = 1.0 / kernels.len() as f64;
    let mut states = Vec::with_capacity(kernels.len() + 1);
    states.push(sample.states.clone());
    let mut v = vec![0.0; sample.states.len()];
    for k in kernels {
        let x = states.last().expect("nonempty");
        k.velocity(x, &sample.weights, &mut v);
        let next: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x + h * v).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup(format!("state overflow after layer {}", states.len())));
        }
        states.push(next);
    }
    Ok(states)
}

/// Backward sweep `a_r = a_{r+1} + (1/L) 𝒦(x_r, (x_r, a_{r+1}), ν_r, a_{r+1})`.
pub(crate) fn integrate_costates(kernels: &[LayerKernel], states: &[Vec<f64>], weights: &[f64], terminal: Vec<f64>) -> Result<Vec<Vec<f64>>> {
    let l = kernels.len();
    let h = 1.0 / l as f64;
    let mut adj = vec![Vec::new(); l + 1];
    adj[l] = terminal;
    let mut drift = vec![0.0; adj[l].len()];
    for r in (0..l).rev() {
        kernels[r].adjoint_drift(&states[r], weights, &adj[r + 1], &mut drift);
        let next: Vec<f64> = adj[r + 1].iter().zip(&drift).map(|(a, k)| a + h * k).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup(format!("costate overflow at layer {r}")));
        }
        adj[r] = next;
    }
    Ok(adj)
}

/// Forward pass, plus the backward pass when a loss is given, on the depth
/// grid defined by `kernels`.
pub fn run_trajectory(kernels: &[LayerKernel], sample: &Sample, loss: Option<&LossSpec>) -> Result<Trajectory> {
    let states = integrate_states(kernels, sample)?;
    let adjoints = match loss {
        None => Vec::new(),
        Some(loss) => {
            let term = terminal_costate(
                loss,
                states.last().expect("nonempty"),
                &sample.weights,
                sample.labels.as_deref(),
                sample.d,
            )?;
            integrate_costates(kernels, &states, &sample.weights, term)?
        }
    };
    Ok(Trajectory {
        d: sample.d,
        weights: sample.weights.clone(),
        states,
        adjoints,
        labels: sample.labels.clone(),
    })
}

/// `(1/B) Σ_b Σ_i w_i ∇_θ ⟨a_{r+1}^{b,i}, θ_Oᵀθ_V γ(β θ_Kᵀθ_Q x_r^{b,i}, m_r^b)⟩`.
/// For the discrete model this equals `L·H` times the gradient of the batch
/// mean loss with respect to head θ at layer r.
pub fn batch_gradient(trajs: &[Trajectory], r: usize, theta: &HeadParams, beta: f64) -> Result<HeadParams> {
    if trajs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = HeadParams::zeros(theta.k(), theta.d());
    let scale = 1.0 / trajs.len() as f64;
    for t in trajs {
        if !t.has_adjoints() {
            return Err(Error::InvalidInput("trajectory lacks costates".into()));
        }
        if r >= t.steps() {
            return Err(Error::Grid(format!("layer {r} beyond trajectory depth {}", t.steps())));
        }
        check_dim("trajectory dimension", theta.d(), t.d)?;
        accumulate_layer_gradient(theta, beta, &t.states[r], &t.weights, &t.adjoints[r + 1], scale, &mut g);
    }
    Ok(g)
}

/// Draws `H` heads per layer independently from the atoms of `pi`.
pub fn init_params<R: Rng + ?Sized>(pi: &HeadCloud, layers: usize, heads: usize, rng: &mut R) -> Result<Vec<HeadCloud>> {
    if layers == 0 || heads == 0 {
        return Err(Error::InvalidInput("need at least one layer and one head".into()));
    }
    let dist = WeightedIndex::new(pi.weights()).map_err(|e| Error::InvalidInput(format!("initial head law: {e}")))?;
    (0..layers)
        .map(|_| {
            let hs = (0..heads).map(|_| pi.heads()[rng.sample(&dist)].clone()).collect();
            HeadCloud::uniform(hs)
        })
        .collect()
}

pub(crate) fn check_parts(layers: &[HeadCloud], opt: &[Vec<OptState>]) -> Result<()> {
    check_dim("optimizer layers", layers.len(), opt.len())?;
    for (cloud, states) in layers.iter().zip(opt) {
        let (k, d) = (cloud.k(), cloud.d());
        let heads = cloud
            .heads()
            .iter()
            .map(|h| HeadParams::from_flat(k, d, h.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        HeadCloud::new(heads, cloud.weights().to_vec())?;
        check_dim("optimizer heads", cloud.len(), states.len())?;
        for st in states {
            HeadParams::from_flat(k, d, st.m.as_slice().to_vec())?;
            HeadParams::from_flat(k, d, st.v.as_slice().to_vec())?;
        }
    }
    Ok(())
}

/// Discrete model: one head cloud per layer plus per-head optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub beta: f64,
    layers: Vec<HeadCloud>,
    opt: Vec<Vec<OptState>>,
}

impl DiscreteModel {
    pub fn new(layers: Vec<HeadCloud>, beta: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("model has no layers".into()));
        }
        let (k, d) = (layers[0].k(), layers[0].d());
        if layers.iter().any(|c| c.k() != k || c.d() != d) {
            return Err(Error::InvalidInput("all layers must share (k, d)".into()));
        }
        if !beta.is_finite() {
            return Err(Error::InvalidInput("beta must be finite".into()));
        }
        let opt = layers
            .iter()
            .map(|c| (0..c.len()).map(|_| OptState::new(k, d)).collect())
            .collect();
        Ok(Self { beta, layers, opt })
    }

    pub fn from_pi<R: Rng + ?Sized>(pi: &HeadCloud, layers: usize, heads: usize, beta: f64, rng: &mut R) -> Result<Self> {
        Self::new(init_params(pi, layers, heads, rng)?, beta)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d(&self) -> usize {
        self.layers[0].d()
    }

    pub fn k(&self) -> usize {
        self.layers[0].k()
    }

    pub fn layers(&self) -> &[HeadCloud] {
        &self.layers
    }

    pub fn layer(&self, r: usize) -> &HeadCloud {
        &self.layers[r]
    }

    pub fn layer_mut(&mut self, r: usize) -> &mut HeadCloud {
        &mut self.layers[r]
    }

    pub fn opt_states(&self) -> &[Vec<OptState>] {
        &self.opt
    }

    /// Reassembles a model with existing optimizer state, rechecking every
    /// shape that a deserialized value could violate.
    pub fn from_parts(beta: f64, layers: Vec<HeadCloud>, opt: Vec<Vec<OptState>>) -> Result<Self> {
        let model = Self::new(layers, beta)?;
        check_parts(&model.layers, &opt)?;
        Ok(Self { opt, ..model })
    }

    pub fn kernels(&self) -> Vec<LayerKernel> {
        self.layers.iter().map(|c| LayerKernel::new(c, self.beta)).collect()
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        check_dim("sample dimension", self.d(), sample.d)
    }

    pub fn forward(&self, sample: &Sample) -> Result<Trajectory> {
        self.check_sample(sample)?;
        run_trajectory(&self.kernels(), sample, None)
    }

    pub fn forward_backward(&self, sample: &Sample, loss: &LossSpec) -> Result<Trajectory> {
        self.check_sample(sample)?;
        run_trajectory(&self.kernels(), sample, Some(loss))
    }

    pub fn loss(&self, sample: &Sample, loss: &LossSpec) -> Result<f64> {
        let t = self.forward(sample)?;
        loss_value(loss, t.final_states(), &t.weights, t.labels.as_deref(), t.d)
    }

    /// Mean loss over a batch.
    pub fn batch_loss(&self, batch: &[Sample], loss: &LossSpec) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut s = 0.0;
        for b in batch {
            s += self.loss(b, loss)?;
        }
        Ok(s / batch.len() as f64)
    }

    pub fn trajectories(&self, batch: &[Sample], loss: &LossSpec) -> Result<Vec<Trajectory>> {
        let kernels = self.kernels();
        batch
            .iter()
            .map(|s| {
                self.check_sample(s)?;
                run_trajectory(&kernels, s, Some(loss))
            })
            .collect()
    }

    /// One optimizer step on every head; returns the trajectories the
    /// gradients were computed from.
    pub fn train_step(&mut self, batch: &[Sample], loss: &LossSpec, opt: &OptConfig) -> Result<Vec<Trajectory>> {
        let trajs = self.trajectories(batch, loss)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (r, cloud) in self.layers.iter().enumerate() {
            let g: Result<Vec<HeadParams>> = cloud.heads().iter().map(|h| batch_gradient(&trajs, r, h, self.beta)).collect();
            grads.push(g?);
        }
        for (r, gs) in grads.iter().enumerate() {
            let heads = self.layers[r].heads_mut();
            for (h, g) in gs.iter().enumerate() {
                adamw_step_in_place(&mut heads[h], &mut self.opt[r][h], g, opt)?;
            }
        }
        Ok(trajs)
    }
}
