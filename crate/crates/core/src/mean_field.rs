//! Continuous-depth, infinite-width reference model discretized on a fine
//! depth grid of `L_ref` cells.

use serde::{Deserialize, Serialize};

use crate::attention::{accumulate_layer_gradient, LayerKernel};
use crate::discrete::{batch_gradient, check_parts, run_trajectory, DiscreteModel, LossSpec, Sample, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::optim::{adamw_step_in_place, OptConfig, OptState};
use crate::params::{HeadCloud, HeadParams};
use crate::transport::cloud_w2_sq;

/// Trajectory on the fine grid: `L_ref + 1` states and costates.
pub type FineTrajectory = Trajectory;

/// Head laws `ν_s`, `s = 0..L_ref`, each stored as a weighted cloud whose
/// atoms move under AdamW with their own optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldParams {
    pub beta: f64,
    clouds: Vec<HeadCloud>,
    opt: Vec<Vec<OptState>>,
}

impl MeanFieldParams {
    /// `ν_s = π` at every depth.
    pub fn from_pi(pi: &HeadCloud, l_ref: usize, beta: f64) -> Result<Self> {
        if l_ref == 0 {
            return Err(Error::Grid("L_ref must be positive".into()));
        }
        Self::from_clouds(vec![pi.clone(); l_ref], beta)
    }

    pub fn from_clouds(clouds: Vec<HeadCloud>, beta: f64) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::Grid("no depth cells".into()));
        }
        let (k, d) = (clouds[0].k(), clouds[0].d());
        if clouds.iter().any(|c| c.k() != k || c.d() != d) {
            return Err(Error::InvalidInput("all depth cells must share (k, d)".into()));
        }
        let opt = clouds
            .iter()
            .map(|c| (0..c.len()).map(|_| OptState::new(k, d)).collect())
            .collect();
        Ok(Self { beta, clouds, opt })
    }

    /// Reassembles a grid of clouds with existing per-atom optimizer state.
    pub fn from_parts(beta: f64, clouds: Vec<HeadCloud>, opt: Vec<Vec<OptState>>) -> Result<Self> {
        let mf = Self::from_clouds(clouds, beta)?;
        check_parts(&mf.clouds, &opt)?;
        Ok(Self { opt, ..mf })
    }

    pub fn opt_states(&self) -> &[Vec<OptState>] {
        &self.opt
    }

    pub fn l_ref(&self) -> usize {
        self.clouds.len()
    }

    pub fn d(&self) -> usize {
        self.clouds[0].d()
    }

    pub fn clouds(&self) -> &[HeadCloud] {
        &self.clouds
    }

    pub fn cloud(&self, s: usize) -> &HeadCloud {
        &self.clouds[s]
    }

    pub fn kernels(&self) -> Vec<LayerKernel> {
        self.clouds.iter().map(|c| LayerKernel::new(c, self.beta)).collect()
    }

    pub fn integrate_forward(&self, sample: &Sample) -> Result<FineTrajectory> {
        check_dim("sample dimension", self.d(), sample.d)?;
        run_trajectory(&self.kernels(), sample, None)
    }

    pub fn integrate_forward_backward(&self, sample: &Sample, loss: &LossSpec) -> Result<FineTrajectory> {
        check_dim("sample dimension", self.d(), sample.d)?;
        run_trajectory(&self.kernels(), sample, Some(loss))
    }

    /// Fills in the costates of a forward-only fine trajectory.
    pub fn integrate_backward(&self, forward: &FineTrajectory, loss: &LossSpec) -> Result<FineTrajectory> {
        if forward.steps() != self.l_ref() {
            return Err(Error::Grid(format!(
                "trajectory has {} steps, grid has {}",
                forward.steps(),
                self.l_ref()
            )));
        }
        let kernels = self.kernels();
        let term = crate::discrete::terminal_costate(
            loss,
            forward.final_states(),
            &forward.weights,
            forward.labels.as_deref(),
            forward.d,
        )?;
        let adjoints = crate::discrete::integrate_costates(&kernels, &forward.states, &forward.weights, term)?;
        Ok(Trajectory {
            adjoints,
            ..forward.clone()
        })
    }

    pub fn trajectories(&self, batch: &[Sample], loss: &LossSpec) -> Result<Vec<FineTrajectory>> {
        let kernels = self.kernels();
        batch
            .iter()
            .map(|s| {
                check_dim("sample dimension", self.d(), s.d)?;
                run_trajectory(&kernels, s, Some(loss))
            })
            .collect()
    }

    /// One AdamW step on every atom at every depth cell. Returns the fine
    /// trajectories the gradients were taken along.
    pub fn train_step(&mut self, batch: &[Sample], loss: &LossSpec, opt: &OptConfig) -> Result<Vec<FineTrajectory>> {
        let trajs = self.trajectories(batch, loss)?;
        let mut grads = Vec::with_capacity(self.clouds.len());
        for (s, cloud) in self.clouds.iter().enumerate() {
            let g: Result<Vec<HeadParams>> = cloud
                .heads()
                .iter()
                .map(|h| mean_field_gradient(&trajs, s, h, self.beta))
                .collect();
            grads.push(g?);
        }
        for (s, gs) in grads.iter().enumerate() {
            let heads = self.clouds[s].heads_mut();
            for (h, g) in gs.iter().enumerate() {
                adamw_step_in_place(&mut heads[h], &mut self.opt[s][h], g, opt)?;
            }
        }
        Ok(trajs)
    }
}

/// Mean-field gradient `∇_θ (δℓ/δν_s)` averaged over the batch, evaluated at
/// an arbitrary θ along fine trajectories at cell `s`.
pub fn mean_field_gradient(trajs: &[FineTrajectory], s: usize, theta: &HeadParams, beta: f64) -> Result<HeadParams> {
    batch_gradient(trajs, s, theta, beta)
}

/// Fine trajectories of every training step of a mean-field run; step `j`
/// holds the batch trajectories under `ν(j)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldHistory {
    pub steps: Vec<Vec<FineTrajectory>>,
}

impl MeanFieldHistory {
    pub fn push(&mut self, trajs: Vec<FineTrajectory>) {
        self.steps.push(trajs);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Maps discrete layer `r` of `L` to fine cell `r · L_ref / L`.
pub fn grid_stride(l: usize, l_ref: usize) -> Result<usize> {
    if l == 0 || l_ref % l != 0 {
        return Err(Error::Grid(format!("L = {l} does not divide L_ref = {l_ref}")));
    }
    Ok(l_ref / l)
}

/// The discrete initial heads, each transported by AdamW along the
/// mean-field gradient field: the synchronous coupling against which the
/// trained discrete heads are compared.
#[derive(Clone, Debug, PartialEq)]
pub struct HatNu {
    pub beta: f64,
    stride: usize,
    layers: Vec<HeadCloud>,
    opt: Vec<Vec<OptState>>,
    steps: usize,
}

impl HatNu {
    pub fn new(discrete_init: &DiscreteModel, l_ref: usize) -> Result<Self> {
        let l = discrete_init.num_layers();
        let stride = grid_stride(l, l_ref)?;
        let (k, d) = (discrete_init.k(), discrete_init.d());
        let layers = discrete_init.layers().to_vec();
        let opt = layers
            .iter()
            .map(|c| (0..c.len()).map(|_| OptState::new(k, d)).collect())
            .collect();
        Ok(Self {
            beta: discrete_init.beta,
            stride,
            layers,
            opt,
            steps: 0,
        })
    }

    pub fn layers(&self) -> &[HeadCloud] {
        &self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advances by one step using the mean-field trajectories of that step.
    pub fn advance(&mut self, fine: &[FineTrajectory], opt: &OptConfig) -> Result<()> {
        if fine.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for t in fine {
            if t.steps() != self.stride * self.layers.len() {
                return Err(Error::Grid(format!(
                    "history trajectory has {} cells, expected {}",
                    t.steps(),
                    self.stride * self.layers.len()
                )));
            }
            if !t.has_adjoints() {
                return Err(Error::MissingHistory("history trajectory lacks costates".into()));
            }
        }
        let scale = 1.0 / fine.len() as f64;
        for r in 0..self.layers.len() {
            let s = r * self.stride;
            let heads = self.layers[r].heads_mut();
            for (h, theta) in heads.iter_mut().enumerate() {
                let mut g = HeadParams::zeros(theta.k(), theta.d());
                for t in fine {
                    accumulate_layer_gradient(theta, self.beta, &t.states[s], &t.weights, &t.adjoints[s + 1], scale, &mut g);
                }
                adamw_step_in_place(theta, &mut self.opt[r][h], &g, opt)?;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// `ν̂(τ)` from the retained history of the first `tau` mean-field steps.
pub fn hat_nu_from(discrete_init: &DiscreteModel, history: &MeanFieldHistory, l_ref: usize, opt: &OptConfig, tau: usize) -> Result<Vec<HeadCloud>> {
    if tau > history.len() {
        return Err(Error::MissingHistory(format!(
            "requested step {tau} but only {} steps were recorded",
            history.len()
        )));
    }
    let mut hat = HatNu::new(discrete_init, l_ref)?;
    for step in &history.steps[..tau] {
        hat.advance(step, opt)?;
    }
    Ok(hat.layers)
}

/// Largest `W₂(ν_s, ν_{s+1}) / Δt` over adjacent cells of the grid. Reported
/// as a diagnostic of time regularity; it is zero until training moves atoms.
pub fn time_lipschitz(mf: &MeanFieldParams) -> Result<f64> {
    let dt = 1.0 / mf.l_ref() as f64;
    let mut worst = 0.0f64;
    for w in mf.clouds().windows(2) {
        worst = worst.max(cloud_w2_sq(&w[0], &w[1])?.sqrt() / dt);
    }
    Ok(worst)
}
