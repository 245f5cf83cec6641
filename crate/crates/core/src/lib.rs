//! Mean-field limit laboratory for depth-scaled, unmasked, attention-only
//! transformers trained with AdamW or Blockwise AdamW.
//!
//! The discrete model is an interacting particle system over `N` tokens with
//! `L` residual layers of `H` heads. As `L, H → ∞` it approaches a
//! continuous-depth mean-field ODE whose velocity integrates over a law of
//! heads; [`mean_field`] realizes that limit on a fine depth grid with exact
//! integration over a finitely supported initial head law.

pub mod attention;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod discrete;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mean_field;
pub mod measure;
pub mod optim;
pub mod params;
pub mod report;
pub mod seed;
pub mod stats;
pub mod transport;
pub mod verify;

pub use attention::{
    adjoint_drift, attention_gamma, gamma_mu_derivative, gamma_z_jacobian, hamiltonian_grad_x, head_gradient,
    mha_velocity, project_ball, AttentionOutput, LayerKernel,
};
pub use bounds::{check_run, compute_bounds, Bound, BoundInputs, BoundReport, BoundSet, RunRecord};
pub use discrete::{batch_gradient, init_params, loss_grad_measure, DiscreteModel, LossSpec, Sample, Trajectory};
pub use error::{Error, Result};
pub use mean_field::{hat_nu_from, mean_field_gradient, FineTrajectory, HatNu, MeanFieldHistory, MeanFieldParams};
pub use measure::EmpiricalMeasure;
pub use optim::{adamw_step, kappa_constants, r_map, KappaTable, OptConfig, OptState, RMode, StepSchedule};
pub use params::{Block, HeadCloud, HeadParams};
pub use transport::{coupled_distance, wasserstein, Order};
