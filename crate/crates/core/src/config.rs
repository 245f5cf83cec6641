//! TOML experiment configuration with defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discrete::LossSpec;
use crate::error::{Error, Result};
use crate::harness::{probe_set, SweepConfig};
use crate::optim::{r_map, OptConfig, RMode, StepSchedule};
use crate::params::{HeadCloud, HeadParams};
use crate::seed::{rng_for, xavier_head, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub k: usize,
    pub tokens: usize,
    pub beta: f64,
    /// Radius of the ball initial tokens (and labels) are drawn from.
    pub r0: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 4,
            k: 2,
            tokens: 4,
            beta: 1.0,
            r0: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub eta: StepSchedule,
    pub mode: RMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            lambda: 0.5,
            eta: StepSchedule::Constant(0.05),
            mode: RMode::Blockwise,
        }
    }
}

impl OptimizerConfig {
    pub fn to_opt(&self) -> OptConfig {
        OptConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lambda: self.lambda,
            eta: self.eta.clone(),
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    GlobalQuadratic,
    LabelQuadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Target `c*` of the global loss; defaults to `0.5·e₁`.
    pub target: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::GlobalQuadratic,
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiConfig {
    /// Number of Xavier-uniform atoms when no explicit atoms are given.
    pub atoms: usize,
    /// Explicit atoms, each a flat `[Q | K | V | O]` buffer of length `4kd`.
    pub explicit: Option<Vec<Vec<f64>>>,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            atoms: 8,
            explicit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub l_grid: Vec<usize>,
    pub h_grid: Vec<usize>,
    pub seeds: usize,
    pub probes: usize,
    pub steps: usize,
    pub batch: usize,
    pub l_ref: usize,
    pub time_budget_secs: Option<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            l_grid: vec![8, 16, 32, 64],
            h_grid: vec![4, 8, 16, 32, 64],
            seeds: 32,
            probes: 16,
            steps: 3,
            batch: 2,
            l_ref: 1024,
            time_budget_secs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub batch: usize,
    pub step: f64,
    pub seeds: usize,
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            tokens: 3,
            batch: 1,
            step: 1e-5,
            seeds: 10,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    /// Random instances per inequality.
    pub instances: usize,
    /// Training steps of the invariant-set runs.
    pub train_steps: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            instances: 10_000,
            train_steps: 50,
            layers: 4,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub pi: PiConfig,
    pub sweep: SweepSettings,
    pub grad_check: GradCheckSettings,
    pub verify: VerifySettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss.kind {
            LossKind::GlobalQuadratic => LossSpec::GlobalQuadratic {
                target: self.loss.target.clone().unwrap_or_else(|| {
                    let mut t = vec![0.0; self.model.d];
                    t[0] = 0.5;
                    t
                }),
            },
            LossKind::LabelQuadratic => LossSpec::LabelQuadratic,
        }
    }

    pub fn opt(&self) -> OptConfig {
        self.optimizer.to_opt()
    }

    /// Initial head law: explicit atoms, or Xavier-uniform atoms shrunk into
    /// the support set `‖R(v)‖_∞ ≤ 1/λ`.
    pub fn pi(&self) -> Result<HeadCloud> {
        let (k, d) = (self.model.k, self.model.d);
        let heads = match &self.pi.explicit {
            Some(atoms) => atoms
                .iter()
                .map(|a| HeadParams::from_flat(k, d, a.clone()))
                .collect::<Result<Vec<_>>>()?,
            None => {
                let mut rng = rng_for(self.master_seed, Stream::Pi, &[]);
                let cap = 1.0 / self.optimizer.lambda;
                (0..self.pi.atoms)
                    .map(|_| {
                        let h = xavier_head(&mut rng, k, d);
                        let s = r_map(&h, self.optimizer.mode).max_abs();
                        if s > cap {
                            h.scaled(cap / s)
                        } else {
                            h
                        }
                    })
                    .collect()
            }
        };
        HeadCloud::uniform(heads)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.k == 0 || m.tokens == 0 {
            return Err(Error::Config("model.d, model.k and model.tokens must be positive".into()));
        }
        if !(m.beta > 0.0) || !m.beta.is_finite() {
            return Err(Error::Config(format!("model.beta = {} must be positive", m.beta)));
        }
        if !(m.r0 > 0.0) || !m.r0.is_finite() {
            return Err(Error::Config(format!("model.r0 = {} must be positive", m.r0)));
        }
        self.opt().validate()?;
        if let Some(t) = &self.loss.target {
            if t.len() != m.d {
                return Err(Error::Config(format!("loss.target has length {}, expected d = {}", t.len(), m.d)));
            }
        }
        if self.pi.explicit.is_none() && self.pi.atoms == 0 {
            return Err(Error::Config("pi.atoms must be positive".into()));
        }
        let pi = self.pi()?;
        let cap = 1.0 / self.optimizer.lambda;
        for (i, h) in pi.heads().iter().enumerate() {
            let s = r_map(h, self.optimizer.mode).max_abs();
            if s > cap * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "pi atom {i} has ||R(v)||_inf = {s} > 1/lambda = {cap}; the initial head law must be supported in {{||R(v)||_inf <= 1/lambda}}"
                )));
            }
        }
        let s = &self.sweep;
        if s.seeds == 0 || s.probes == 0 || s.batch == 0 {
            return Err(Error::Config("sweep.seeds, sweep.probes and sweep.batch must be positive".into()));
        }
        for &l in &s.l_grid {
            if l == 0 || s.l_ref % l != 0 {
                return Err(Error::Config(format!(
                    "sweep.l_ref = {} is not a multiple of grid depth L = {l}",
                    s.l_ref
                )));
            }
        }
        let g = &self.grad_check;
        if !(g.step > 0.0) || g.layers == 0 || g.heads == 0 || g.tokens == 0 || g.batch == 0 {
            return Err(Error::Config("grad_check sizes and step must be positive".into()));
        }
        Ok(())
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let loss = self.loss_spec();
        let m = &self.model;
        Ok(SweepConfig {
            l_grid: self.sweep.l_grid.clone(),
            h_grid: self.sweep.h_grid.clone(),
            seeds: (0..self.sweep.seeds as u64).collect(),
            probes: probe_set(self.master_seed, self.sweep.probes, m.tokens, m.d, m.r0, &loss)?,
            steps: self.sweep.steps,
            batch: self.sweep.batch,
            tokens: m.tokens,
            l_ref: self.sweep.l_ref,
            d: m.d,
            k: m.k,
            beta: m.beta,
            r0: m.r0,
            opt: self.opt(),
            loss,
            pi: self.pi()?,
            master_seed: self.master_seed,
            time_budget_secs: self.sweep.time_budget_secs,
        })
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.sweep.l_ref, 1024);
    }

    #[test]
    fn inverted_betas_are_rejected() {
        let err = ExperimentConfig::from_toml("[optimizer]\nbeta1 = 0.99\nbeta2 = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("beta1 <= beta2"), "{err}");
    }

    #[test]
    fn oversized_pi_atom_is_rejected() {
        let atom: Vec<String> = (0..32).map(|_| "3.0".to_string()).collect();
        let text = format!("[pi]\nexplicit = [[{}]]\n", atom.join(", "));
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("1/lambda"), "{err}");
    }

    #[test]
    fn step_size_beyond_inverse_decay_is_rejected() {
        let err = ExperimentConfig::from_toml("[optimizer]\nlambda = 0.5\neta = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("(0, 1/lambda)"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
