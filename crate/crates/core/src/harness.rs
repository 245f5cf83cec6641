//! Discrepancy metrics, convergence sweeps and the finite-difference
//! gradient check.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrete::{batch_gradient, DiscreteModel, LossSpec, Sample, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::dist_sq;
use crate::mean_field::{grid_stride, HatNu, MeanFieldHistory, MeanFieldParams};
use crate::optim::OptConfig;
use crate::params::HeadCloud;
use crate::seed::{rng_for, sample_ball, Stream};
use crate::transport::{cloud_coupled_sq, cloud_w2_sq};

/// `max_{r, i} ‖x_r^i − X_{r·m}^i‖² + ‖a_r^i − A_{r·m}^i‖²` with `m = L_ref/L`,
/// comparing a discrete trajectory against a fine one at the shared depths.
pub fn trajectory_discrepancy(discrete: &Trajectory, fine: &Trajectory) -> Result<f64> {
    let stride = grid_stride(discrete.steps(), fine.steps())?;
    if discrete.weights.len() != fine.weights.len() || discrete.d != fine.d {
        return Err(Error::InvalidInput("trajectories describe different token clouds".into()));
    }
    let with_adj = discrete.has_adjoints() && fine.has_adjoints();
    let d = discrete.d;
    let mut worst = 0.0f64;
    for r in 0..=discrete.steps() {
        let s = r * stride;
        for i in 0..discrete.weights.len() {
            let sl = i * d..(i + 1) * d;
            let mut e = dist_sq(&discrete.states[r][sl.clone()], &fine.states[s][sl.clone()]);
            if with_adj {
                e += dist_sq(&discrete.adjoints[r][sl.clone()], &fine.adjoints[s][sl]);
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Probe-supremum of the squared state-plus-costate discrepancy. This is a
/// lower bound for the supremum over all initial token clouds.
pub fn discrepancy_sup(model: &DiscreteModel, mf: &MeanFieldParams, probes: &[Sample], loss: &LossSpec) -> Result<f64> {
    grid_stride(model.num_layers(), mf.l_ref())?;
    let mut worst = 0.0f64;
    for p in probes {
        let a = model.forward_backward(p, loss)?;
        let b = mf.integrate_forward_backward(p, loss)?;
        worst = worst.max(trajectory_discrepancy(&a, &b)?);
    }
    Ok(worst)
}

/// Max-over-layers divergence between the mean-field-driven heads ν̂ and the
/// trained discrete heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDivergence {
    /// Identity-coupled squared distance per layer.
    pub coupled_sq: Vec<f64>,
    /// Exact squared 2-Wasserstein distance per layer.
    pub w2_sq: Vec<f64>,
}

impl ParamDivergence {
    pub fn max_coupled_sq(&self) -> f64 {
        self.coupled_sq.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_w2_sq(&self) -> f64 {
        self.w2_sq.iter().copied().fold(0.0, f64::max)
    }
}

pub fn param_divergence(hat: &[HeadCloud], discrete: &[HeadCloud]) -> Result<ParamDivergence> {
    if hat.len() != discrete.len() {
        return Err(Error::Grid(format!("{} vs {} layers", hat.len(), discrete.len())));
    }
    let mut coupled_sq = Vec::with_capacity(hat.len());
    let mut w2_sq = Vec::with_capacity(hat.len());
    for (a, b) in hat.iter().zip(discrete) {
        coupled_sq.push(cloud_coupled_sq(a, b)?);
        w2_sq.push(cloud_w2_sq(a, b)?);
    }
    Ok(ParamDivergence { coupled_sq, w2_sq })
}

/// Training batch for step `tau`, shared by every model of a sweep.
pub fn data_batch(master: u64, tau: usize, batch: usize, tokens: usize, d: usize, r0: f64, loss: &LossSpec) -> Result<Vec<Sample>> {
    (0..batch)
        .map(|b| {
            let mut rng = rng_for(master, Stream::Data, &[tau as u64, b as u64]);
            draw_sample(&mut rng, tokens, d, r0, loss)
        })
        .collect()
}

/// Fixed held-out initial token clouds.
pub fn probe_set(master: u64, probes: usize, tokens: usize, d: usize, r0: f64, loss: &LossSpec) -> Result<Vec<Sample>> {
    (0..probes)
        .map(|p| {
            let mut rng = rng_for(master, Stream::Probes, &[p as u64]);
            draw_sample(&mut rng, tokens, d, r0, loss)
        })
        .collect()
}

fn draw_sample<R: rand::Rng>(rng: &mut R, tokens: usize, d: usize, r0: f64, loss: &LossSpec) -> Result<Sample> {
    let states = (0..tokens).flat_map(|_| sample_ball(rng, d, r0)).collect();
    let labels = loss
        .needs_labels()
        .then(|| (0..tokens).flat_map(|_| sample_ball(rng, d, r0)).collect());
    Sample::uniform(d, states, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub l_grid: Vec<usize>,
    pub h_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub probes: Vec<Sample>,
    pub steps: usize,
    pub batch: usize,
    pub tokens: usize,
    pub l_ref: usize,
    pub d: usize,
    pub k: usize,
    pub beta: f64,
    pub r0: f64,
    pub opt: OptConfig,
    pub loss: LossSpec,
    pub pi: HeadCloud,
    pub master_seed: u64,
    /// Cells not started within this many seconds are reported incomplete.
    pub time_budget_secs: Option<f64>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let ascending = |g: &[usize]| !g.is_empty() && g.windows(2).all(|w| w[0] < w[1]) && g[0] > 0;
        if !ascending(&self.l_grid) || !ascending(&self.h_grid) {
            return Err(Error::Config("sweep grids must be nonempty, positive and strictly ascending".into()));
        }
        for &l in &self.l_grid {
            grid_stride(l, self.l_ref)?;
        }
        if self.seeds.is_empty() || self.probes.is_empty() || self.batch == 0 {
            return Err(Error::Config("sweep needs at least one seed, probe and batch sample".into()));
        }
        for p in &self.probes {
            if p.states.chunks_exact(self.d).any(|x| crate::linalg::norm(x) > self.r0 * (1.0 + 1e-12)) {
                return Err(Error::Config("probe initial conditions must lie in the R0 ball".into()));
            }
        }
        self.opt.validate()
    }
}

/// One `(L, H, seed, τ)` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub l: usize,
    pub h: usize,
    pub seed: u64,
    pub tau: usize,
    pub eps2: f64,
    /// Same supremum over the first half of the probe set, for probe-size
    /// sensitivity.
    pub eps2_half_probes: f64,
    pub param_coupled_sq: f64,
    pub param_w2_sq: f64,
    pub completed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

/// Wall time per `(L, H, seed)` job. Kept apart from [`ErrorTable`], which
/// is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub l: usize,
    pub h: usize,
    pub seed: u64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub table: ErrorTable,
    pub timing: Vec<CellTiming>,
    pub reference_secs: f64,
}

/// Mean-field run shared by all cells of a sweep.
pub struct Reference {
    pub history: MeanFieldHistory,
    /// `probe_trajs[τ][p]`.
    pub probe_trajs: Vec<Vec<Trajectory>>,
    pub batches: Vec<Vec<Sample>>,
    pub final_params: MeanFieldParams,
}

pub fn mean_field_reference(cfg: &SweepConfig) -> Result<Reference> {
    let mut mf = MeanFieldParams::from_pi(&cfg.pi, cfg.l_ref, cfg.beta)?;
    let mut history = MeanFieldHistory::default();
    let mut probe_trajs = Vec::with_capacity(cfg.steps + 1);
    let mut batches = Vec::with_capacity(cfg.steps);
    for tau in 0..=cfg.steps {
        let kernels = mf.kernels();
        let trajs: Result<Vec<Trajectory>> = cfg
            .probes
            .par_iter()
            .map(|p| crate::discrete::run_trajectory(&kernels, p, Some(&cfg.loss)))
            .collect();
        probe_trajs.push(trajs?);
        if tau < cfg.steps {
            let batch = data_batch(cfg.master_seed, tau, cfg.batch, cfg.tokens, cfg.d, cfg.r0, &cfg.loss)?;
            history.push(mf.train_step(&batch, &cfg.loss, &cfg.opt)?);
            batches.push(batch);
        }
    }
    Ok(Reference {
        history,
        probe_trajs,
        batches,
        final_params: mf,
    })
}

/// Trains one discrete model alongside its ν̂ coupling and records the
/// discrepancies at every step.
pub fn run_cell(cfg: &SweepConfig, reference: &Reference, l: usize, h: usize, seed: u64) -> Result<Vec<ErrorRow>> {
    let mut rng = rng_for(cfg.master_seed, Stream::Init, &[l as u64, h as u64, seed]);
    let mut model = DiscreteModel::from_pi(&cfg.pi, l, h, cfg.beta, &mut rng)?;
    let mut hat = HatNu::new(&model, cfg.l_ref)?;
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    for tau in 0..=cfg.steps {
        let kernels = model.kernels();
        let half = cfg.probes.len().div_ceil(2);
        let (mut eps2, mut eps2_half_probes) = (0.0f64, 0.0f64);
        for (i, (p, fine)) in cfg.probes.iter().zip(&reference.probe_trajs[tau]).enumerate() {
            let t = crate::discrete::run_trajectory(&kernels, p, Some(&cfg.loss))?;
            eps2 = eps2.max(trajectory_discrepancy(&t, fine)?);
            if i < half {
                eps2_half_probes = eps2;
            }
        }
        let pd = param_divergence(hat.layers(), model.layers())?;
        rows.push(ErrorRow {
            l,
            h,
            seed,
            tau,
            eps2,
            eps2_half_probes,
            param_coupled_sq: pd.max_coupled_sq(),
            param_w2_sq: pd.max_w2_sq(),
            completed: true,
        });
        if tau < cfg.steps {
            model.train_step(&reference.batches[tau], &cfg.loss, &cfg.opt)?;
            hat.advance(&reference.history.steps[tau], &cfg.opt)?;
        }
    }
    Ok(rows)
}

pub fn convergence_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let reference = mean_field_reference(cfg)?;
    let reference_secs = start.elapsed().as_secs_f64();
    let jobs: Vec<(usize, usize, u64)> = cfg
        .l_grid
        .iter()
        .flat_map(|&l| cfg.h_grid.iter().flat_map(move |&h| cfg.seeds.iter().map(move |&s| (l, h, s))))
        .collect();
    let results: Vec<Result<(Vec<ErrorRow>, CellTiming)>> = jobs
        .par_iter()
        .map(|&(l, h, seed)| {
            let t0 = Instant::now();
            let over = cfg
                .time_budget_secs
                .is_some_and(|b| start.elapsed().as_secs_f64() > b);
            let rows = if over {
                (0..=cfg.steps)
                    .map(|tau| ErrorRow {
                        l,
                        h,
                        seed,
                        tau,
                        eps2: f64::NAN,
                        eps2_half_probes: f64::NAN,
                        param_coupled_sq: f64::NAN,
                        param_w2_sq: f64::NAN,
                        completed: false,
                    })
                    .collect()
            } else {
                run_cell(cfg, &reference, l, h, seed)?
            };
            Ok((
                rows,
                CellTiming {
                    l,
                    h,
                    seed,
                    wall_secs: t0.elapsed().as_secs_f64(),
                },
            ))
        })
        .collect();
    let mut table = ErrorTable::default();
    let mut timing = Vec::with_capacity(jobs.len());
    for r in results {
        let (rows, t) = r?;
        table.rows.extend(rows);
        timing.push(t);
    }
    Ok(SweepOutcome {
        table,
        timing,
        reference_secs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub layer: usize,
    pub head: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub max_rel_err: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Relative error with a floor at `1e-3` of the largest finite-difference
/// entry of the same head, so that entries which are zero up to rounding do
/// not dominate.
pub fn relative_error(g: f64, fd: f64, scale: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3 * scale).max(1e-12)
}

/// Compares [`batch_gradient`] with central differences of `L·H` times the
/// mean batch loss for the heads listed in `pairs` (all heads when `None`).
pub fn grad_check(model: &DiscreteModel, loss: &LossSpec, batch: &[Sample], h: f64, pairs: Option<&[(usize, usize)]>) -> Result<GradCheckReport> {
    let trajs = model.trajectories(batch, loss)?;
    let all: Vec<(usize, usize)> = (0..model.num_layers())
        .flat_map(|r| (0..model.layer(r).len()).map(move |hd| (r, hd)))
        .collect();
    let pairs = pairs.unwrap_or(&all);
    let mut entries = Vec::with_capacity(pairs.len());
    for &(r, hd) in pairs {
        if r >= model.num_layers() || hd >= model.layer(r).len() {
            return Err(Error::InvalidInput(format!("no head ({r}, {hd})")));
        }
        let theta = &model.layer(r).heads()[hd];
        let g = batch_gradient(&trajs, r, theta, model.beta)?;
        let scale = (model.num_layers() * model.layer(r).len()) as f64;
        let mut fd = vec![0.0; theta.as_slice().len()];
        let mut probe = model.clone();
        for (idx, f) in fd.iter_mut().enumerate() {
            let base = theta.as_slice()[idx];
            probe.layer_mut(r).heads_mut()[hd].as_mut_slice()[idx] = base + h;
            let up = probe.batch_loss(batch, loss)?;
            probe.layer_mut(r).heads_mut()[hd].as_mut_slice()[idx] = base - h;
            let down = probe.batch_loss(batch, loss)?;
            probe.layer_mut(r).heads_mut()[hd].as_mut_slice()[idx] = base;
            *f = scale * (up - down) / (2.0 * h);
        }
        let fd_scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = g
            .as_slice()
            .iter()
            .zip(&fd)
            .map(|(a, b)| relative_error(*a, *b, fd_scale))
            .fold(0.0, f64::max);
        entries.push(GradCheckEntry {
            layer: r,
            head: hd,
            max_rel_err: err,
        });
    }
    Ok(GradCheckReport {
        step: h,
        max_rel_err: entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max),
        entries,
    })
}
