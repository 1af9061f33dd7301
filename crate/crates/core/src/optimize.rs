//! ADAM, the stagewise learning-rate schedule and the training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CollocationSet;
use crate::loss::{DirichletVariant, LossAssembly, LossBreakdown, LossWeights, NetPair};
use crate::metrics::{relative_l2_error, Quadrature};
use crate::problems::{
    gradient_sup, synthesize_observation, synthesize_observation_scaled, BcKind, ProblemInstance,
};
use crate::rng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which loss to assemble. `Auto` and `Partial` follow the problem's boundary condition
/// (flux form for Dirichlet); `Partial` additionally insists on a partial-data problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Auto,
    Neumann,
    #[serde(rename = "dirichlet-fluxbc")]
    DirichletFluxBc,
    #[serde(rename = "dirichlet-qbc")]
    DirichletQBc,
    Partial,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Auto => "auto",
            Self::Neumann => "neumann",
            Self::DirichletFluxBc => "dirichlet-fluxbc",
            Self::DirichletQBc => "dirichlet-qbc",
            Self::Partial => "partial",
        }
    }

    /// `None` for Neumann, the variant for Dirichlet.
    pub fn resolve(self, problem: &ProblemInstance) -> Result<Option<DirichletVariant>> {
        let mismatch = || {
            Error::Config(format!(
                "loss '{}' does not fit example {} ({:?} data{})",
                self.name(),
                problem.id,
                problem.bc,
                if problem.is_partial() { ", partial" } else { "" }
            ))
        };
        match (self, problem.bc) {
            (Self::Partial, _) if !problem.is_partial() => Err(mismatch()),
            (Self::Auto | Self::Partial, BcKind::Neumann) | (Self::Neumann, BcKind::Neumann) => {
                Ok(None)
            }
            (Self::Auto | Self::Partial | Self::DirichletFluxBc, BcKind::Dirichlet) => {
                Ok(Some(DirichletVariant::FluxBc))
            }
            (Self::DirichletQBc, BcKind::Dirichlet) => Ok(Some(DirichletVariant::QBc)),
            _ => Err(mismatch()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub dr: f64,
    pub step: usize,
    pub epochs: usize,
    pub seed: u64,
    pub n_r: usize,
    pub n_b: usize,
    /// Points in the observed region for partial data; defaults to `n_r`.
    pub n_data: Option<usize>,
    pub weights: LossWeights,
    pub q_hidden: Vec<usize>,
    pub sigma_hidden: Vec<usize>,
    pub delta: f64,
    pub loss: LossKind,
    pub trace_interval: usize,
    /// Redraw the collocation points every epoch.
    pub resample: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr0));
        }
        if !(self.dr > 0.0 && self.dr <= 1.0) {
            return bad(format!("dr must lie in (0, 1], got {}", self.dr));
        }
        if self.step == 0 || self.epochs == 0 || self.trace_interval == 0 {
            return bad("step, epochs and trace_interval must be >= 1".into());
        }
        if self.n_r == 0 || self.n_b == 0 || self.n_data == Some(0) {
            return bad("point counts must be >= 1".into());
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if self.q_hidden.iter().chain(&self.sigma_hidden).any(|&w| w == 0) {
            return bad("hidden widths must be >= 1".into());
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// `lr0 * dr^floor(epoch / step)`.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * config.dr.powi((epoch / config.step) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected ADAM update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "state {}, params {}, gradient {}",
                    self.m.len(),
                    params.len(),
                    grad.len()
                ),
            ));
        }
        if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {g}")));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Projected relative error on the coarse trace quadrature.
    pub rel_error: Option<f64>,
}

pub enum TrainEvent<'a> {
    Trace(&'a TraceRow),
    Checkpoint { epoch: usize, nets: &'a NetPair },
    /// Last finite parameters before the loss or gradient went bad.
    Diverged { epoch: usize, nets: &'a NetPair, reason: &'a str },
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub nets: NetPair,
    pub trace: Vec<TraceRow>,
    pub checkpoints: Vec<(usize, NetPair)>,
    pub wall_time_s: f64,
}

/// Networks with Glorot weights and the `q` output bias at the middle of the admissible
/// interval, so the cutoff starts out transparent.
pub fn initial_nets(problem: &ProblemInstance, config: &TrainConfig) -> Result<NetPair> {
    let mut nets = NetPair::init(
        problem.dim(),
        &config.q_hidden,
        &config.sigma_hidden,
        config.seed,
    )?;
    let last = nets.q.layers.last_mut().expect("at least one layer");
    last.bias[0] = problem.bounds.midpoint();
    Ok(nets)
}

/// Collocation points, observation and assembled loss for one draw of `seed`.
pub fn build_assembly(
    problem: &ProblemInstance,
    config: &TrainConfig,
    seed: u64,
) -> Result<LossAssembly> {
    let variant = config.loss.resolve(problem)?;
    let n_data = config.n_data.unwrap_or(config.n_r);
    let partial = problem.data_region.as_ref().map(|e| (e, n_data));
    let colloc = CollocationSet::sample(&problem.domain, config.n_r, config.n_b, partial, seed)?;
    let obs = synthesize_observation(problem, colloc.observed(), config.delta, seed)?;
    match variant {
        None => LossAssembly::neumann(problem, &colloc, &obs, config.weights),
        Some(v) => {
            let grad_b = problem.grad_u_at(colloc.boundary.view())?;
            let scale = obs.scale.max(gradient_sup(&grad_b));
            let obs_b = synthesize_observation_scaled(
                problem,
                colloc.boundary.view(),
                config.delta,
                rng::derive(seed, rng::TAG_BOUNDARY),
                scale,
            )?;
            LossAssembly::dirichlet(problem, &colloc, &obs, Some(&obs_b), config.weights, v)
        }
    }
}

/// Projected relative error of the current `q` network on `quad`.
pub fn reconstruction_error(
    problem: &ProblemInstance,
    nets: &NetPair,
    quad: &Quadrature,
    project: bool,
) -> Result<f64> {
    relative_l2_error(
        |x| crate::loss::q_values(nets, x, None),
        |x| problem.q_at(x),
        &problem.domain,
        project.then_some(&problem.bounds),
        quad,
    )
}

/// Full-batch ADAM on the empirical loss, one step per epoch.
pub fn train(problem: &ProblemInstance, config: &TrainConfig) -> Result<TrainOutput> {
    let mut trace = Vec::new();
    let mut checkpoints = Vec::new();
    let (nets, wall) = train_with(problem, config, |ev| {
        match ev {
            TrainEvent::Trace(r) => trace.push(r.clone()),
            TrainEvent::Checkpoint { epoch, nets } => checkpoints.push((epoch, nets.clone())),
            TrainEvent::Diverged { .. } => {}
        }
        Ok(())
    })?;
    Ok(TrainOutput {
        nets,
        trace,
        checkpoints,
        wall_time_s: wall,
    })
}

/// As [`train`], handing trace rows and checkpoints to `observer` as they are produced.
/// Returns the final networks and the wall time in seconds.
pub fn train_with<F>(
    problem: &ProblemInstance,
    config: &TrainConfig,
    mut observer: F,
) -> Result<(NetPair, f64)>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    config.validate()?;
    let start = Instant::now();
    let mut assembly = build_assembly(problem, config, config.seed)?;
    let mut nets = initial_nets(problem, config)?;
    let mut flat = nets.to_flat();
    let mut adam = AdamState::new(flat.len());
    let quad = Quadrature::coarse_for(problem.dim());

    for epoch in 0..config.epochs {
        if config.resample && epoch > 0 {
            let seed = rng::derive(config.seed ^ epoch as u64, rng::TAG_RESAMPLE);
            assembly = build_assembly(problem, config, seed)?;
        }
        let lr = lr_schedule(config, epoch);
        let done = epoch + 1;
        let result = assembly
            .evaluate_with_gradient(&nets)
            .and_then(|(b, g)| adam.step(&mut flat, &g, lr).map(|_| b));
        let breakdown = match result {
            Ok(b) => b,
            Err(e @ Error::NonFinite(_)) => {
                let reason = e.to_string();
                observer(TrainEvent::Diverged {
                    epoch,
                    nets: &nets,
                    reason: &reason,
                })?;
                return Err(Error::Diverged { epoch, reason });
            }
            Err(e) => return Err(e),
        };
        if done % config.trace_interval == 0 || done == config.epochs {
            let rel_error = reconstruction_error(problem, &nets, &quad, true).ok();
            let row = TraceRow {
                epoch: done,
                lr,
                loss: breakdown,
                rel_error,
            };
            observer(TrainEvent::Trace(&row))?;
        }
        if flat.iter().any(|v| !v.is_finite()) {
            let reason = "parameters became non-finite".to_string();
            observer(TrainEvent::Diverged {
                epoch,
                nets: &nets,
                reason: &reason,
            })?;
            return Err(Error::Diverged { epoch, reason });
        }
        nets.assign_flat(&flat)?;
        if done % config.step == 0 || done == config.epochs {
            observer(TrainEvent::Checkpoint {
                epoch: done,
                nets: &nets,
            })?;
        }
    }
    Ok((nets, start.elapsed().as_secs_f64()))
}
