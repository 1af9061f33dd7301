//! Empirical mixed least-squares losses.
//!
//! With `P_A` the cutoff onto `[c0, c1]` and Monte Carlo points `X` in the domain and
//! `Y` on its boundary,
//!
//! ```text
//! E_d     = |O|/n  sum |sigma(X) - P_A(q(X)) grad z(X)|^2
//! E_sigma = |O|/n  sum (div sigma(X) + f(X))^2
//! E_b     = |dO|/nb sum (sigma(Y).n - g(Y))^2                  Neumann
//! E_b'    = |dO|/nb sum |sigma(Y) - q_bdry(Y) grad z(Y)|^2      Dirichlet, flux form
//! E_b''   = |dO|/nb sum (q(Y) - q_bdry(Y))^2                    Dirichlet, q form
//! E_q     = |O|/n  sum |grad q(X)|^2
//! E_tv    = |O|/n  sum sqrt(|grad q(X)|^2 + eps^2) - eps
//! J       = E_d + g_sigma E_sigma + g_b E_b + g_q E_q + g_tv E_tv
//! ```
//!
//! With partial data the data term runs over its own point set in the observed region
//! and uses that region's measure.
//!
//! Points are processed in fixed-size chunks, each on its own tape; chunk results are
//! reduced in chunk order, so the result does not depend on the thread count.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradient, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{BoxDomain, CollocationSet};
use crate::network::{
    init_params, record_forward, AdmissibleBounds, MlpSpec, NetEval, NetLeaves, ParamSet,
};
use crate::problems::{BcKind, ObservationField, ProblemInstance};
use crate::rng;

pub const DEFAULT_CHUNK: usize = 256;
pub const DEFAULT_TV_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_sigma: f64,
    pub gamma_b: f64,
    pub gamma_q: f64,
    #[serde(default)]
    pub gamma_tv: f64,
    #[serde(default = "default_tv_epsilon")]
    pub tv_epsilon: f64,
}

fn default_tv_epsilon() -> f64 {
    DEFAULT_TV_EPSILON
}

impl LossWeights {
    pub fn new(gamma_sigma: f64, gamma_b: f64, gamma_q: f64) -> Self {
        Self {
            gamma_sigma,
            gamma_b,
            gamma_q,
            gamma_tv: 0.0,
            tv_epsilon: DEFAULT_TV_EPSILON,
        }
    }

    pub fn with_tv(mut self, gamma_tv: f64) -> Self {
        self.gamma_tv = gamma_tv;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_sigma", self.gamma_sigma),
            ("gamma_b", self.gamma_b),
            ("gamma_q", self.gamma_q),
            ("gamma_tv", self.gamma_tv),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.tv_epsilon > 0.0) || !self.tv_epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tv_epsilon must be > 0, got {}",
                self.tv_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub divergence: f64,
    pub boundary: f64,
    pub seminorm: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the components, always in the same order.
    pub fn from_components(
        data: f64,
        divergence: f64,
        boundary: f64,
        seminorm: f64,
        tv: f64,
        w: &LossWeights,
    ) -> Self {
        let total = data
            + w.gamma_sigma * divergence
            + w.gamma_b * boundary
            + w.gamma_q * seminorm
            + w.gamma_tv * tv;
        Self {
            data,
            divergence,
            boundary,
            seminorm,
            tv,
            total,
        }
    }
}

/// Monte Carlo factor `measure / count` for a term whose full point set has `count` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McScale {
    pub measure: f64,
    pub count: usize,
}

impl McScale {
    pub fn new(measure: f64, count: usize) -> Self {
        Self { measure, count }
    }

    fn factor(&self, what: &'static str) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyPointSet(what));
        }
        Ok(self.measure / self.count as f64)
    }
}

fn nonempty(tape: &Tape, node: NodeId, what: &'static str) -> Result<()> {
    if tape.value(node).nrows() == 0 {
        return Err(Error::EmptyPointSet(what));
    }
    Ok(())
}

/// Sum of `a_k * b_k` over columns, as an `n x 1` node.
fn row_dot(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.value(a).ncols();
    let mut acc: Option<NodeId> = None;
    for k in 0..d {
        let ak = tape.column(a, k)?;
        let bk = tape.column(b, k)?;
        let p = tape.mul(ak, bk)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, p)?,
            None => p,
        });
    }
    acc.ok_or_else(|| Error::shape("row_dot", "zero columns"))
}

/// `|grad q|^2` per point from the Jacobian columns of a scalar network.
fn grad_norm_sq(tape: &mut Tape, jac: &[NodeId]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &j in jac {
        let sq = tape.square(j)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, sq)?,
            None => sq,
        });
    }
    acc.ok_or_else(|| Error::shape("gradient norm", "no Jacobian recorded"))
}

/// `E_d`: `q_value` is `n x 1`, `sigma_value` and `grad_z` are `n x d`.
pub fn data_residual(
    tape: &mut Tape,
    q_value: NodeId,
    sigma_value: NodeId,
    grad_z: NodeId,
    bounds: &AdmissibleBounds,
    scale: McScale,
) -> Result<NodeId> {
    let factor = scale.factor("data residual")?;
    nonempty(tape, q_value, "data residual")?;
    let p = tape.project(q_value, bounds.c0, bounds.c1)?;
    let target = tape.broadcast_mul(p, grad_z)?;
    let r = tape.sub(sigma_value, target)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, factor)
}

/// `E_sigma` from the flux Jacobian (`sigma_jac[k]` is `d sigma / d x_k`) and `f` (`n x 1`).
pub fn divergence_residual(
    tape: &mut Tape,
    sigma_jac: &[NodeId],
    f: NodeId,
    scale: McScale,
) -> Result<NodeId> {
    let factor = scale.factor("divergence residual")?;
    nonempty(tape, f, "divergence residual")?;
    let mut div: Option<NodeId> = None;
    for (k, &j) in sigma_jac.iter().enumerate() {
        let c = tape.column(j, k)?;
        div = Some(match div {
            Some(acc) => tape.add(acc, c)?,
            None => c,
        });
    }
    let div = div.ok_or_else(|| Error::shape("divergence", "flux Jacobian is empty"))?;
    let r = tape.add(div, f)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, factor)
}

/// `E_b` for flux data: `normals` is `n_b x d`, `g` is `n_b x 1`.
pub fn flux_bc_residual(
    tape: &mut Tape,
    sigma_value: NodeId,
    normals: NodeId,
    g: NodeId,
    scale: McScale,
) -> Result<NodeId> {
    let factor = scale.factor("flux boundary residual")?;
    nonempty(tape, g, "flux boundary residual")?;
    let sn = row_dot(tape, sigma_value, normals)?;
    let r = tape.sub(sn, g)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, factor)
}

/// `E_b'`: `target` holds `q_bdry(Y) grad z(Y)`, `n_b x d`.
pub fn dirichlet_bc_residual(
    tape: &mut Tape,
    sigma_value: NodeId,
    target: NodeId,
    scale: McScale,
) -> Result<NodeId> {
    let factor = scale.factor("Dirichlet boundary residual")?;
    nonempty(tape, target, "Dirichlet boundary residual")?;
    let r = tape.sub(sigma_value, target)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, factor)
}

/// Boundary term of the q form: `(q(Y) - q_bdry(Y))^2`, on the raw network value.
pub fn q_bc_residual(
    tape: &mut Tape,
    q_value: NodeId,
    q_boundary: NodeId,
    scale: McScale,
) -> Result<NodeId> {
    let factor = scale.factor("conductivity boundary residual")?;
    nonempty(tape, q_boundary, "conductivity boundary residual")?;
    let r = tape.sub(q_value, q_boundary)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, factor)
}

/// `E_q` on the raw `q` network (no cutoff).
pub fn seminorm_penalty(tape: &mut Tape, q_jac: &[NodeId], scale: McScale) -> Result<NodeId> {
    let factor = scale.factor("seminorm penalty")?;
    let g2 = grad_norm_sq(tape, q_jac)?;
    nonempty(tape, g2, "seminorm penalty")?;
    let s = tape.sum(g2)?;
    tape.scale(s, factor)
}

/// Smoothed total variation `sqrt(|grad q|^2 + eps^2) - eps`.
pub fn tv_penalty(
    tape: &mut Tape,
    q_jac: &[NodeId],
    scale: McScale,
    epsilon: f64,
) -> Result<NodeId> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "TV smoothing must be > 0, got {epsilon}"
        )));
    }
    let factor = scale.factor("TV penalty")?;
    let g2 = grad_norm_sq(tape, q_jac)?;
    nonempty(tape, g2, "TV penalty")?;
    let r = tape.sqrt_smoothed(g2, epsilon)?;
    let s = tape.sum(r)?;
    tape.scale(s, factor)
}

/// The conductivity network (scalar output) and the flux network (`d` outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct NetPair {
    pub q_spec: MlpSpec,
    pub q: ParamSet,
    pub sigma_spec: MlpSpec,
    pub sigma: ParamSet,
}

impl NetPair {
    /// Glorot-initialised pair; the two nets draw from separate streams of `seed`.
    pub fn init(dim: usize, q_hidden: &[usize], sigma_hidden: &[usize], seed: u64) -> Result<Self> {
        let q_spec = MlpSpec::new(dim, q_hidden.to_vec(), 1)?;
        let sigma_spec = MlpSpec::new(dim, sigma_hidden.to_vec(), dim)?;
        let q = init_params(&q_spec, rng::derive(seed, rng::TAG_INIT_Q));
        let sigma = init_params(&sigma_spec, rng::derive(seed, rng::TAG_INIT_SIGMA));
        Ok(Self {
            q_spec,
            q,
            sigma_spec,
            sigma,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.q_spec.output_dim != 1 {
            return Err(Error::shape("q network", "output must be scalar"));
        }
        if self.sigma_spec.output_dim != self.sigma_spec.input_dim
            || self.q_spec.input_dim != self.sigma_spec.input_dim
        {
            return Err(Error::shape(
                "flux network",
                format!(
                    "q input {}, flux input {}, flux output {}",
                    self.q_spec.input_dim, self.sigma_spec.input_dim, self.sigma_spec.output_dim
                ),
            ));
        }
        self.q.check(&self.q_spec)?;
        self.sigma.check(&self.sigma_spec)
    }

    pub fn dim(&self) -> usize {
        self.q_spec.input_dim
    }

    pub fn len(&self) -> usize {
        self.q.len() + self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `q` parameters first, then `sigma`; within each, layer by layer, weight then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        self.q.extend_flat(&mut v);
        self.sigma.extend_flat(&mut v);
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(
                "parameters",
                format!("{} values for {} parameters", flat.len(), self.len()),
            ));
        }
        let k = self.q.assign_flat(flat)?;
        self.sigma.assign_flat(&flat[k..])?;
        Ok(())
    }

    /// Weight and `1 x out` bias of every layer, `q` first; the leaf layout on a tape.
    pub fn leaf_arrays(&self) -> Vec<Array2<f64>> {
        self.q
            .layers
            .iter()
            .chain(self.sigma.layers.iter())
            .flat_map(|l| [l.weight.clone(), l.bias.clone().insert_axis(Axis(0))])
            .collect()
    }

    fn register(&self, tape: &mut Tape) -> (NetLeaves, NetLeaves) {
        let q = NetLeaves::register(tape, &self.q);
        let s = NetLeaves::register(tape, &self.sigma);
        (q, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirichletVariant {
    /// `|sigma - q_bdry grad z|^2` on the boundary.
    FluxBc,
    /// `(q - q_bdry)^2` on the boundary.
    QBc,
}

#[derive(Clone, Debug)]
enum BoundaryData {
    Flux { normals: Array2<f64>, g: Array2<f64> },
    DirichletFlux { target: Array2<f64> },
    DirichletQ { q_b: Array2<f64> },
}

#[derive(Clone, Copy, Debug)]
enum Chunk {
    /// Interior rows; `with_data` when the observation lives on the interior set.
    Interior { start: usize, end: usize, with_data: bool },
    Data { start: usize, end: usize },
    Boundary { start: usize, end: usize },
}

/// A ready-to-evaluate loss: point sets, problem data at those points, and weights.
#[derive(Clone, Debug)]
pub struct LossAssembly {
    pub weights: LossWeights,
    pub bounds: AdmissibleBounds,
    volume: f64,
    area: f64,
    data_volume: f64,
    interior: Array2<f64>,
    f: Array2<f64>,
    /// Observation on the interior set (full data).
    interior_grad_z: Option<Array2<f64>>,
    /// Separate observation set (partial data).
    data_points: Option<Array2<f64>>,
    data_grad_z: Option<Array2<f64>>,
    boundary: Array2<f64>,
    boundary_data: BoundaryData,
    chunk: usize,
}

fn column(v: Array1<f64>) -> Array2<f64> {
    v.insert_axis(Axis(1))
}

/// Volume of `domain` minus the part of `excluded` inside it.
pub fn observed_volume(domain: &BoxDomain, excluded: &BoxDomain) -> f64 {
    let overlap: f64 = (0..domain.dim())
        .map(|i| {
            let lo = domain.lower[i].max(excluded.lower[i]);
            let hi = domain.upper[i].min(excluded.upper[i]);
            (hi - lo).max(0.0)
        })
        .product();
    domain.volume() - overlap
}

impl LossAssembly {
    fn base(
        problem: &ProblemInstance,
        colloc: &CollocationSet,
        obs: &ObservationField,
        weights: LossWeights,
        boundary_data: BoundaryData,
    ) -> Result<Self> {
        weights.validate()?;
        let d = problem.dim();
        if colloc.interior.ncols() != d || colloc.boundary.ncols() != d {
            return Err(Error::shape(
                "collocation",
                format!("points do not have {d} columns"),
            ));
        }
        if colloc.interior.nrows() == 0 {
            return Err(Error::EmptyPointSet("interior collocation"));
        }
        if colloc.boundary.nrows() == 0 {
            return Err(Error::EmptyPointSet("boundary collocation"));
        }
        if obs.grad_z.dim() != obs.points.dim() {
            return Err(Error::shape("observation", "gradient and point shapes differ"));
        }
        let f = column(problem.source_at(colloc.interior.view()));
        let volume = problem.domain.volume();
        let mut out = Self {
            weights,
            bounds: problem.bounds,
            volume,
            area: problem.domain.boundary_measure(),
            data_volume: volume,
            interior: colloc.interior.clone(),
            f,
            interior_grad_z: None,
            data_points: None,
            data_grad_z: None,
            boundary: colloc.boundary.clone(),
            boundary_data,
            chunk: DEFAULT_CHUNK,
        };
        match &problem.data_region {
            Some(excluded) => {
                if obs.points.nrows() == 0 {
                    return Err(Error::EmptyPointSet("observed region"));
                }
                out.data_volume = observed_volume(&problem.domain, excluded);
                out.data_points = Some(obs.points.clone());
                out.data_grad_z = Some(obs.grad_z.clone());
            }
            None => {
                if obs.points != colloc.interior {
                    return Err(Error::InvalidArgument(
                        "full-data observation must sit on the interior collocation points".into(),
                    ));
                }
                out.interior_grad_z = Some(obs.grad_z.clone());
            }
        }
        Ok(out)
    }

    /// Neumann loss; with a data region set on the problem, `obs` lives on the observed set.
    pub fn neumann(
        problem: &ProblemInstance,
        colloc: &CollocationSet,
        obs: &ObservationField,
        weights: LossWeights,
    ) -> Result<Self> {
        if problem.bc != BcKind::Neumann {
            return Err(Error::InvalidArgument(format!(
                "{} is not a Neumann problem",
                problem.id
            )));
        }
        let g = column(problem.flux_at(colloc.boundary.view(), colloc.normals.view())?);
        let bd = BoundaryData::Flux {
            normals: colloc.normals.clone(),
            g,
        };
        Self::base(problem, colloc, obs, weights, bd)
    }

    /// Dirichlet loss. The flux form needs the boundary observation `obs_boundary`.
    pub fn dirichlet(
        problem: &ProblemInstance,
        colloc: &CollocationSet,
        obs: &ObservationField,
        obs_boundary: Option<&ObservationField>,
        weights: LossWeights,
        variant: DirichletVariant,
    ) -> Result<Self> {
        if problem.bc != BcKind::Dirichlet {
            return Err(Error::InvalidArgument(format!(
                "{} is not a Dirichlet problem",
                problem.id
            )));
        }
        let q_b = problem.q_boundary_at(colloc.boundary.view())?;
        let bd = match variant {
            DirichletVariant::FluxBc => {
                let ob = obs_boundary.ok_or(Error::MissingData("boundary observation"))?;
                if ob.points != colloc.boundary {
                    return Err(Error::InvalidArgument(
                        "boundary observation must sit on the boundary collocation points".into(),
                    ));
                }
                let mut target = ob.grad_z.clone();
                for (mut row, qv) in target.rows_mut().into_iter().zip(q_b.iter()) {
                    row.mapv_inplace(|v| qv * v);
                }
                BoundaryData::DirichletFlux { target }
            }
            DirichletVariant::QBc => BoundaryData::DirichletQ { q_b: column(q_b) },
        };
        Self::base(problem, colloc, obs, weights, bd)
    }

    /// Points per tape; results depend on it only through rounding.
    pub fn with_chunk_size(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn data_volume(&self) -> f64 {
        self.data_volume
    }

    fn chunks(&self) -> Vec<Chunk> {
        let mut out = Vec::new();
        let split = |n: usize, c: usize| {
            (0..n.div_ceil(c)).map(move |k| (k * c, ((k + 1) * c).min(n)))
        };
        let full_data = self.interior_grad_z.is_some();
        for (start, end) in split(self.interior.nrows(), self.chunk) {
            out.push(Chunk::Interior {
                start,
                end,
                with_data: full_data,
            });
        }
        if let Some(dp) = &self.data_points {
            for (start, end) in split(dp.nrows(), self.chunk) {
                out.push(Chunk::Data { start, end });
            }
        }
        for (start, end) in split(self.boundary.nrows(), self.chunk) {
            out.push(Chunk::Boundary { start, end });
        }
        out
    }

    /// Records one chunk on a fresh tape. Returns the tape, the weighted chunk loss, and
    /// the five scaled component nodes (absent ones as `None`).
    fn record_chunk(
        &self,
        nets: &NetPair,
        chunk: Chunk,
    ) -> Result<(Tape, NodeId, [Option<NodeId>; 5])> {
        let mut tape = Tape::new();
        let (ql, sl) = nets.register(&mut tape);
        let w = &self.weights;
        let mut comps: [Option<NodeId>; 5] = [None; 5];
        let n_r = self.interior.nrows();
        match chunk {
            Chunk::Interior {
                start,
                end,
                with_data,
            } => {
                let x = tape.constant(self.interior.slice(s![start..end, ..]).to_owned());
                let q = record_forward(&mut tape, &ql, x, true)?;
                let sigma = record_forward(&mut tape, &sl, x, true)?;
                if with_data {
                    let gz = self.interior_grad_z.as_ref().expect("full data");
                    let gz = tape.constant(gz.slice(s![start..end, ..]).to_owned());
                    comps[0] = Some(data_residual(
                        &mut tape,
                        q.value,
                        sigma.value,
                        gz,
                        &self.bounds,
                        McScale::new(self.data_volume, n_r),
                    )?);
                }
                let f = tape.constant(self.f.slice(s![start..end, ..]).to_owned());
                let scale = McScale::new(self.volume, n_r);
                comps[1] = Some(divergence_residual(&mut tape, &sigma.jacobian, f, scale)?);
                comps[3] = Some(seminorm_penalty(&mut tape, &q.jacobian, scale)?);
                if w.gamma_tv > 0.0 {
                    comps[4] = Some(tv_penalty(&mut tape, &q.jacobian, scale, w.tv_epsilon)?);
                }
            }
            Chunk::Data { start, end } => {
                let dp = self.data_points.as_ref().expect("partial data");
                let gz = self.data_grad_z.as_ref().expect("partial data");
                let x = tape.constant(dp.slice(s![start..end, ..]).to_owned());
                let q = record_forward(&mut tape, &ql, x, false)?;
                let sigma = record_forward(&mut tape, &sl, x, false)?;
                let gz = tape.constant(gz.slice(s![start..end, ..]).to_owned());
                comps[0] = Some(data_residual(
                    &mut tape,
                    q.value,
                    sigma.value,
                    gz,
                    &self.bounds,
                    McScale::new(self.data_volume, dp.nrows()),
                )?);
            }
            Chunk::Boundary { start, end } => {
                let y = tape.constant(self.boundary.slice(s![start..end, ..]).to_owned());
                let scale = McScale::new(self.area, self.boundary.nrows());
                let node = match &self.boundary_data {
                    BoundaryData::Flux { normals, g } => {
                        let sigma = record_forward(&mut tape, &sl, y, false)?;
                        let nm = tape.constant(normals.slice(s![start..end, ..]).to_owned());
                        let g = tape.constant(g.slice(s![start..end, ..]).to_owned());
                        flux_bc_residual(&mut tape, sigma.value, nm, g, scale)?
                    }
                    BoundaryData::DirichletFlux { target } => {
                        let sigma = record_forward(&mut tape, &sl, y, false)?;
                        let t = tape.constant(target.slice(s![start..end, ..]).to_owned());
                        dirichlet_bc_residual(&mut tape, sigma.value, t, scale)?
                    }
                    BoundaryData::DirichletQ { q_b } => {
                        let q = record_forward(&mut tape, &ql, y, false)?;
                        let t = tape.constant(q_b.slice(s![start..end, ..]).to_owned());
                        q_bc_residual(&mut tape, q.value, t, scale)?
                    }
                };
                comps[2] = Some(node);
            }
        }
        let gammas = [
            1.0,
            w.gamma_sigma,
            w.gamma_b,
            w.gamma_q,
            w.gamma_tv,
        ];
        let mut total: Option<NodeId> = None;
        for (c, g) in comps.iter().zip(gammas) {
            if let Some(c) = *c {
                let term = if g == 1.0 { c } else { tape.scale(c, g)? };
                total = Some(match total {
                    Some(t) => tape.add(t, term)?,
                    None => term,
                });
            }
        }
        let total = total.expect("every chunk records at least one term");
        Ok((tape, total, comps))
    }

    fn chunk_values(tape: &Tape, comps: &[Option<NodeId>; 5]) -> Result<[f64; 5]> {
        let mut v = [0.0; 5];
        for (out, c) in v.iter_mut().zip(comps) {
            if let Some(c) = c {
                *out = tape.scalar(*c)?;
            }
        }
        Ok(v)
    }

    fn finish(&self, parts: &[[f64; 5]]) -> LossBreakdown {
        let mut acc = [0.0; 5];
        for p in parts {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        LossBreakdown::from_components(acc[0], acc[1], acc[2], acc[3], acc[4], &self.weights)
    }

    pub fn evaluate(&self, nets: &NetPair) -> Result<LossBreakdown> {
        nets.check()?;
        let parts = self
            .chunks()
            .into_par_iter()
            .map(|c| {
                let (tape, _, comps) = self.record_chunk(nets, c)?;
                Self::chunk_values(&tape, &comps)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.finish(&parts))
    }

    /// Loss and its gradient in [`NetPair::to_flat`] order.
    pub fn evaluate_with_gradient(&self, nets: &NetPair) -> Result<(LossBreakdown, Vec<f64>)> {
        nets.check()?;
        let parts = self
            .chunks()
            .into_par_iter()
            .map(|c| {
                let (tape, total, comps) = self.record_chunk(nets, c)?;
                let vals = Self::chunk_values(&tape, &comps)?;
                let adj = tape.backward(total)?;
                let mut g = Vec::with_capacity(nets.len());
                for a in adj.in_order() {
                    g.extend(a.iter());
                }
                Ok((vals, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; nets.len()];
        for (_, g) in &parts {
            for (a, v) in grad.iter_mut().zip(g) {
                *a += v;
            }
        }
        let vals: Vec<[f64; 5]> = parts.into_iter().map(|(v, _)| v).collect();
        let breakdown = self.finish(&vals);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", breakdown.total)));
        }
        Ok((breakdown, grad))
    }

    /// The whole loss on one tape. `leaves` are the parameter nodes in the order of
    /// [`NetPair::leaf_arrays`].
    pub fn record_on_leaves(&self, tape: &mut Tape, leaves: &[NodeId], nets: &NetPair) -> Result<NodeId> {
        nets.check()?;
        let nq = nets.q.layers.len();
        let ns = nets.sigma.layers.len();
        if leaves.len() != 2 * (nq + ns) {
            return Err(Error::shape(
                "parameter leaves",
                format!("{} leaves for {} arrays", leaves.len(), 2 * (nq + ns)),
            ));
        }
        let pairs = |ls: &[NodeId]| NetLeaves {
            layers: ls.chunks(2).map(|c| (c[0], c[1])).collect(),
        };
        let ql = pairs(&leaves[..2 * nq]);
        let sl = pairs(&leaves[2 * nq..]);
        self.record_all(tape, &ql, &sl)
    }

    fn record_all(&self, tape: &mut Tape, ql: &NetLeaves, sl: &NetLeaves) -> Result<NodeId> {
        let w = self.weights;
        let n_r = self.interior.nrows();
        let x = tape.constant(self.interior.clone());
        let q: NetEval = record_forward(tape, ql, x, true)?;
        let sigma = record_forward(tape, sl, x, true)?;
        let data = match (&self.interior_grad_z, &self.data_points, &self.data_grad_z) {
            (Some(gz), _, _) => {
                let gz = tape.constant(gz.clone());
                data_residual(
                    tape,
                    q.value,
                    sigma.value,
                    gz,
                    &self.bounds,
                    McScale::new(self.data_volume, n_r),
                )?
            }
            (None, Some(dp), Some(gz)) => {
                let xd = tape.constant(dp.clone());
                let qd = record_forward(tape, ql, xd, false)?;
                let sd = record_forward(tape, sl, xd, false)?;
                let gz = tape.constant(gz.clone());
                data_residual(
                    tape,
                    qd.value,
                    sd.value,
                    gz,
                    &self.bounds,
                    McScale::new(self.data_volume, dp.nrows()),
                )?
            }
            _ => return Err(Error::MissingData("observation")),
        };
        let f = tape.constant(self.f.clone());
        let scale = McScale::new(self.volume, n_r);
        let div = divergence_residual(tape, &sigma.jacobian, f, scale)?;
        let y = tape.constant(self.boundary.clone());
        let bscale = McScale::new(self.area, self.boundary.nrows());
        let bdry = match &self.boundary_data {
            BoundaryData::Flux { normals, g } => {
                let sb = record_forward(tape, sl, y, false)?;
                let nm = tape.constant(normals.clone());
                let g = tape.constant(g.clone());
                flux_bc_residual(tape, sb.value, nm, g, bscale)?
            }
            BoundaryData::DirichletFlux { target } => {
                let sb = record_forward(tape, sl, y, false)?;
                let t = tape.constant(target.clone());
                dirichlet_bc_residual(tape, sb.value, t, bscale)?
            }
            BoundaryData::DirichletQ { q_b } => {
                let qb = record_forward(tape, ql, y, false)?;
                let t = tape.constant(q_b.clone());
                q_bc_residual(tape, qb.value, t, bscale)?
            }
        };
        let semi = seminorm_penalty(tape, &q.jacobian, scale)?;
        let mut total = data;
        for (c, g) in [(div, w.gamma_sigma), (bdry, w.gamma_b), (semi, w.gamma_q)] {
            let t = tape.scale(c, g)?;
            total = tape.add(total, t)?;
        }
        if w.gamma_tv > 0.0 {
            let tv = tv_penalty(tape, &q.jacobian, scale, w.tv_epsilon)?;
            let t = tape.scale(tv, w.gamma_tv)?;
            total = tape.add(total, t)?;
        }
        Ok(total)
    }
}

pub fn assemble_neumann(
    nets: &NetPair,
    problem: &ProblemInstance,
    colloc: &CollocationSet,
    obs: &ObservationField,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    LossAssembly::neumann(problem, colloc, obs, weights)?.evaluate(nets)
}

pub fn assemble_dirichlet(
    nets: &NetPair,
    problem: &ProblemInstance,
    colloc: &CollocationSet,
    obs: &ObservationField,
    obs_boundary: Option<&ObservationField>,
    weights: LossWeights,
    variant: DirichletVariant,
) -> Result<LossBreakdown> {
    LossAssembly::dirichlet(problem, colloc, obs, obs_boundary, weights, variant)?.evaluate(nets)
}

/// Gradient of the assembled loss over all parameters of both networks.
pub fn loss_gradient(assembly: &LossAssembly, nets: &NetPair) -> Result<Vec<f64>> {
    Ok(assembly.evaluate_with_gradient(nets)?.1)
}

/// Largest relative mismatch between the reverse-mode gradient of the whole loss and
/// central differences with step `h`.
pub fn gradient_check(assembly: &LossAssembly, nets: &NetPair, h: f64) -> Result<f64> {
    check_gradient(
        |tape, leaves| assembly.record_on_leaves(tape, leaves, nets),
        &nets.leaf_arrays(),
        h,
    )
}

/// Evaluates `x -> P_A(q(x))` (or the raw value) on a batch without a tape.
pub fn q_values(
    nets: &NetPair,
    points: ArrayView2<f64>,
    bounds: Option<&AdmissibleBounds>,
) -> Result<Array1<f64>> {
    let v = crate::network::mlp_forward_batch(&nets.q_spec, &nets.q, points)?;
    let v = v.column(0).to_owned();
    Ok(match bounds {
        Some(b) => v.mapv(|x| b.project(x)),
        None => v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{constant_coefficient, make_example, synthesize_observation};
    use ndarray::array;

    fn small_pair(dim: usize, seed: u64) -> NetPair {
        NetPair::init(dim, &[5, 5], &[5, 5], seed).unwrap()
    }

    fn setup(id: &str, n: usize, seed: u64) -> (ProblemInstance, CollocationSet, ObservationField) {
        let p = make_example(id).unwrap();
        let partial = p.data_region.as_ref().map(|e| (e, n));
        let c = CollocationSet::sample(&p.domain, n, n, partial, seed).unwrap();
        let o = synthesize_observation(&p, c.observed(), 0.05, seed).unwrap();
        (p, c, o)
    }

    #[test]
    fn single_point_data_term() {
        let mut t = Tape::new();
        let q = t.constant(array![[1.0]]);
        let s = t.constant(array![[2.0, 0.0]]);
        let gz = t.constant(array![[1.0, 0.0]]);
        let b = AdmissibleBounds::new(0.5, 2.0).unwrap();
        let e = data_residual(&mut t, q, s, gz, &b, McScale::new(4.0, 1)).unwrap();
        assert_eq!(t.scalar(e).unwrap(), 4.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let mut t = Tape::new();
        let q = t.constant(Array2::zeros((0, 1)));
        let s = t.constant(Array2::zeros((0, 2)));
        let b = AdmissibleBounds::new(0.5, 2.0).unwrap();
        let r = data_residual(&mut t, q, s, s, &b, McScale::new(1.0, 0));
        assert!(matches!(r, Err(Error::EmptyPointSet(_))));
    }

    #[test]
    fn projected_values_hit_the_cutoff() {
        let mut t = Tape::new();
        let q = t.constant(array![[0.1], [3.0]]);
        let s = t.constant(array![[0.0], [0.0]]);
        let gz = t.constant(array![[1.0], [1.0]]);
        let b = AdmissibleBounds::new(0.5, 2.0).unwrap();
        let e = data_residual(&mut t, q, s, gz, &b, McScale::new(1.0, 2)).unwrap();
        assert_eq!(t.scalar(e).unwrap(), (0.25 + 4.0) / 2.0);
    }

    #[test]
    fn exact_pair_gives_zero_loss() {
        let p = constant_coefficient(2, 1.5, &[1.0, 2.0], BcKind::Neumann).unwrap();
        let c = CollocationSet::sample(&p.domain, 64, 32, None, 3).unwrap();
        let o = synthesize_observation(&p, c.observed(), 0.0, 3).unwrap();
        let mut nets = NetPair::init(2, &[4], &[4], 1).unwrap();
        for l in nets.q.layers.iter_mut().chain(nets.sigma.layers.iter_mut()) {
            l.weight.fill(0.0);
        }
        nets.q.layers.last_mut().unwrap().bias[0] = 1.5;
        nets.sigma.layers.last_mut().unwrap().bias.assign(&array![1.5, 3.0]);
        let w = LossWeights::new(1.0, 1.0, 1.0).with_tv(1.0);
        let a = LossAssembly::neumann(&p, &c, &o, w).unwrap();
        let (b, g) = a.evaluate_with_gradient(&nets).unwrap();
        assert!(b.total.abs() < 1e-14, "{b:?}");
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = LossWeights::new(0.7, 1.3, 0.01).with_tv(0.05);
        let (p, c, o) = setup("neu1", 16, 1);
        let a = LossAssembly::neumann(&p, &c, &o, w).unwrap();
        assert!(gradient_check(&a, &small_pair(2, 2), 1e-6).unwrap() < 1e-6);

        let (p, c, o) = setup("diri1", 16, 2);
        let ob = synthesize_observation(&p, c.boundary.view(), 0.05, 9).unwrap();
        for v in [DirichletVariant::FluxBc, DirichletVariant::QBc] {
            let a = LossAssembly::dirichlet(&p, &c, &o, Some(&ob), w, v).unwrap();
            assert!(gradient_check(&a, &small_pair(2, 4), 1e-6).unwrap() < 1e-6);
        }

        let (p, c, o) = setup("neupartial2d", 16, 3);
        let a = LossAssembly::neumann(&p, &c, &o, w).unwrap();
        assert!(gradient_check(&a, &small_pair(2, 5), 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn chunking_only_changes_rounding() {
        let w = LossWeights::new(1.0, 1.0, 0.01);
        let (p, c, o) = setup("neupartial3d", 100, 7);
        let nets = small_pair(3, 8);
        let a = LossAssembly::neumann(&p, &c, &o, w).unwrap();
        let (b1, g1) = a.evaluate_with_gradient(&nets).unwrap();
        let (b2, g2) = a.clone().with_chunk_size(7).evaluate_with_gradient(&nets).unwrap();
        assert!((b1.total - b2.total).abs() <= 1e-12 * b1.total.abs());
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
        // the single-tape recording agrees with the chunked one
        let mut t = Tape::new();
        let leaves: Vec<NodeId> = nets.leaf_arrays().into_iter().map(|v| t.parameter(v)).collect();
        let out = a.record_on_leaves(&mut t, &leaves, &nets).unwrap();
        assert!((t.scalar(out).unwrap() - b1.total).abs() <= 1e-12 * b1.total.abs());
        assert_eq!(a.evaluate(&nets).unwrap(), b1);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let (p, c, o) = setup("diri1", 8, 1);
        let w = LossWeights::new(1.0, 1.0, 0.0);
        let r = LossAssembly::dirichlet(&p, &c, &o, None, w, DirichletVariant::FluxBc);
        assert!(matches!(r, Err(Error::MissingData(_))));
        assert!(LossAssembly::neumann(&p, &c, &o, w).is_err());
        let (p, c, _) = setup("neu1", 8, 1);
        let wrong = synthesize_observation(&p, c.boundary.view(), 0.0, 1).unwrap();
        assert!(LossAssembly::neumann(&p, &c, &wrong, w).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut nets = small_pair(3, 1);
        let v: Vec<f64> = (0..nets.len()).map(|i| i as f64).collect();
        nets.assign_flat(&v).unwrap();
        assert_eq!(nets.to_flat(), v);
        assert!(nets.assign_flat(&v[1..]).is_err());
    }
}
