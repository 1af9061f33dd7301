//! tanh multilayer perceptrons, their input Jacobians, and the admissible-set cutoff.
//!
//! Layer `l` maps `v -> tanh(A v + b)`; the last layer is affine. Weights `A` are
//! stored `out x in`, so a batch `X (n x in)` goes to `X A^T + b`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{block_bias_add, jet_tanh, NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Hidden widths `d_1 .. d_{L-1}`; empty for a single affine layer.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Max-norm bound on the weights from the approximation theory. Recorded, never enforced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bound: Option<f64>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden,
            output_dim,
            weight_bound: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default architecture: hidden widths 26, 26, 26, 10.
    pub fn default_for(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![26, 26, 26, 10],
            output_dim,
            weight_bound: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network widths must be >= 1, got {:?}",
                self.widths()
            )));
        }
        Ok(())
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `[d_0, d_1, ..., d_L]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths()
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        let widths = spec.widths();
        if self.layers.len() != spec.depth() {
            return Err(Error::shape(
                "params",
                format!("{} layers for depth {}", self.layers.len(), spec.depth()),
            ));
        }
        for (l, (layer, w)) in self.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weight.dim() != (w[1], w[0]) || layer.bias.len() != w[1] {
                return Err(Error::shape(
                    "params",
                    format!(
                        "layer {l}: weight {:?} bias {} for widths {} -> {}",
                        layer.weight.dim(),
                        layer.bias.len(),
                        w[0],
                        w[1]
                    ),
                ));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("network parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends entries layer by layer: weight row-major, then bias.
    pub fn extend_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        self.extend_flat(&mut v);
        v
    }

    /// Overwrites entries from `flat` in [`ParamSet::to_flat`] order; returns the count consumed.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.len() {
            return Err(Error::shape(
                "params",
                format!("flat vector of {} for {} parameters", flat.len(), self.len()),
            ));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(k)
    }
}

/// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamSet {
    let mut rng = rng::stream(seed, rng::TAG_INIT);
    let mut params = ParamSet::zeros(spec);
    for layer in &mut params.layers {
        let (fan_out, fan_in) = layer.weight.dim();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in layer.weight.iter_mut() {
            *w = bound * (2.0 * rng::unit(&mut rng) - 1.0);
        }
    }
    params
}

/// Rows per block in [`mlp_forward_batch`]; keeps the layer activations in cache.
const ROW_BLOCK: usize = 2048;

/// Batched forward pass, one point per row.
pub fn mlp_forward_batch(
    spec: &MlpSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_input(spec, params, x.ncols())?;
    if x.nrows() <= ROW_BLOCK {
        return Ok(forward_impl(params, x, false).0);
    }
    let mut out = Array2::zeros((x.nrows(), spec.output_dim));
    for (xb, mut ob) in x
        .axis_chunks_iter(Axis(0), ROW_BLOCK)
        .zip(out.axis_chunks_iter_mut(Axis(0), ROW_BLOCK))
    {
        ob.assign(&forward_impl(params, xb, false).0);
    }
    Ok(out)
}

/// Batched forward pass plus the input Jacobian as one `n x d_L` array per input coordinate.
pub fn mlp_forward_with_jacobian_batch(
    spec: &MlpSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    check_input(spec, params, x.ncols())?;
    Ok(forward_impl(params, x, true))
}

pub fn mlp_forward(spec: &MlpSpec, params: &ParamSet, x: &[f64]) -> Result<Array1<f64>> {
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    Ok(mlp_forward_batch(spec, params, xv)?.row(0).to_owned())
}

/// Value and `d_L x d` Jacobian at one point.
pub fn mlp_forward_with_jacobian(
    spec: &MlpSpec,
    params: &ParamSet,
    x: &[f64],
) -> Result<(Array1<f64>, Array2<f64>)> {
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    let (v, jac) = mlp_forward_with_jacobian_batch(spec, params, xv)?;
    let mut j = Array2::zeros((spec.output_dim, x.len()));
    for (k, jk) in jac.iter().enumerate() {
        j.column_mut(k).assign(&jk.row(0));
    }
    Ok((v.row(0).to_owned(), j))
}

fn check_input(spec: &MlpSpec, params: &ParamSet, d: usize) -> Result<()> {
    spec.validate()?;
    params.check(spec)?;
    if d != spec.input_dim {
        return Err(Error::shape(
            "mlp input",
            format!("point of dimension {d} for input_dim {}", spec.input_dim),
        ));
    }
    Ok(())
}

/// `[x; e_1; ..; e_d]`: the points followed by one constant block per input direction.
fn seed_jet(x: ArrayView2<f64>, with_jacobian: bool) -> Array2<f64> {
    let (n, d) = x.dim();
    if !with_jacobian {
        return x.to_owned();
    }
    let mut h = Array2::zeros((n * (d + 1), d));
    h.slice_mut(s![..n, ..]).assign(&x);
    for k in 0..d {
        h.slice_mut(s![(k + 1) * n..(k + 2) * n, k]).fill(1.0);
    }
    h
}

fn split_jet(h: Array2<f64>, blocks: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    if blocks == 1 {
        return (h, Vec::new());
    }
    let n = h.nrows() / blocks;
    let v = h.slice(s![..n, ..]).to_owned();
    let jac = (1..blocks)
        .map(|k| h.slice(s![k * n..(k + 1) * n, ..]).to_owned())
        .collect();
    (v, jac)
}

/// Value and input Jacobian are pushed through each layer as one stacked block matrix
/// `[v; J_1; ..; J_d]`: one product with `W^T`, the bias on the value block, then
/// `[tanh z; tanh'(z) J_k W^T]`. Shares its kernels with the tape recording below so
/// both paths agree bit for bit.
fn forward_impl(
    params: &ParamSet,
    x: ArrayView2<f64>,
    with_jacobian: bool,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let blocks = if with_jacobian { x.ncols() + 1 } else { 1 };
    let last = params.layers.len() - 1;
    let mut h = seed_jet(x, with_jacobian);
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = h.dot(&layer.weight.t());
        block_bias_add(&mut z, layer.bias.view().insert_axis(Axis(0)), blocks);
        h = if l == last { z } else { jet_tanh(&z, blocks).0 };
    }
    split_jet(h, blocks)
}

/// Parameter leaves of one network on a tape.
#[derive(Clone, Debug)]
pub struct NetLeaves {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl NetLeaves {
    /// Registers weights then bias (`1 x out`) of each layer as tape parameters.
    pub fn register(tape: &mut Tape, params: &ParamSet) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let w = tape.parameter(l.weight.clone());
                let b = tape.parameter(l.bias.clone().insert_axis(Axis(0)));
                (w, b)
            })
            .collect();
        Self { layers }
    }
}

/// Network output on a point batch: values (`n x d_L`) and, when requested, one
/// `n x d_L` node per input coordinate holding `d v / d x_k`.
#[derive(Clone, Debug)]
pub struct NetEval {
    pub value: NodeId,
    pub jacobian: Vec<NodeId>,
}

/// Records the forward pass and, optionally, the analytic input-Jacobian recursion
/// `J_k <- tanh'(z) * (J_k A^T)` on the tape. The input `x` is treated as data.
pub fn record_forward(
    tape: &mut Tape,
    net: &NetLeaves,
    x: NodeId,
    with_jacobian: bool,
) -> Result<NetEval> {
    let d = tape.value(x).ncols();
    let blocks = if with_jacobian { d + 1 } else { 1 };
    let last = net.layers.len() - 1;
    let mut h = if with_jacobian {
        let seeded = seed_jet(tape.value(x).view(), true);
        tape.constant(seeded)
    } else {
        x
    };
    for (l, &(w, b)) in net.layers.iter().enumerate() {
        let z = tape.dense(h, w, b, blocks)?;
        h = if l == last { z } else { tape.jet_tanh(z, blocks)? };
    }
    if blocks == 1 {
        return Ok(NetEval {
            value: h,
            jacobian: Vec::new(),
        });
    }
    let value = tape.row_block(h, 0, blocks)?;
    let jacobian = (1..blocks)
        .map(|k| tape.row_block(h, k, blocks))
        .collect::<Result<_>>()?;
    Ok(NetEval { value, jacobian })
}

/// Runs two networks side by side as one: first layer weights stacked, later layers
/// block-diagonal, biases stacked. The output is the concatenation of both outputs.
pub fn parallelize(
    a: (&MlpSpec, &ParamSet),
    b: (&MlpSpec, &ParamSet),
) -> Result<(MlpSpec, ParamSet)> {
    let (sa, pa) = a;
    let (sb, pb) = b;
    pa.check(sa)?;
    pb.check(sb)?;
    if sa.depth() != sb.depth() {
        return Err(Error::InvalidArgument(format!(
            "cannot parallelize depths {} and {}",
            sa.depth(),
            sb.depth()
        )));
    }
    if sa.input_dim != sb.input_dim {
        return Err(Error::InvalidArgument(format!(
            "cannot parallelize input dimensions {} and {}",
            sa.input_dim, sb.input_dim
        )));
    }
    let spec = MlpSpec {
        input_dim: sa.input_dim,
        hidden: sa.hidden.iter().zip(&sb.hidden).map(|(x, y)| x + y).collect(),
        output_dim: sa.output_dim + sb.output_dim,
        weight_bound: match (sa.weight_bound, sb.weight_bound) {
            (Some(x), Some(y)) => Some(x.max(y)),
            _ => None,
        },
    };
    let mut layers = Vec::with_capacity(spec.depth());
    for (l, (la, lb)) in pa.layers.iter().zip(&pb.layers).enumerate() {
        let (ra, ca) = la.weight.dim();
        let (rb, cb) = lb.weight.dim();
        let weight = if l == 0 {
            let mut w = Array2::zeros((ra + rb, ca));
            w.slice_mut(s![..ra, ..]).assign(&la.weight);
            w.slice_mut(s![ra.., ..]).assign(&lb.weight);
            w
        } else {
            let mut w = Array2::zeros((ra + rb, ca + cb));
            w.slice_mut(s![..ra, ..ca]).assign(&la.weight);
            w.slice_mut(s![ra.., ca..]).assign(&lb.weight);
            w
        };
        let mut bias = Array1::zeros(ra + rb);
        bias.slice_mut(s![..ra]).assign(&la.bias);
        bias.slice_mut(s![ra..]).assign(&lb.bias);
        layers.push(Layer { weight, bias });
    }
    Ok((spec, ParamSet { layers }))
}

/// Bounds `0 < c0 < c1` of the admissible conductivity set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleBounds {
    pub c0: f64,
    pub c1: f64,
}

impl AdmissibleBounds {
    pub fn new(c0: f64, c1: f64) -> Result<Self> {
        if !(c0 > 0.0 && c0 < c1 && c1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "admissible bounds need 0 < c0 < c1 < inf, got [{c0}, {c1}]"
            )));
        }
        Ok(Self { c0, c1 })
    }

    /// `P_A(v) = min(max(c0, v), c1)`.
    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.c0, self.c1)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.c0 + self.c1)
    }
}

/// Clamped values and the sub-derivative mask (1 strictly inside `(c0, c1)`, else 0).
pub fn project_admissible(
    v: ArrayView1<f64>,
    bounds: &AdmissibleBounds,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("projection input {bad}")));
    }
    let vals = v.mapv(|x| bounds.project(x));
    let mask = v.mapv(|x| if x > bounds.c0 && x < bounds.c1 { 1.0 } else { 0.0 });
    Ok((vals, mask))
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// JSON form of one network: its spec plus, per layer, `rows`, `cols`, the
/// row-major weight entries and the bias.
#[derive(Serialize, Deserialize)]
pub struct NetRecord {
    spec: MlpSpec,
    layers: Vec<LayerRecord>,
}

impl NetRecord {
    pub fn new(spec: &MlpSpec, params: &ParamSet) -> Self {
        Self {
            spec: spec.clone(),
            layers: params
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_parts(self) -> Result<(MlpSpec, ParamSet)> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for r in self.layers {
            let weight = Array2::from_shape_vec((r.rows, r.cols), r.weight)
                .map_err(|e| Error::shape("checkpoint", e.to_string()))?;
            layers.push(Layer {
                weight,
                bias: Array1::from(r.bias),
            });
        }
        let params = ParamSet { layers };
        self.spec.validate()?;
        params.check(&self.spec)?;
        Ok((self.spec, params))
    }
}
