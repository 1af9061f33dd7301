//! Reverse-mode differentiation over a recorded tape of array primitives.
//!
//! Every node holds a dense row-major `rows x cols` array of `f64`. Losses are
//! batched: a row is a collocation point. Spatial derivatives of network outputs
//! are not obtained by nested differentiation; the network builder records the
//! input-Jacobian recursion itself using [`Primitive::TanhDeriv`], whose own
//! derivative is `tanh''`. A single reverse sweep then yields parameter gradients
//! of losses that contain `grad q` and `div sigma`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::activation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Array primitives understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// `a + b`, same shape.
    Add,
    /// `a - b`, same shape.
    Sub,
    /// Elementwise `a * b`, same shape.
    Mul,
    /// `c * a`.
    Scale(f64),
    /// Batched matrix-vector product: `x (n x k)`, `w (m x k)` gives `x w^T (n x m)`.
    MatVec,
    /// `a (n x m)` plus a `1 x m` row broadcast over all rows.
    BiasAdd,
    /// `s (n x 1)` times every column of `v (n x m)`.
    BroadcastMul,
    /// Column `k` of `a`, as `n x 1`.
    Column(usize),
    Tanh,
    /// `tanh'(z) = 1 - tanh(z)^2`; differentiates with `tanh''(z) = -2 tanh(z) tanh'(z)`.
    TanhDeriv,
    Square,
    /// Sum of all entries in row-major order, as `1 x 1`.
    Sum,
    /// `sqrt(a + eps^2) - eps`, elementwise.
    SqrtSmoothed(f64),
    /// Clamp to `[lower, upper]`; sub-derivative is 1 strictly inside, 0 elsewhere.
    Project { lower: f64, upper: f64 },
    /// Dense layer on stacked row blocks: `h (n x k)`, `w (m x k)`, bias `1 x m` gives
    /// `h w^T` with the bias added to the first of `blocks` row blocks only.
    Dense(usize),
    /// Tanh jet on stacked blocks `[z; y_1; ..]`: gives `[tanh z; tanh'(z) y_1; ..]`.
    /// Carries a value and its directional derivatives through one layer.
    JetTanh(usize),
    /// Row block `index` of `blocks` equal blocks.
    RowBlock { index: usize, blocks: usize },
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatVec
            | Primitive::BiasAdd
            | Primitive::BroadcastMul => 2,
            Primitive::Dense(_) => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatVec => "matvec",
            Primitive::BiasAdd => "bias_add",
            Primitive::BroadcastMul => "broadcast_mul",
            Primitive::Column(_) => "column",
            Primitive::Tanh => "tanh",
            Primitive::TanhDeriv => "tanh_deriv",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::SqrtSmoothed(_) => "sqrt_smoothed",
            Primitive::Project { .. } => "project",
            Primitive::Dense(_) => "dense",
            Primitive::JetTanh(_) => "jet_tanh",
            Primitive::RowBlock { .. } => "row_block",
        }
    }
}

/// Parses `name` or `name:arg` (e.g. `scale:0.5`, `column:1`, `project:1,2`,
/// `row_block:0,3`).
impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = || Error::UnknownPrimitive(s.to_string());
        let num = |a: Option<&str>| -> Result<f64> {
            a.and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad)
        };
        let count = |a: Option<&str>| -> Result<usize> {
            a.and_then(|v| v.trim().parse::<usize>().ok()).ok_or_else(bad)
        };
        Ok(match name {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "matvec" => Primitive::MatVec,
            "bias_add" => Primitive::BiasAdd,
            "broadcast_mul" => Primitive::BroadcastMul,
            "tanh" => Primitive::Tanh,
            "tanh_deriv" => Primitive::TanhDeriv,
            "square" => Primitive::Square,
            "sum" => Primitive::Sum,
            "scale" => Primitive::Scale(num(arg)?),
            "sqrt_smoothed" => Primitive::SqrtSmoothed(num(arg)?),
            "column" => Primitive::Column(count(arg)?),
            "dense" => Primitive::Dense(count(arg)?),
            "jet_tanh" => Primitive::JetTanh(count(arg)?),
            "row_block" => {
                let (i, k) = arg.and_then(|a| a.split_once(',')).ok_or_else(bad)?;
                Primitive::RowBlock {
                    index: count(Some(i))?,
                    blocks: count(Some(k))?,
                }
            }
            "project" => {
                let (lo, hi) = arg.and_then(|a| a.split_once(',')).ok_or_else(bad)?;
                Primitive::Project {
                    lower: num(Some(lo))?,
                    upper: num(Some(hi))?,
                }
            }
            _ => return Err(bad()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Parameter,
    Constant,
    Prim(Primitive),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: [NodeId; 3],
    value: Array2<f64>,
    /// `tanh(z)` for `TanhDeriv` when no sibling `Tanh` node exists; the mask for `Project`.
    aux: Option<Array2<f64>>,
    needs_grad: bool,
}

/// Single-writer record of array computations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    tanh_of: HashMap<NodeId, NodeId>,
}

fn same_shape(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

/// Forward rule shared by recording and replay. `tanh_cache` is `tanh(z)` for `TanhDeriv`.
fn forward(
    prim: Primitive,
    a: &Array2<f64>,
    b: Option<&Array2<f64>>,
    c: Option<&Array2<f64>>,
    tanh_cache: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let b = || b.expect("arity checked by caller");
    let c = || c.expect("arity checked by caller");
    Ok(match prim {
        Primitive::Add => {
            same_shape("add", a, b())?;
            (a + b(), None)
        }
        Primitive::Sub => {
            same_shape("sub", a, b())?;
            (a - b(), None)
        }
        Primitive::Mul => {
            same_shape("mul", a, b())?;
            (a * b(), None)
        }
        Primitive::Scale(c) => (a * c, None),
        Primitive::MatVec => {
            let w = b();
            if a.ncols() != w.ncols() {
                return Err(Error::shape(
                    "matvec",
                    format!("input {:?} against weights {:?}", a.dim(), w.dim()),
                ));
            }
            (a.dot(&w.t()), None)
        }
        Primitive::BiasAdd => {
            let bias = b();
            if bias.nrows() != 1 || bias.ncols() != a.ncols() {
                return Err(Error::shape(
                    "bias_add",
                    format!("{:?} plus row {:?}", a.dim(), bias.dim()),
                ));
            }
            (a + bias, None)
        }
        Primitive::BroadcastMul => {
            let v = b();
            if a.ncols() != 1 || a.nrows() != v.nrows() {
                return Err(Error::shape(
                    "broadcast_mul",
                    format!("{:?} times {:?}", a.dim(), v.dim()),
                ));
            }
            (v * a, None)
        }
        Primitive::Column(k) => {
            if k >= a.ncols() {
                return Err(Error::shape(
                    "column",
                    format!("column {k} of {:?}", a.dim()),
                ));
            }
            (a.column(k).to_owned().insert_axis(Axis(1)), None)
        }
        Primitive::Tanh => (a.mapv(activation::tanh), None),
        Primitive::TanhDeriv => match tanh_cache {
            Some(t) => (t.mapv(|t| 1.0 - t * t), None),
            None => {
                let t = a.mapv(activation::tanh);
                (t.mapv(|t| 1.0 - t * t), Some(t))
            }
        },
        Primitive::Square => (a.mapv(|v| v * v), None),
        Primitive::Sum => {
            let mut s = 0.0;
            for v in a.iter() {
                s += v;
            }
            (Array2::from_elem((1, 1), s), None)
        }
        Primitive::SqrtSmoothed(eps) => {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "sqrt_smoothed needs eps > 0, got {eps}"
                )));
            }
            let e2 = eps * eps;
            (a.mapv(|v| (v + e2).sqrt() - eps), None)
        }
        Primitive::Project { lower, upper } => {
            if !(lower < upper) {
                return Err(Error::InvalidArgument(format!(
                    "project needs lower < upper, got [{lower}, {upper}]"
                )));
            }
            if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("project input {bad}")));
            }
            let value = a.mapv(|v| v.clamp(lower, upper));
            let mask = a.mapv(|v| if v > lower && v < upper { 1.0 } else { 0.0 });
            (value, Some(mask))
        }
        Primitive::Dense(blocks) => {
            let (w, bias) = (b(), c());
            block_rows("dense", a, blocks)?;
            if a.ncols() != w.ncols() || bias.nrows() != 1 || bias.ncols() != w.nrows() {
                return Err(Error::shape(
                    "dense",
                    format!(
                        "input {:?}, weights {:?}, bias {:?}",
                        a.dim(),
                        w.dim(),
                        bias.dim()
                    ),
                ));
            }
            let mut out = a.dot(&w.t());
            block_bias_add(&mut out, bias.view(), blocks);
            (out, None)
        }
        Primitive::JetTanh(blocks) => {
            block_rows("jet_tanh", a, blocks)?;
            let (out, s) = jet_tanh(a, blocks);
            (out, Some(s))
        }
        Primitive::RowBlock { index, blocks } => {
            let n = block_rows("row_block", a, blocks)?;
            if index >= blocks {
                return Err(Error::shape(
                    "row_block",
                    format!("block {index} of {blocks}"),
                ));
            }
            (a.slice(s![index * n..(index + 1) * n, ..]).to_owned(), None)
        }
    })
}

/// Rows per block, or a shape error when `a` does not split evenly.
fn block_rows(op: &'static str, a: &Array2<f64>, blocks: usize) -> Result<usize> {
    if blocks == 0 || !a.nrows().is_multiple_of(blocks) {
        return Err(Error::shape(
            op,
            format!("{} rows in {blocks} blocks", a.nrows()),
        ));
    }
    Ok(a.nrows() / blocks)
}

/// Adds `bias` to the rows of the first of `blocks` row blocks.
pub(crate) fn block_bias_add(a: &mut Array2<f64>, bias: ArrayView2<f64>, blocks: usize) {
    let n = a.nrows() / blocks;
    let row = bias.row(0);
    for mut r in a.slice_mut(s![..n, ..]).rows_mut() {
        r += &row;
    }
}

/// `[tanh z; s y_1; ..]` with `s = 1 - tanh(z)^2`; also returns `s`.
pub(crate) fn jet_tanh(a: &Array2<f64>, blocks: usize) -> (Array2<f64>, Array2<f64>) {
    let len = a.len() / blocks;
    let src = a.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; len];
    out.reserve_exact(a.len() - len);
    activation::tanh_into(&src[..len], &mut out);
    let sech2: Vec<f64> = out.iter().map(|t| 1.0 - t * t).collect();
    for k in 1..blocks {
        out.extend(src[k * len..(k + 1) * len].iter().zip(&sech2).map(|(y, s)| s * y));
    }
    let m = a.ncols();
    (
        Array2::from_shape_vec(a.dim(), out).expect("shape preserved"),
        Array2::from_shape_vec((len / m.max(1), m), sech2).expect("shape preserved"),
    )
}

/// Adjoints of the parameter leaves after a reverse sweep.
#[derive(Clone, Debug)]
pub struct Adjoints {
    grads: Vec<(NodeId, Array2<f64>)>,
}

impl Adjoints {
    /// Gradient with respect to a parameter leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, leaf: NodeId) -> Option<&Array2<f64>> {
        self.grads
            .iter()
            .find(|(id, _)| *id == leaf)
            .map(|(_, g)| g)
    }

    /// All parameter gradients in leaf registration order.
    pub fn in_order(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.grads.iter().map(|(_, g)| g)
    }

    pub fn into_vec(self) -> Vec<Array2<f64>> {
        self.grads.into_iter().map(|(_, g)| g).collect()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf.
    pub fn parameter(&mut self, value: Array2<f64>) -> NodeId {
        let id = self.push(Op::Parameter, [NodeId(0); 3], value, None, true);
        self.params.push(id);
        id
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, [NodeId(0); 3], value, None, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    fn push(
        &mut self,
        op: Op,
        inputs: [NodeId; 3],
        value: Array2<f64>,
        aux: Option<Array2<f64>>,
        needs_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            aux,
            needs_grad,
        });
        id
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.node(id)?.value;
        if v.dim() != (1, 1) {
            return Err(Error::NonScalarOutput(id.0));
        }
        Ok(v[[0, 0]])
    }

    /// Appends a primitive node and computes its value.
    pub fn record(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != prim.arity() {
            return Err(Error::shape(
                prim.name(),
                format!("expected {} inputs, got {}", prim.arity(), inputs.len()),
            ));
        }
        for &i in inputs {
            self.node(i)?;
        }
        let a = inputs[0];
        let b = inputs.get(1).copied();
        let c = inputs.get(2).copied();
        let memo = match prim {
            Primitive::TanhDeriv => self.tanh_of.get(&a).copied(),
            _ => None,
        };
        let (value, aux) = forward(
            prim,
            &self.nodes[a.0].value,
            b.map(|b| &self.nodes[b.0].value),
            c.map(|c| &self.nodes[c.0].value),
            memo.map(|t| &self.nodes[t.0].value),
        )?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let ids = [a, b.unwrap_or(a), c.unwrap_or(a)];
        let id = self.push(Op::Prim(prim), ids, value, aux, needs_grad);
        if prim == Primitive::Tanh {
            self.tanh_of.entry(a).or_insert(id);
        }
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.record(Primitive::Scale(c), &[a])
    }

    pub fn matvec(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.record(Primitive::MatVec, &[x, w])
    }

    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Primitive::BiasAdd, &[a, bias])
    }

    pub fn broadcast_mul(&mut self, s: NodeId, v: NodeId) -> Result<NodeId> {
        self.record(Primitive::BroadcastMul, &[s, v])
    }

    pub fn column(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        self.record(Primitive::Column(k), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Tanh, &[a])
    }

    pub fn tanh_deriv(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::TanhDeriv, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn sqrt_smoothed(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.record(Primitive::SqrtSmoothed(eps), &[a])
    }

    pub fn project(&mut self, a: NodeId, lower: f64, upper: f64) -> Result<NodeId> {
        self.record(Primitive::Project { lower, upper }, &[a])
    }

    /// Sub-derivative mask of a `Project` node.
    pub fn dense(&mut self, h: NodeId, w: NodeId, bias: NodeId, blocks: usize) -> Result<NodeId> {
        self.record(Primitive::Dense(blocks), &[h, w, bias])
    }

    pub fn jet_tanh(&mut self, a: NodeId, blocks: usize) -> Result<NodeId> {
        self.record(Primitive::JetTanh(blocks), &[a])
    }

    pub fn row_block(&mut self, a: NodeId, index: usize, blocks: usize) -> Result<NodeId> {
        self.record(Primitive::RowBlock { index, blocks }, &[a])
    }

    pub fn project_mask(&self, id: NodeId) -> Option<&Array2<f64>> {
        match self.nodes.get(id.0)?.op {
            Op::Prim(Primitive::Project { .. }) => self.nodes[id.0].aux.as_ref(),
            _ => None,
        }
    }

    /// Recomputes every node from the leaves, in tape order.
    pub fn replay(&self) -> Result<Vec<Array2<f64>>> {
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        let mut tanh_of: HashMap<NodeId, NodeId> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Parameter | Op::Constant => node.value.clone(),
                Op::Prim(prim) => {
                    let [a, b, c] = node.inputs;
                    let memo = match prim {
                        Primitive::TanhDeriv => tanh_of.get(&a).map(|t| &values[t.0]),
                        _ => None,
                    };
                    let b = (prim.arity() >= 2).then(|| &values[b.0]);
                    let c = (prim.arity() == 3).then(|| &values[c.0]);
                    let (v, _) = forward(prim, &values[a.0], b, c, memo)?;
                    if prim == Primitive::Tanh {
                        tanh_of.entry(a).or_insert(NodeId(i));
                    }
                    v
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar node; returns gradients for every parameter leaf.
    pub fn backward(&self, output: NodeId) -> Result<Adjoints> {
        let out = self.node(output)?;
        if out.value.dim() != (1, 1) {
            return Err(Error::NonScalarOutput(output.0));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Op::Prim(prim) = node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let [a, b, c] = node.inputs;
            let na = &self.nodes[a.0];
            let nb = &self.nodes[b.0];
            let nc = &self.nodes[c.0];
            let want_a = na.needs_grad;
            let want_b = prim.arity() >= 2 && nb.needs_grad;
            let want_c = prim.arity() == 3 && nc.needs_grad;
            match prim {
                Primitive::Add => {
                    if want_b {
                        accumulate(&mut adj[b.0], g.clone());
                    }
                    if want_a {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Primitive::Sub => {
                    if want_b {
                        accumulate(&mut adj[b.0], -&g);
                    }
                    if want_a {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Primitive::Mul => {
                    if want_b {
                        accumulate(&mut adj[b.0], &g * &na.value);
                    }
                    if want_a {
                        accumulate(&mut adj[a.0], &g * &nb.value);
                    }
                }
                Primitive::Scale(c) => {
                    if want_a {
                        accumulate(&mut adj[a.0], g * c);
                    }
                }
                Primitive::MatVec => {
                    // out = x w^T
                    if want_b {
                        let slot = adj[b.0].get_or_insert_with(|| Array2::zeros(nb.value.dim()));
                        general_mat_mul(1.0, &g.t(), &na.value, 1.0, slot);
                    }
                    if want_a {
                        match &mut adj[a.0] {
                            Some(slot) => general_mat_mul(1.0, &g, &nb.value, 1.0, slot),
                            empty => *empty = Some(g.dot(&nb.value)),
                        }
                    }
                }
                Primitive::BiasAdd => {
                    if want_b {
                        let slot = adj[b.0].get_or_insert_with(|| Array2::zeros(nb.value.dim()));
                        let mut acc = slot.row_mut(0);
                        for row in g.rows() {
                            acc += &row;
                        }
                    }
                    if want_a {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Primitive::BroadcastMul => {
                    // out[i, j] = s[i] v[i, j]
                    if want_a {
                        let mut gs = Array2::zeros((g.nrows(), 1));
                        Zip::from(gs.rows_mut())
                            .and(g.rows())
                            .and(nb.value.rows())
                            .for_each(|mut o, gr, vr| {
                                let mut s = 0.0;
                                for (x, y) in gr.iter().zip(vr.iter()) {
                                    s += x * y;
                                }
                                o[0] = s;
                            });
                        accumulate(&mut adj[a.0], gs);
                    }
                    if want_b {
                        accumulate(&mut adj[b.0], &g * &na.value);
                    }
                }
                Primitive::Column(k) => {
                    if want_a {
                        let slot = adj[a.0].get_or_insert_with(|| Array2::zeros(na.value.dim()));
                        let mut col = slot.column_mut(k);
                        col += &g.column(0);
                    }
                }
                Primitive::Tanh => {
                    if want_a {
                        let mut d = g;
                        Zip::from(&mut d)
                            .and(&node.value)
                            .for_each(|d, &t| *d *= 1.0 - t * t);
                        accumulate(&mut adj[a.0], d);
                    }
                }
                Primitive::TanhDeriv => {
                    if want_a {
                        let t = match self.tanh_of.get(&a) {
                            Some(tid) if tid.0 < i => &self.nodes[tid.0].value,
                            _ => node.aux.as_ref().expect("tanh cache stored at record time"),
                        };
                        let mut d = g;
                        Zip::from(&mut d)
                            .and(t)
                            .and(&node.value)
                            .for_each(|d, &t, &s| *d *= -2.0 * t * s);
                        accumulate(&mut adj[a.0], d);
                    }
                }
                Primitive::Square => {
                    if want_a {
                        let mut d = g;
                        Zip::from(&mut d)
                            .and(&na.value)
                            .for_each(|d, &x| *d *= 2.0 * x);
                        accumulate(&mut adj[a.0], d);
                    }
                }
                Primitive::Sum => {
                    if want_a {
                        let gv = g[[0, 0]];
                        accumulate(&mut adj[a.0], Array2::from_elem(na.value.dim(), gv));
                    }
                }
                Primitive::SqrtSmoothed(eps) => {
                    if want_a {
                        let mut d = g;
                        Zip::from(&mut d)
                            .and(&node.value)
                            .for_each(|d, &y| *d /= 2.0 * (y + eps));
                        accumulate(&mut adj[a.0], d);
                    }
                }
                Primitive::Project { .. } => {
                    if want_a {
                        let mask = node.aux.as_ref().expect("mask stored at record time");
                        accumulate(&mut adj[a.0], g * mask);
                    }
                }
                Primitive::Dense(blocks) => {
                    // out = h w^T, bias on the first block
                    if want_c {
                        let n = g.nrows() / blocks;
                        let slot = adj[c.0].get_or_insert_with(|| Array2::zeros(nc.value.dim()));
                        let mut acc = slot.row_mut(0);
                        for row in g.slice(s![..n, ..]).rows() {
                            acc += &row;
                        }
                    }
                    if want_b {
                        match &mut adj[b.0] {
                            Some(slot) => general_mat_mul(1.0, &g.t(), &na.value, 1.0, slot),
                            empty => *empty = Some(g.t().dot(&na.value)),
                        }
                    }
                    if want_a {
                        match &mut adj[a.0] {
                            Some(slot) => general_mat_mul(1.0, &g, &nb.value, 1.0, slot),
                            empty => *empty = Some(g.dot(&nb.value)),
                        }
                    }
                }
                Primitive::JetTanh(blocks) => {
                    if want_a {
                        let sech2 = node.aux.as_ref().expect("tanh' stored at record time");
                        let n = sech2.nrows();
                        let mut d = g;
                        // d z = s (g_0 - 2 tanh(z) sum_k g_k y_k); d y_k = s g_k
                        let mut cross = if blocks > 1 {
                            &d.slice(s![n..2 * n, ..]) * &na.value.slice(s![n..2 * n, ..])
                        } else {
                            Array2::zeros(sech2.dim())
                        };
                        for k in 1..blocks {
                            if k > 1 {
                                Zip::from(&mut cross)
                                    .and(d.slice(s![k * n..(k + 1) * n, ..]))
                                    .and(na.value.slice(s![k * n..(k + 1) * n, ..]))
                                    .for_each(|c, &gk, &yk| *c += gk * yk);
                            }
                            Zip::from(d.slice_mut(s![k * n..(k + 1) * n, ..]))
                                .and(sech2)
                                .for_each(|gk, &s| *gk *= s);
                        }
                        Zip::from(d.slice_mut(s![..n, ..]))
                            .and(sech2)
                            .and(node.value.slice(s![..n, ..]))
                            .and(&cross)
                            .for_each(|g0, &s, &t, &c| *g0 = s * (*g0 - 2.0 * t * c));
                        accumulate(&mut adj[a.0], d);
                    }
                }
                Primitive::RowBlock { index, .. } => {
                    if want_a {
                        let n = g.nrows();
                        let slot = adj[a.0].get_or_insert_with(|| Array2::zeros(na.value.dim()));
                        let mut rows = slot.slice_mut(s![index * n..(index + 1) * n, ..]);
                        rows += &g;
                    }
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|&p| {
                let g = if p.0 <= output.0 { adj[p.0].take() } else { None };
                (p, g.unwrap_or_else(|| Array2::zeros(self.nodes[p.0].value.dim())))
            })
            .collect();
        Ok(Adjoints { grads })
    }
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `build` receives a fresh tape plus the leaf ids of `params` (registered in order)
/// and returns the scalar output node. The result is
/// `max |adjoint - fd| / max(1, |adjoint|)` over every parameter entry.
pub fn check_gradient<F>(build: F, params: &[Array2<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let eval = |ps: &[Array2<f64>]| -> Result<(Tape, NodeId, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = ps.iter().map(|p| tape.parameter(p.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        Ok((tape, out, leaves))
    };
    let value_at = |ps: &[Array2<f64>]| -> Result<f64> {
        let (tape, out, _) = eval(ps)?;
        let v = tape.scalar(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v} at perturbed parameters")));
        }
        Ok(v)
    };

    let (tape, out, leaves) = eval(params)?;
    let adj = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Array2<f64>> = params.to_vec();
    for (p, leaf) in leaves.iter().enumerate() {
        let grad = adj.wrt(*leaf).expect("leaf registered on this tape").clone();
        for (idx, &g) in grad.indexed_iter() {
            let orig = work[p][idx];
            work[p][idx] = orig + h;
            let plus = value_at(&work)?;
            work[p][idx] = orig - h;
            let minus = value_at(&work)?;
            work[p][idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((g - fd).abs() / g.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn s(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(s(0.0));
        let y = t.tanh(x).unwrap();
        assert_eq!(t.value(y)[[0, 0]], 0.0);
    }

    #[test]
    fn add_values() {
        let mut t = Tape::new();
        let a = t.constant(s(1.0));
        let b = t.constant(s(2.0));
        let c = t.record("add".parse().unwrap(), &[a, b]).unwrap();
        assert_eq!(t.scalar(c).unwrap(), 3.0);
    }

    #[test]
    fn matvec_identity() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.3, 0.7]]);
        let w = t.constant(Array2::eye(2));
        let y = t.matvec(x, w).unwrap();
        assert_eq!(t.value(y), &array![[0.3, 0.7]]);
    }

    #[test]
    fn unknown_primitive_and_shape_errors() {
        assert!(matches!(
            "conv2d".parse::<Primitive>(),
            Err(Error::UnknownPrimitive(_))
        ));
        assert!("scale".parse::<Primitive>().is_err());
        assert_eq!(
            "project:1,2".parse::<Primitive>().unwrap(),
            Primitive::Project { lower: 1.0, upper: 2.0 }
        );
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((3, 2)));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(t.matvec(a, a).is_ok());
        assert!(matches!(t.matvec(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            t.record(Primitive::Add, &[a]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn power_rule() {
        let mut t = Tape::new();
        let th = t.parameter(s(3.0));
        let y = t.square(th).unwrap();
        let adj = t.backward(y).unwrap();
        assert_eq!(adj.wrt(th).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut t = Tape::new();
        let th = t.parameter(s(0.0));
        let y = t.tanh(th).unwrap();
        let adj = t.backward(y).unwrap();
        assert_eq!(adj.wrt(th).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let th = t.parameter(Array2::zeros((2, 1)));
        assert!(matches!(t.backward(th), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn tanh_deriv_second_order() {
        // d/dz (1 - tanh^2 z) = -2 tanh z sech^2 z, with and without a sibling tanh node.
        for with_sibling in [false, true] {
            let z0 = 0.37;
            let mut t = Tape::new();
            let z = t.parameter(s(z0));
            if with_sibling {
                t.tanh(z).unwrap();
            }
            let y = t.tanh_deriv(z).unwrap();
            let adj = t.backward(y).unwrap();
            let th = z0.tanh();
            let expect = -2.0 * th * (1.0 - th * th);
            assert!((adj.wrt(z).unwrap()[[0, 0]] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn project_mask_blocks_gradient() {
        let mut t = Tape::new();
        let v = t.parameter(array![[1.5], [0.5], [3.0]]);
        let p = t.project(v, 1.0, 2.0).unwrap();
        assert_eq!(t.value(p), &array![[1.5], [1.0], [2.0]]);
        assert_eq!(t.project_mask(p).unwrap(), &array![[1.0], [0.0], [0.0]]);
        let total = t.sum(p).unwrap();
        let adj = t.backward(total).unwrap();
        assert_eq!(adj.wrt(v).unwrap(), &array![[1.0], [0.0], [0.0]]);
        let bad = t.constant(array![[f64::NAN]]);
        assert!(matches!(t.project(bad, 1.0, 2.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_check_quadratic() {
        let err = check_gradient(
            |t, p| {
                let sq = t.square(p[0])?;
                let sc = t.scale(sq, 1.7)?;
                t.sum(sc)
            },
            &[s(0.8)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err:e}");
    }

    #[test]
    fn gradient_check_constant_function() {
        let err = check_gradient(
            |t, _p| {
                let c = t.scalar_constant(4.0);
                t.sum(c)
            },
            &[array![[1.0, 2.0]]],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
        assert!(check_gradient(|t, p| t.sum(p[0]), &[s(1.0)], 0.0).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let x = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]];
        let w = array![[0.2, -0.1, 0.4], [0.6, 0.3, -0.5]];
        let bias = array![[0.05, -0.15]];
        let err = check_gradient(
            |t, p| {
                let z = t.matvec(p[0], p[1])?;
                let z = t.bias_add(z, p[2])?;
                let a = t.tanh(z)?;
                let d = t.tanh_deriv(z)?;
                let m = t.mul(a, d)?;
                let c0 = t.column(m, 0)?;
                let bm = t.broadcast_mul(c0, z)?;
                let sd = t.sub(bm, a)?;
                let ad = t.add(sd, d)?;
                let sq = t.square(ad)?;
                let sm = t.sqrt_smoothed(sq, 1e-2)?;
                let pr = t.project(z, -0.45, 0.45)?;
                let pr = t.scale(pr, 3.0)?;
                let tot = t.add(sm, pr)?;
                t.sum(tot)
            },
            &[x, w, bias],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn block_primitives_match_finite_differences() {
        // three stacked 2-row blocks
        let h = array![
            [0.3, -0.2],
            [0.1, 0.4],
            [1.0, 0.5],
            [-0.3, 0.2],
            [0.7, -1.1],
            [0.0, 0.9]
        ];
        let w = array![[0.2, -0.1], [0.6, 0.3], [-0.4, 0.8]];
        let bias = array![[0.05, -0.15, 0.3]];
        let err = check_gradient(
            |t, p| {
                let z = t.dense(p[0], p[1], p[2], 3)?;
                let j = t.jet_tanh(z, 3)?;
                let mut tot = None;
                for k in 0..3 {
                    let b = t.row_block(j, k, 3)?;
                    let b = t.scale(b, (k + 1) as f64)?;
                    let q = t.square(b)?;
                    tot = Some(match tot {
                        Some(acc) => t.add(acc, q)?,
                        None => q,
                    });
                }
                t.sum(tot.unwrap())
            },
            &[h, w, bias],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn jet_tanh_carries_directional_derivatives() {
        let mut t = Tape::new();
        let z = t.constant(array![[0.4, -0.3], [2.0, 1.0]]);
        let j = t.jet_tanh(z, 2).unwrap();
        let v = t.value(j);
        let t0 = activation::tanh(0.4);
        assert_eq!(v[[0, 0]], t0);
        assert_eq!(v[[1, 0]], (1.0 - t0 * t0) * 2.0);
        assert!(t.jet_tanh(z, 3).is_err());
        assert!(t.row_block(z, 2, 2).is_err());
        assert_eq!(
            "row_block:1,3".parse::<Primitive>().unwrap(),
            Primitive::RowBlock { index: 1, blocks: 3 }
        );
        assert_eq!("jet_tanh:2".parse::<Primitive>().unwrap(), Primitive::JetTanh(2));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let x = t.parameter(array![[0.3, -1.2], [2.0, 0.01]]);
        let w = t.parameter(array![[0.5, 0.25], [-1.0, 0.75]]);
        let z = t.matvec(x, w).unwrap();
        let a = t.tanh(z).unwrap();
        let d = t.tanh_deriv(z).unwrap();
        let m = t.mul(a, d).unwrap();
        let _ = t.sum(m).unwrap();
        let replayed = t.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            let orig = t.value(NodeId(i));
            assert!(v.iter().zip(orig.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
