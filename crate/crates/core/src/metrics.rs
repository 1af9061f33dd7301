//! Relative `L2` error of a reconstruction and grid exports for plotting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_interior, BoxDomain};
use crate::network::AdmissibleBounds;
use crate::rng;

const BATCH: usize = 4096;

/// How the `L2` integrals are approximated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Quadrature {
    /// Midpoint rule on `resolution^d` equal cells.
    Grid { resolution: usize },
    /// Midpoint rule on the plane through `x_3 = .. = x_d = at`, over the first two axes.
    CrossSection { resolution: usize, at: f64 },
    /// `n` uniform points drawn from the metric stream of `seed`.
    MonteCarlo { n: usize, seed: u64 },
}

impl Quadrature {
    /// 256^2 in 2D, 64^3 in 3D, 10^6 Monte Carlo points otherwise.
    pub fn default_for(dim: usize) -> Self {
        match dim {
            1 | 2 => Self::Grid { resolution: 256 },
            3 => Self::Grid { resolution: 64 },
            _ => Self::MonteCarlo {
                n: 1_000_000,
                seed: 0,
            },
        }
    }

    /// Cheap variant used for training traces.
    pub fn coarse_for(dim: usize) -> Self {
        match dim {
            1 | 2 => Self::Grid { resolution: 64 },
            3 => Self::Grid { resolution: 24 },
            _ => Self::MonteCarlo { n: 20_000, seed: 0 },
        }
    }

    fn point_count(&self, dim: usize) -> Result<usize> {
        match *self {
            Self::Grid { resolution } => {
                if resolution == 0 {
                    return Err(Error::InvalidArgument("grid resolution must be >= 1".into()));
                }
                resolution
                    .checked_pow(dim as u32)
                    .filter(|&n| n <= 1 << 28)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{resolution}^{dim} grid is too large; use Monte Carlo"
                        ))
                    })
            }
            Self::CrossSection { resolution, .. } => {
                if resolution == 0 || dim < 2 {
                    return Err(Error::InvalidArgument(
                        "cross-section needs resolution >= 1 and dimension >= 2".into(),
                    ));
                }
                Ok(resolution * resolution)
            }
            Self::MonteCarlo { n, .. } => {
                if n == 0 {
                    return Err(Error::EmptyPointSet("Monte Carlo quadrature"));
                }
                Ok(n)
            }
        }
    }
}

/// Cell-midpoint coordinates of entry `idx` on a `res^d` grid, first axis fastest.
fn midpoint(domain: &BoxDomain, res: usize, mut idx: usize, out: &mut [f64]) {
    for (i, x) in out.iter_mut().enumerate() {
        let k = idx % res;
        idx /= res;
        *x = domain.lower[i] + (k as f64 + 0.5) * domain.side(i) / res as f64;
    }
}

/// Quadrature points `start..end` (all of them for Monte Carlo, which is drawn up front).
fn grid_batch(domain: &BoxDomain, quad: &Quadrature, start: usize, end: usize) -> Array2<f64> {
    let d = domain.dim();
    let mut pts = Array2::zeros((end - start, d));
    for (r, idx) in (start..end).enumerate() {
        let mut row = pts.row_mut(r);
        let row = row.as_slice_mut().expect("standard layout");
        match *quad {
            Quadrature::Grid { resolution } => midpoint(domain, resolution, idx, row),
            Quadrature::CrossSection { resolution, at } => {
                let plane = BoxDomain {
                    lower: domain.lower[..2].to_vec(),
                    upper: domain.upper[..2].to_vec(),
                };
                midpoint(&plane, resolution, idx, &mut row[..2]);
                row[2..].fill(at);
            }
            Quadrature::MonteCarlo { .. } => unreachable!("Monte Carlo points are sampled"),
        }
    }
    pts
}

/// Sum that does not depend on the order of the terms.
fn order_free_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `||q_true - q_hat|| / ||q_true||` from values at equally weighted points.
pub fn relative_error_at(q_hat: &[f64], q_true: &[f64]) -> Result<f64> {
    if q_hat.len() != q_true.len() {
        return Err(Error::shape(
            "relative error",
            format!("{} vs {} values", q_hat.len(), q_true.len()),
        ));
    }
    let num = order_free_sum(q_hat.iter().zip(q_true).map(|(a, b)| (a - b) * (a - b)).collect());
    let den = order_free_sum(q_true.iter().map(|b| b * b).collect());
    if !(den > 0.0) {
        return Err(Error::InvalidArgument("exact conductivity has zero norm".into()));
    }
    let e = (num / den).sqrt();
    if !e.is_finite() {
        return Err(Error::NonFinite(format!("relative error {e}")));
    }
    Ok(e)
}

/// Relative `L2` error `||q_true - q_hat|| / ||q_true||`.
///
/// With `bounds` given, `q_hat` is cut off to the admissible interval first.
pub fn relative_l2_error<F, G>(
    q_hat: F,
    q_true: G,
    domain: &BoxDomain,
    bounds: Option<&AdmissibleBounds>,
    quad: &Quadrature,
) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> Result<Array1<f64>> + Sync,
    G: Fn(ArrayView2<f64>) -> Array1<f64> + Sync,
{
    let d = domain.dim();
    if let Quadrature::CrossSection { at, .. } = quad {
        for i in 2..d {
            if !(domain.lower[i] <= *at && *at <= domain.upper[i]) {
                return Err(Error::InvalidArgument(format!(
                    "cross-section coordinate {at} outside the domain"
                )));
            }
        }
    }
    let n = quad.point_count(d)?;
    let eval = |pts: ArrayView2<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut h = q_hat(pts)?;
        if let Some(b) = bounds {
            h.mapv_inplace(|v| b.project(v));
        }
        let t = q_true(pts);
        Ok((h.to_vec(), t.to_vec()))
    };
    let parts: Vec<(Vec<f64>, Vec<f64>)> = match quad {
        Quadrature::MonteCarlo { n, seed } => {
            let pts = sample_interior(domain, *n, rng::derive(*seed, rng::TAG_METRIC))?;
            (0..n.div_ceil(BATCH))
                .into_par_iter()
                .map(|b| {
                    let end = ((b + 1) * BATCH).min(*n);
                    eval(pts.slice(ndarray::s![b * BATCH..end, ..]))
                })
                .collect::<Result<_>>()?
        }
        _ => (0..n.div_ceil(BATCH))
            .into_par_iter()
            .map(|b| {
                let pts = grid_batch(domain, quad, b * BATCH, ((b + 1) * BATCH).min(n));
                eval(pts.view())
            })
            .collect::<Result<_>>()?,
    };
    let (mut h, mut t) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (a, b) in parts {
        h.extend(a);
        t.extend(b);
    }
    relative_error_at(&h, &t)
}

/// Node coordinates of the export grid: `resolution` equispaced nodes per axis on the
/// first two coordinates (first axis fastest), with the rest fixed to `slice`.
pub fn export_nodes(domain: &BoxDomain, resolution: usize, slice: &[f64]) -> Result<Array2<f64>> {
    let d = domain.dim();
    if d < 2 {
        return Err(Error::InvalidArgument("grid export needs dimension >= 2".into()));
    }
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "export resolution must be >= 2, got {resolution}"
        )));
    }
    if slice.len() != d - 2 {
        return Err(Error::InvalidArgument(format!(
            "{} slice coordinates for dimension {d}",
            slice.len()
        )));
    }
    for (i, &s) in slice.iter().enumerate() {
        if !(domain.lower[i + 2] <= s && s <= domain.upper[i + 2]) {
            return Err(Error::InvalidArgument(format!(
                "slice coordinate x{} = {s} outside the domain",
                i + 3
            )));
        }
    }
    let node = |i: usize, k: usize| {
        let t = k as f64 / (resolution - 1) as f64;
        if k == resolution - 1 {
            domain.upper[i]
        } else {
            domain.lower[i] + t * domain.side(i)
        }
    };
    let mut pts = Array2::zeros((resolution * resolution, d));
    for j in 0..resolution {
        for i in 0..resolution {
            let mut row = pts.row_mut(j * resolution + i);
            row[0] = node(0, i);
            row[1] = node(1, j);
            for (c, &s) in slice.iter().enumerate() {
                row[c + 2] = s;
            }
        }
    }
    Ok(pts)
}

/// Writes `x1,x2,value` rows for the given nodes and values.
pub fn write_grid_csv(path: &Path, nodes: ArrayView2<f64>, values: &[f64]) -> Result<()> {
    if nodes.nrows() != values.len() {
        return Err(Error::shape(
            "grid export",
            format!("{} nodes, {} values", nodes.nrows(), values.len()),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "x1,x2,value").map_err(io)?;
    for (r, v) in nodes.rows().into_iter().zip(values) {
        writeln!(w, "{},{},{}", r[0], r[1], v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Evaluates `field` on the export grid and writes it as CSV.
pub fn export_grid<F>(
    field: F,
    domain: &BoxDomain,
    resolution: usize,
    slice: &[f64],
    path: &Path,
) -> Result<()>
where
    F: Fn(ArrayView2<f64>) -> Result<Array1<f64>>,
{
    let nodes = export_nodes(domain, resolution, slice)?;
    let values = field(nodes.view())?;
    write_grid_csv(path, nodes.view(), values.as_slice().expect("contiguous"))
}

/// Reads back a grid CSV written by [`write_grid_csv`].
pub fn read_grid_csv(path: &Path) -> Result<Vec<[f64; 3]>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let (x, y, v): (f64, f64, f64) = rec?;
        out.push([x, y, v]);
    }
    Ok(out)
}
