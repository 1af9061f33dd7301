//! Axis-aligned boxes and uniform samplers for interior points, boundary points
//! with outward normals, and boxes with a hole cut out.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidArgument(format!(
                "box bounds of lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box needs lower < upper componentwise, got {lower:?} .. {upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// `(a, b)^d`.
    pub fn cube(dim: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a; dim], vec![b; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn side(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    /// Measure of the face orthogonal to axis `i`.
    pub fn face_measure(&self, i: usize) -> f64 {
        (0..self.dim()).filter(|&j| j != i).map(|j| self.side(j)).product()
    }

    /// `|dOmega| = sum_i 2 prod_{j != i} (b_j - a_j)`; for `d = 1` the two endpoints count 1 each.
    pub fn boundary_measure(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * self.face_measure(i)).sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// Inside the open box.
    pub fn contains_open(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (a, b))| *a < *v && *v < *b)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }
}

fn check_count(n: usize, what: &'static str) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyPointSet(what));
    }
    Ok(())
}

fn fill_interior<R: rand::RngCore>(domain: &BoxDomain, row: &mut [f64], rng: &mut R) {
    for (i, x) in row.iter_mut().enumerate() {
        // Redraw the measure-zero event of landing on the lower face.
        loop {
            let v = domain.lower[i] + domain.side(i) * rng::unit(rng);
            if v > domain.lower[i] && v < domain.upper[i] {
                *x = v;
                break;
            }
        }
    }
}

/// `n` i.i.d. uniform points in the open box, one per row.
pub fn sample_interior(domain: &BoxDomain, n: usize, seed: u64) -> Result<Array2<f64>> {
    check_count(n, "interior sampling")?;
    let mut rng = rng::stream(seed, rng::TAG_INTERIOR);
    let mut pts = Array2::zeros((n, domain.dim()));
    for mut row in pts.rows_mut() {
        fill_interior(domain, row.as_slice_mut().expect("standard layout"), &mut rng);
    }
    Ok(pts)
}

/// `n` uniform points on the boundary and their outward unit normals. A face is chosen
/// with probability proportional to its measure, then a point uniformly on it.
pub fn sample_boundary(
    domain: &BoxDomain,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_count(n, "boundary sampling")?;
    let d = domain.dim();
    let mut rng = rng::stream(seed, rng::TAG_BOUNDARY);
    let total = domain.boundary_measure();
    // Faces ordered (axis 0 low, axis 0 high, axis 1 low, ...).
    let mut cumulative = Vec::with_capacity(2 * d);
    let mut acc = 0.0;
    for i in 0..d {
        let m = domain.face_measure(i) / total;
        acc += m;
        cumulative.push(acc);
        acc += m;
        cumulative.push(acc);
    }
    let mut pts = Array2::zeros((n, d));
    let mut normals = Array2::zeros((n, d));
    for r in 0..n {
        let u = rng::unit(&mut rng);
        let face = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(2 * d - 1);
        let axis = face / 2;
        let high = face % 2 == 1;
        let mut row = pts.row_mut(r);
        fill_interior(domain, row.as_slice_mut().expect("standard layout"), &mut rng);
        row[axis] = if high { domain.upper[axis] } else { domain.lower[axis] };
        normals[[r, axis]] = if high { 1.0 } else { -1.0 };
    }
    Ok((pts, normals))
}

/// Rejection-sampled points of `domain` outside the open box `excluded`, together
/// with the number of proposals drawn.
pub fn sample_subdomain_counted(
    domain: &BoxDomain,
    excluded: &BoxDomain,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, u64)> {
    check_count(n, "subdomain sampling")?;
    let d = domain.dim();
    if excluded.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "excluded box of dimension {} in a {d}-dimensional domain",
            excluded.dim()
        )));
    }
    let covers = (0..d).all(|i| {
        excluded.lower[i] <= domain.lower[i] && excluded.upper[i] >= domain.upper[i]
    });
    if covers {
        return Err(Error::InvalidArgument(
            "excluded box covers the whole domain".into(),
        ));
    }
    let mut rng = rng::stream(seed, rng::TAG_DATA);
    let mut pts = Array2::zeros((n, d));
    let mut proposals = 0u64;
    let mut buf = vec![0.0; d];
    for mut row in pts.rows_mut() {
        loop {
            proposals += 1;
            fill_interior(domain, &mut buf, &mut rng);
            if !excluded.contains_open(&buf) {
                break;
            }
        }
        row.as_slice_mut().expect("standard layout").copy_from_slice(&buf);
    }
    Ok((pts, proposals))
}

/// Uniform points in `domain` minus the open box `excluded`.
pub fn sample_subdomain(
    domain: &BoxDomain,
    excluded: &BoxDomain,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    Ok(sample_subdomain_counted(domain, excluded, n, seed)?.0)
}

/// Interior, boundary and (for partial data) observation points of one run.
#[derive(Clone, Debug)]
pub struct CollocationSet {
    pub interior: Array2<f64>,
    pub boundary: Array2<f64>,
    pub normals: Array2<f64>,
    /// Points in the observed region when it is smaller than the domain.
    pub data: Option<Array2<f64>>,
}

impl CollocationSet {
    /// Draws all sets from independent streams of `seed`.
    pub fn sample(
        domain: &BoxDomain,
        n_r: usize,
        n_b: usize,
        partial: Option<(&BoxDomain, usize)>,
        seed: u64,
    ) -> Result<Self> {
        let interior = sample_interior(domain, n_r, seed)?;
        let (boundary, normals) = sample_boundary(domain, n_b, seed)?;
        let data = match partial {
            Some((excluded, n)) => Some(sample_subdomain(domain, excluded, n, seed)?),
            None => None,
        };
        Ok(Self {
            interior,
            boundary,
            normals,
            data,
        })
    }

    /// Points carrying the observation: the data set if present, else the interior set.
    pub fn observed(&self) -> ArrayView2<'_, f64> {
        self.data.as_ref().unwrap_or(&self.interior).view()
    }
}

/// Writes one row per point: coordinates, then the normal if given.
pub fn write_points_csv(
    path: &Path,
    points: ArrayView2<f64>,
    normals: Option<ArrayView2<f64>>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let d = points.ncols();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    if normals.is_some() {
        header.extend((1..=d).map(|i| format!("n{i}")));
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (r, row) in points.rows().into_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        if let Some(nm) = &normals {
            fields.extend(nm.row(r).iter().map(|v| format!("{v}")));
        }
        writeln!(w, "{}", fields.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
