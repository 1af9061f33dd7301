//! Cell-centred finite volumes for `-div(q grad u) = f` on a rectangle with flux
//! data `q du/dn = g`, normalised to zero mean.
//!
//! Cell `(i, j)` has centre `(xmin + (i + 1/2) h, ymin + (j + 1/2) h)`. Face
//! conductivities are harmonic means of the two neighbouring cells. Row `P` of the
//! system reads `sum_nb q_f (u_P - u_nb) = f_P h^2 + sum_{boundary faces of P} g h`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Cell values on a uniform grid of square cells. `values[[i, j]]` belongs to the cell
/// with `i` counting along `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub values: Array2<f64>,
}

impl Grid2D {
    pub fn new(bounds: [f64; 4], values: Array2<f64>) -> Result<Self> {
        let [xmin, xmax, ymin, ymax] = bounds;
        let (nx, ny) = values.dim();
        if nx * ny < 4 || nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid of {nx} x {ny} cells is too small"
            )));
        }
        if !(xmin < xmax && ymin < ymax) {
            return Err(Error::InvalidArgument(format!(
                "grid bounds [{xmin}, {xmax}] x [{ymin}, {ymax}]"
            )));
        }
        let hx = (xmax - xmin) / nx as f64;
        let hy = (ymax - ymin) / ny as f64;
        if (hx - hy).abs() > 1e-12 * hx {
            return Err(Error::InvalidArgument(format!(
                "cells must be square, got {hx} x {hy}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            xmin,
            xmax,
            ymin,
            ymax,
            values,
        })
    }

    pub fn from_fn(
        nx: usize,
        ny: usize,
        bounds: [f64; 4],
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut g = Self::new(bounds, Array2::zeros((nx, ny)))?;
        for i in 0..nx {
            for j in 0..ny {
                let (x, y) = g.center(i, j);
                g.values[[i, j]] = f(x, y);
            }
        }
        Ok(g)
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Array2<f64>) -> Self {
        assert_eq!(values.dim(), (self.nx, self.ny));
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn bounds(&self) -> [f64; 4] {
        [self.xmin, self.xmax, self.ymin, self.ymax]
    }

    pub fn h(&self) -> f64 {
        (self.xmax - self.xmin) / self.nx as f64
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let h = self.h();
        (
            self.xmin + (i as f64 + 0.5) * h,
            self.ymin + (j as f64 + 0.5) * h,
        )
    }

    pub fn mean(&self) -> f64 {
        self.values.sum() / (self.nx * self.ny) as f64
    }

    /// Header `nx=..,ny=..,xmin=..,xmax=..,ymin=..,ymax=..`, then `x,y,value` rows
    /// with `x` varying fastest.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(
            w,
            "nx={},ny={},xmin={},xmax={},ymin={},ymax={}",
            self.nx, self.ny, self.xmin, self.xmax, self.ymin, self.ymax
        )
        .map_err(io)?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y) = self.center(i, j);
                writeln!(w, "{x},{y},{}", self.values[[i, j]]).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let file = std::fs::File::open(path).map_err(io)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty grid file", path.display())))?
            .map_err(io)?;
        let mut nx = None;
        let mut ny = None;
        let mut b = [f64::NAN; 4];
        for field in header.split(',') {
            let (k, v) = field.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}: malformed header field `{field}`", path.display()))
            })?;
            let bad = || Error::Config(format!("{}: bad value in `{field}`", path.display()));
            match k.trim() {
                "nx" => nx = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                "ny" => ny = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
                key @ ("xmin" | "xmax" | "ymin" | "ymax") => {
                    let idx = ["xmin", "xmax", "ymin", "ymax"]
                        .iter()
                        .position(|n| *n == key)
                        .expect("matched above");
                    b[idx] = v.trim().parse::<f64>().map_err(|_| bad())?;
                }
                _ => return Err(bad()),
            }
        }
        let (nx, ny) = match (nx, ny) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "{}: header lacks nx or ny",
                    path.display()
                )))
            }
        };
        let mut values = Array2::zeros((nx, ny));
        let mut count = 0;
        for line in lines {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            if count >= nx * ny {
                return Err(Error::Config(format!("{}: too many rows", path.display())));
            }
            let v = line
                .rsplit(',')
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("{}: bad row `{line}`", path.display())))?;
            values[[count % nx, count / nx]] = v;
            count += 1;
        }
        if count != nx * ny {
            return Err(Error::Config(format!(
                "{}: expected {} rows, found {count}",
                path.display(),
                nx * ny
            )));
        }
        Self::new(b, values)
    }
}

/// Outward flux `g` at the boundary face midpoints. `west`/`east` run over `j`,
/// `south`/`north` over `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceFluxes {
    pub west: Vec<f64>,
    pub east: Vec<f64>,
    pub south: Vec<f64>,
    pub north: Vec<f64>,
}

impl FaceFluxes {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self {
            west: vec![0.0; grid.ny],
            east: vec![0.0; grid.ny],
            south: vec![0.0; grid.nx],
            north: vec![0.0; grid.nx],
        }
    }

    /// Samples `g(point, outward normal)` at face midpoints.
    pub fn from_fn(grid: &Grid2D, g: impl Fn([f64; 2], [f64; 2]) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for j in 0..grid.ny {
            let (_, y) = grid.center(0, j);
            out.west[j] = g([grid.xmin, y], [-1.0, 0.0]);
            out.east[j] = g([grid.xmax, y], [1.0, 0.0]);
        }
        for i in 0..grid.nx {
            let (x, _) = grid.center(i, 0);
            out.south[i] = g([x, grid.ymin], [0.0, -1.0]);
            out.north[i] = g([x, grid.ymax], [0.0, 1.0]);
        }
        out
    }

    fn check(&self, grid: &Grid2D) -> Result<()> {
        if self.west.len() != grid.ny
            || self.east.len() != grid.ny
            || self.south.len() != grid.nx
            || self.north.len() != grid.nx
        {
            return Err(Error::shape(
                "face fluxes",
                format!("face arrays do not match a {} x {} grid", grid.nx, grid.ny),
            ));
        }
        Ok(())
    }

    fn total(&self) -> f64 {
        self.west
            .iter()
            .chain(&self.east)
            .chain(&self.south)
            .chain(&self.north)
            .sum()
    }
}

/// `(sum f h^2 + sum g h, sum |f| h^2 + sum |g| h)`.
pub fn imbalance(f: &Grid2D, g: &FaceFluxes) -> (f64, f64) {
    let h = f.h();
    let h2 = h * h;
    let net = f.values.sum() * h2 + g.total() * h;
    let scale = f.values.iter().map(|v| v.abs()).sum::<f64>() * h2
        + g.west
            .iter()
            .chain(&g.east)
            .chain(&g.south)
            .chain(&g.north)
            .map(|v| v.abs())
            .sum::<f64>()
            * h;
    (net, scale)
}

/// Shifts `f` by a constant so the discrete data are compatible; returns the shift.
/// Needed when `f` and `g` are sampled from closed forms whose integrals cancel only
/// up to quadrature error.
pub fn mean_correct(f: &Grid2D, g: &FaceFluxes) -> (Grid2D, f64) {
    let (net, _) = imbalance(f, g);
    let h = f.h();
    let area = (f.nx * f.ny) as f64 * h * h;
    let shift = -net / area;
    (f.with_values(f.values.mapv(|v| v + shift)), shift)
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Face transmissibilities: `tx[[i, j]]` between cells `(i, j)` and `(i+1, j)`,
/// `ty[[i, j]]` between `(i, j)` and `(i, j+1)`.
struct Operator {
    tx: Array2<f64>,
    ty: Array2<f64>,
    diag: Array2<f64>,
}

impl Operator {
    fn new(q: &Array2<f64>) -> Self {
        let (nx, ny) = q.dim();
        let mut tx = Array2::zeros((nx.saturating_sub(1), ny));
        let mut ty = Array2::zeros((nx, ny.saturating_sub(1)));
        let mut diag = Array2::zeros((nx, ny));
        for i in 0..nx.saturating_sub(1) {
            for j in 0..ny {
                let t = harmonic(q[[i, j]], q[[i + 1, j]]);
                tx[[i, j]] = t;
                diag[[i, j]] += t;
                diag[[i + 1, j]] += t;
            }
        }
        for i in 0..nx {
            for j in 0..ny.saturating_sub(1) {
                let t = harmonic(q[[i, j]], q[[i, j + 1]]);
                ty[[i, j]] = t;
                diag[[i, j]] += t;
                diag[[i, j + 1]] += t;
            }
        }
        Self { tx, ty, diag }
    }

    fn apply(&self, u: &Array2<f64>, out: &mut Array2<f64>) {
        let (nx, ny) = u.dim();
        out.fill(0.0);
        for i in 0..nx.saturating_sub(1) {
            for j in 0..ny {
                let flux = self.tx[[i, j]] * (u[[i, j]] - u[[i + 1, j]]);
                out[[i, j]] += flux;
                out[[i + 1, j]] -= flux;
            }
        }
        for i in 0..nx {
            for j in 0..ny.saturating_sub(1) {
                let flux = self.ty[[i, j]] * (u[[i, j]] - u[[i, j + 1]]);
                out[[i, j]] += flux;
                out[[i, j + 1]] -= flux;
            }
        }
    }
}

/// Applies the discrete operator `u -> sum_nb q_f (u_P - u_nb)` (no `h` factors).
pub fn apply_operator(q: &Grid2D, u: &Grid2D) -> Array2<f64> {
    let op = Operator::new(&q.values);
    let mut out = Array2::zeros(u.values.dim());
    op.apply(&u.values, &mut out);
    out
}

/// Right-hand side `f h^2 + sum g h` per cell.
pub fn right_hand_side(f: &Grid2D, g: &FaceFluxes) -> Array2<f64> {
    let h = f.h();
    let mut b = f.values.mapv(|v| v * h * h);
    for j in 0..f.ny {
        b[[0, j]] += g.west[j] * h;
        b[[f.nx - 1, j]] += g.east[j] * h;
    }
    for i in 0..f.nx {
        b[[i, 0]] += g.south[i] * h;
        b[[i, f.ny - 1]] += g.north[i] * h;
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `||b - A u|| / ||b||` of the returned solution.
    pub relative_residual: f64,
}

fn mean(a: &Array2<f64>) -> f64 {
    a.sum() / a.len() as f64
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    Zip::from(a).and(b).for_each(|x, y| s += x * y);
    s
}

pub fn solve_neumann(q: &Grid2D, f: &Grid2D, g: &FaceFluxes) -> Result<Grid2D> {
    Ok(solve_neumann_with_stats(q, f, g)?.0)
}

/// Jacobi-preconditioned conjugate gradients on the singular system, iterating in the
/// mean-zero subspace.
pub fn solve_neumann_with_stats(
    q: &Grid2D,
    f: &Grid2D,
    g: &FaceFluxes,
) -> Result<(Grid2D, SolveStats)> {
    if q.values.dim() != f.values.dim() || q.bounds() != f.bounds() {
        return Err(Error::shape(
            "solve_neumann",
            format!("q grid {:?} vs f grid {:?}", q.values.dim(), f.values.dim()),
        ));
    }
    g.check(f)?;
    if let Some(bad) = q.values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "conductivity must be positive and finite, found {bad}"
        )));
    }
    let (net, scale) = imbalance(f, g);
    let tolerance = 1e-8 * scale.max(1.0);
    if net.abs() > tolerance {
        return Err(Error::IncompatibleData {
            imbalance: net,
            tolerance,
        });
    }

    let op = Operator::new(&q.values);
    let mut b = right_hand_side(f, g);
    let mb = mean(&b);
    b.mapv_inplace(|v| v - mb);
    let b_norm = dot(&b, &b).sqrt();
    let mut u = Array2::zeros(b.dim());
    if b_norm == 0.0 {
        return Ok((
            q.with_values(u),
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }

    let tol = 1e-12;
    let max_iter = 20 * (q.nx + q.ny) * 10 + 1000;
    let mut r = b.clone();
    let mut z = &r / &op.diag;
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = Array2::zeros(b.dim());
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        u.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let mr = mean(&r);
        r.mapv_inplace(|v| v - mr);
        if dot(&r, &r).sqrt() <= tol * b_norm {
            converged = true;
            break;
        }
        Zip::from(&mut z)
            .and(&r)
            .and(&op.diag)
            .for_each(|z, r, d| *z = r / d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        Zip::from(&mut p).and(&z).for_each(|p, z| *p = z + beta * *p);
    }
    let mu = mean(&u);
    u.mapv_inplace(|v| v - mu);
    op.apply(&u, &mut ap);
    let res = &b - &ap;
    let relative_residual = dot(&res, &res).sqrt() / b_norm;
    if !converged || relative_residual > 1e-10 {
        return Err(Error::NoConvergence {
            iterations,
            residual: relative_residual,
        });
    }
    Ok((
        q.with_values(u),
        SolveStats {
            iterations,
            relative_residual,
        },
    ))
}

/// Cell gradients `(du/dx, du/dy)`: central differences inside, one-sided second order
/// in the first and last cell of each line.
pub fn gradient_cells(u: &Grid2D) -> Result<(Grid2D, Grid2D)> {
    if u.nx < 3 || u.ny < 3 {
        return Err(Error::InvalidArgument(format!(
            "gradient needs at least 3 cells per axis, got {} x {}",
            u.nx, u.ny
        )));
    }
    let h = u.h();
    let v = &u.values;
    let (nx, ny) = v.dim();
    let mut gx = Array2::zeros((nx, ny));
    let mut gy = Array2::zeros((nx, ny));
    for j in 0..ny {
        gx[[0, j]] = (-3.0 * v[[0, j]] + 4.0 * v[[1, j]] - v[[2, j]]) / (2.0 * h);
        for i in 1..nx - 1 {
            gx[[i, j]] = (v[[i + 1, j]] - v[[i - 1, j]]) / (2.0 * h);
        }
        gx[[nx - 1, j]] =
            (3.0 * v[[nx - 1, j]] - 4.0 * v[[nx - 2, j]] + v[[nx - 3, j]]) / (2.0 * h);
    }
    for i in 0..nx {
        gy[[i, 0]] = (-3.0 * v[[i, 0]] + 4.0 * v[[i, 1]] - v[[i, 2]]) / (2.0 * h);
        for j in 1..ny - 1 {
            gy[[i, j]] = (v[[i, j + 1]] - v[[i, j - 1]]) / (2.0 * h);
        }
        gy[[i, ny - 1]] =
            (3.0 * v[[i, ny - 1]] - 4.0 * v[[i, ny - 2]] + v[[i, ny - 3]]) / (2.0 * h);
    }
    Ok((u.with_values(gx), u.with_values(gy)))
}

/// Bilinear interpolation between the four surrounding cell centres, held constant
/// across the half-cell margin along the boundary.
pub fn interpolate(values: &Grid2D, points: ArrayView2<f64>) -> Result<Array1<f64>> {
    if points.ncols() != 2 {
        return Err(Error::shape(
            "interpolate",
            format!("points have {} columns", points.ncols()),
        ));
    }
    let mut out = Array1::zeros(points.nrows());
    for (k, p) in points.rows().into_iter().enumerate() {
        out[k] = values.sample(p[0], p[1])?;
    }
    Ok(out)
}

impl Grid2D {
    /// Bilinear value at one point; see [`interpolate`].
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        let slack = 1e-12 * (self.xmax - self.xmin).max(self.ymax - self.ymin);
        if !(x >= self.xmin - slack
            && x <= self.xmax + slack
            && y >= self.ymin - slack
            && y <= self.ymax + slack)
        {
            return Err(Error::InvalidArgument(format!(
                "point ({x}, {y}) outside the grid"
            )));
        }
        let h = self.h();
        let locate = |t: f64, lo: f64, n: usize| -> (usize, usize, f64) {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let s = ((t - lo) / h - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (s.floor() as usize).min(n - 2);
            let mut w = s - i0 as f64;
            // Snap so that cell centres return their value untouched.
            if w < 1e-12 {
                w = 0.0;
            } else if w > 1.0 - 1e-12 {
                w = 1.0;
            }
            (i0, i0 + 1, w)
        };
        let (i0, i1, wx) = locate(x, self.xmin, self.nx);
        let (j0, j1, wy) = locate(y, self.ymin, self.ny);
        let v = &self.values;
        let bottom = (1.0 - wx) * v[[i0, j0]] + wx * v[[i1, j0]];
        let top = (1.0 - wx) * v[[i0, j1]] + wx * v[[i1, j1]];
        Ok((1.0 - wy) * bottom + wy * top)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::PI;

    const UNIT: [f64; 4] = [0.0, 1.0, 0.0, 1.0];

    #[test]
    fn linear_solution_is_exact() {
        let n = 32;
        let q = Grid2D::from_fn(n, n, UNIT, |_, _| 1.0).unwrap();
        let f = Grid2D::from_fn(n, n, UNIT, |_, _| 0.0).unwrap();
        let g = FaceFluxes::from_fn(&q, |_, nrm| nrm[0]);
        let (u, stats) = solve_neumann_with_stats(&q, &f, &g).unwrap();
        assert!(stats.relative_residual < 1e-10);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (x, _) = u.center(i, j);
                worst = worst.max((u.values[[i, j]] - (x - 0.5)).abs());
            }
        }
        assert!(worst < 1e-10, "{worst:e}");
        assert!(u.mean().abs() < 1e-12);
    }

    fn manufactured_error(n: usize) -> f64 {
        let q = Grid2D::from_fn(n, n, UNIT, |x, _| 1.0 + 0.5 * x).unwrap();
        let f = Grid2D::from_fn(n, n, UNIT, |x, y| {
            let u = (PI * x).cos() * (PI * y).cos();
            0.5 * PI * (PI * x).sin() * (PI * y).cos() + 2.0 * PI * PI * (1.0 + 0.5 * x) * u
        })
        .unwrap();
        let g = FaceFluxes::zeros(&q);
        let (f, _) = mean_correct(&f, &g);
        let u = solve_neumann(&q, &f, &g).unwrap();
        let exact = Grid2D::from_fn(n, n, UNIT, |x, y| (PI * x).cos() * (PI * y).cos()).unwrap();
        let m = exact.mean();
        let h = u.h();
        let e2: f64 = Zip::from(&u.values)
            .and(&exact.values)
            .fold(0.0, |acc, a, b| acc + (a - (b - m)).powi(2));
        (e2 * h * h).sqrt()
    }

    #[test]
    fn second_order_on_smooth_data() {
        let e1 = manufactured_error(32);
        let e2 = manufactured_error(64);
        assert!(e1 / e2 >= 3.7, "ratio {}", e1 / e2);
    }

    #[test]
    fn incompatible_data_rejected() {
        let q = Grid2D::from_fn(8, 8, UNIT, |_, _| 1.0).unwrap();
        let f = Grid2D::from_fn(8, 8, UNIT, |_, _| 1.0).unwrap();
        let g = FaceFluxes::zeros(&q);
        assert!(matches!(
            solve_neumann(&q, &f, &g),
            Err(Error::IncompatibleData { .. })
        ));
        let bad_q = Grid2D::from_fn(8, 8, UNIT, |x, _| x - 0.5).unwrap();
        let f0 = Grid2D::from_fn(8, 8, UNIT, |_, _| 0.0).unwrap();
        assert!(matches!(
            solve_neumann(&bad_q, &f0, &g),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn conservation_of_fluxes() {
        let n = 24;
        let q = Grid2D::from_fn(n, n, UNIT, |x, y| 1.0 + x * y).unwrap();
        let f = Grid2D::from_fn(n, n, UNIT, |x, y| (3.0 * x).sin() + y).unwrap();
        let g = FaceFluxes::from_fn(&q, |p, _| p[0] * p[1]);
        let (f, _) = mean_correct(&f, &g);
        let u = solve_neumann(&q, &f, &g).unwrap();
        let au = apply_operator(&q, &u);
        let h = q.h();
        // Net flux out of all cells through interior faces minus the boundary inflow.
        let net_out = au.sum() - g.total() * h;
        assert!((net_out - f.values.sum() * h * h).abs() < 1e-10);
    }

    #[test]
    fn gradient_cases() {
        let c = Grid2D::from_fn(6, 6, UNIT, |_, _| 3.0).unwrap();
        let (gx, gy) = gradient_cells(&c).unwrap();
        assert!(gx.values.iter().chain(gy.values.iter()).all(|v| *v == 0.0));
        let lin = Grid2D::from_fn(6, 6, UNIT, |x, _| x).unwrap();
        let (gx, gy) = gradient_cells(&lin).unwrap();
        assert!(gx.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(gy.values.iter().all(|v| v.abs() < 1e-12));
        // 4 cells per side: centres at 0.125, 0.375, 0.625, 0.875; use 5 so 0.5 is a centre
        let sq = Grid2D::from_fn(5, 5, UNIT, |x, _| x * x).unwrap();
        let (gx, _) = gradient_cells(&sq).unwrap();
        assert_eq!(sq.center(2, 2).0, 0.5);
        assert!((gx.values[[2, 2]] - 1.0).abs() < 1e-12);
        let tiny = Grid2D::from_fn(2, 2, UNIT, |_, _| 0.0).unwrap();
        assert!(gradient_cells(&tiny).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let g = Grid2D::from_fn(8, 8, [-1.0, 1.0, -1.0, 1.0], |x, y| x * y).unwrap();
        let (cx, cy) = g.center(3, 5);
        let at = interpolate(&g, array![[cx, cy]].view()).unwrap();
        assert_eq!(at[0], g.values[[3, 5]]);
        let pts = array![[0.1, 0.2], [-0.6, 0.33], [0.7, -0.7]];
        let v = interpolate(&g, pts.view()).unwrap();
        for (k, p) in pts.rows().into_iter().enumerate() {
            assert!((v[k] - p[0] * p[1]).abs() < 1e-12);
        }
        let c = Grid2D::from_fn(4, 4, UNIT, |_, _| 2.5).unwrap();
        let v = interpolate(&c, array![[0.0, 0.0], [1.0, 0.3], [0.5, 0.5]].view()).unwrap();
        assert!(v.iter().all(|x| *x == 2.5));
        assert!(interpolate(&c, array![[1.5, 0.5]].view()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = Grid2D::from_fn(5, 5, [-1.0, 1.0, -1.0, 1.0], |x, y| x + 0.1 * y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        let back = Grid2D::read_csv(&p).unwrap();
        assert_eq!(back, g);
        let first = std::fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("nx=5,ny=5,xmin=-1,xmax=1,ymin=-1,ymax=1\n"));
    }
}
