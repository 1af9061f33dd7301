//! Run directories: training driven by a [`RunConfig`], with its traces, checkpoints,
//! metrics and grid exports on disk.
//!
//! Layout of a run directory:
//!
//! ```text
//! run_meta.json          config, resolved training parameters, problem summary
//! trace.csv              epoch,lr,total,data,divergence,boundary,seminorm,tv,rel_error
//! checkpoints/epoch_NNNNNN.json
//! metrics.json           final errors and wall time
//! qtrue.csv qhat.csv qerr.csv   x1,x2,value on the export grid
//! diverged.json          only when training stopped on a non-finite loss
//! ```
//!
//! A checkpoint holds `{"epoch": n, "q": <net>, "sigma": <net>}` where each net is a
//! [`NetRecord`]: its spec and, per layer, `rows`, `cols`, row-major `weight`, `bias`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forward_fd::{self, FaceFluxes, Grid2D};
use crate::loss::{q_values, LossBreakdown, NetPair};
use crate::metrics::{export_grid, Quadrature};
use crate::network::NetRecord;
use crate::optimize::{reconstruction_error, train_with, TraceRow, TrainEvent};
use crate::problems::{BcKind, ProblemInstance};

pub const TRACE_HEADER: &str = "epoch,lr,total,data,divergence,boundary,seminorm,tv,rel_error";

#[derive(Serialize, Deserialize)]
pub struct PairRecord {
    pub epoch: usize,
    pub q: NetRecord,
    pub sigma: NetRecord,
}

impl PairRecord {
    pub fn new(epoch: usize, nets: &NetPair) -> Self {
        Self {
            epoch,
            q: NetRecord::new(&nets.q_spec, &nets.q),
            sigma: NetRecord::new(&nets.sigma_spec, &nets.sigma),
        }
    }

    pub fn into_nets(self) -> Result<(usize, NetPair)> {
        let (q_spec, q) = self.q.into_parts()?;
        let (sigma_spec, sigma) = self.sigma.into_parts()?;
        let nets = NetPair {
            q_spec,
            q,
            sigma_spec,
            sigma,
        };
        nets.check()?;
        Ok((self.epoch, nets))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_checkpoint(path: &Path, epoch: usize, nets: &NetPair) -> Result<()> {
    write_json(path, &PairRecord::new(epoch, nets))
}

pub fn read_checkpoint(path: &Path) -> Result<(usize, NetPair)> {
    read_json::<PairRecord>(path)?.into_nets()
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:06}.json"))
}

/// The checkpoint with the highest epoch in `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let epoch = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("epoch_"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
                best = Some((epoch, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or(Error::MissingData("no checkpoint in run directory"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub example: String,
    pub delta: f64,
    pub epoch: usize,
    /// Relative error of the projected reconstruction.
    pub e_final: f64,
    pub e_final_unprojected: f64,
    /// Projected error on the plane `x_3 = .. = x_d` at the domain centre, for `d > 2`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub e_cross_section: Option<f64>,
    pub quadrature: Quadrature,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss: Option<LossBreakdown>,
}

/// Errors of `nets` against the problem's conductivity on the default quadrature.
pub fn evaluate_nets(
    problem: &ProblemInstance,
    nets: &NetPair,
    epoch: usize,
    delta: f64,
    wall_time_s: f64,
) -> Result<Metrics> {
    let quad = Quadrature::default_for(problem.dim());
    let e_final = reconstruction_error(problem, nets, &quad, true)?;
    let e_final_unprojected = reconstruction_error(problem, nets, &quad, false)?;
    let e_cross_section = if problem.dim() > 2 {
        let at = slice_point(problem)[0];
        let cs = Quadrature::CrossSection {
            resolution: 256,
            at,
        };
        Some(reconstruction_error(problem, nets, &cs, true)?)
    } else {
        None
    };
    Ok(Metrics {
        example: problem.id.to_string(),
        delta,
        epoch,
        e_final,
        e_final_unprojected,
        e_cross_section,
        quadrature: quad,
        wall_time_s,
        final_loss: None,
    })
}

/// Fixed coordinates `x_3..x_d` of the export plane: the domain centre.
pub fn slice_point(problem: &ProblemInstance) -> Vec<f64> {
    problem.domain.center()[2.min(problem.dim())..].to_vec()
}

/// Writes `qtrue.csv`, `qhat.csv` (projected) and `qerr.csv` (`|qhat - qtrue|`).
pub fn export_fields(
    problem: &ProblemInstance,
    nets: &NetPair,
    resolution: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let slice = slice_point(problem);
    let bounds = problem.bounds;
    let domain = &problem.domain;
    export_grid(|x| Ok(problem.q_at(x)), domain, resolution, &slice, &dir.join("qtrue.csv"))?;
    export_grid(
        |x| q_values(nets, x, Some(&bounds)),
        domain,
        resolution,
        &slice,
        &dir.join("qhat.csv"),
    )?;
    export_grid(
        |x| {
            let hat = q_values(nets, x, Some(&bounds))?;
            Ok((&hat - &problem.q_at(x)).mapv(f64::abs))
        },
        domain,
        resolution,
        &slice,
        &dir.join("qerr.csv"),
    )
}

fn trace_line(r: &TraceRow) -> String {
    let l = &r.loss;
    let e = r.rel_error.map(|e| e.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.epoch, r.lr, l.total, l.data, l.divergence, l.boundary, l.seminorm, l.tv, e
    )
}

#[derive(Serialize)]
struct RunMeta<'a> {
    crate_version: &'static str,
    config: &'a RunConfig,
    train: crate::optimize::TrainConfig,
    dimension: usize,
    bc: BcKind,
    bounds: crate::network::AdmissibleBounds,
    rng: &'static str,
}

#[derive(Serialize)]
struct Diverged<'a> {
    epoch: usize,
    reason: &'a str,
    checkpoint: PathBuf,
}

/// Trains as configured and fills `out` with the run artifacts. On divergence the
/// directory still receives `diverged.json` and the last finite checkpoint before the
/// error is returned.
pub fn execute(config: &RunConfig, out: &Path) -> Result<Metrics> {
    execute_with(config, out, |_| {})
}

/// As [`execute`], also handing each trace row to `progress`.
pub fn execute_with<P>(config: &RunConfig, out: &Path, mut progress: P) -> Result<Metrics>
where
    P: FnMut(&TraceRow),
{
    config.validate()?;
    let problem = config.problem()?;
    let train = config.train_config();
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;

    write_json(
        &out.join("run_meta.json"),
        &RunMeta {
            crate_version: env!("CARGO_PKG_VERSION"),
            config,
            train: train.clone(),
            dimension: problem.dim(),
            bc: problem.bc,
            bounds: problem.bounds,
            rng: crate::rng::GENERATOR,
        },
    )?;

    let trace_path = out.join("trace.csv");
    let file = File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let mut trace = BufWriter::new(file);
    writeln!(trace, "{TRACE_HEADER}").map_err(|e| Error::io(&trace_path, e))?;

    let mut last_loss = None;
    let (nets, wall) = train_with(&problem, &train, |ev| match ev {
        TrainEvent::Trace(r) => {
            last_loss = Some(r.loss);
            progress(r);
            writeln!(trace, "{}", trace_line(r))
                .and_then(|_| trace.flush())
                .map_err(|e| Error::io(&trace_path, e))
        }
        TrainEvent::Checkpoint { epoch, nets } => {
            write_checkpoint(&checkpoint_path(out, epoch), epoch, nets)
        }
        TrainEvent::Diverged {
            epoch,
            nets,
            reason,
        } => {
            let checkpoint = checkpoint_path(out, epoch);
            write_checkpoint(&checkpoint, epoch, nets)?;
            write_json(
                &out.join("diverged.json"),
                &Diverged {
                    epoch,
                    reason,
                    checkpoint,
                },
            )
        }
    })?;
    drop(trace);

    let mut metrics = evaluate_nets(&problem, &nets, train.epochs, train.delta, wall)?;
    metrics.final_loss = last_loss;
    write_json(&out.join("metrics.json"), &metrics)?;
    export_fields(&problem, &nets, config.export_resolution, out)?;
    Ok(metrics)
}

/// Recomputes the metrics of a stored checkpoint.
pub fn evaluate_checkpoint(config: &RunConfig, checkpoint: &Path) -> Result<Metrics> {
    let problem = config.problem()?;
    let (epoch, nets) = read_checkpoint(checkpoint)?;
    evaluate_nets(&problem, &nets, epoch, config.delta, 0.0)
}

/// One finished job of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub values: Vec<String>,
    pub dir: PathBuf,
    pub metrics: Metrics,
}

/// Cartesian product over `axes` (key, values), one run directory per combination under
/// `out`, plus `sweep.csv`. `jobs > 1` runs that many trainings at once.
pub fn sweep(
    base: &RunConfig,
    axes: &[(String, Vec<String>)],
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;

    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("sweep needs at least one axis with values".into()));
    }
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    // Resolve every configuration before training anything.
    let mut plans = Vec::with_capacity(combos.len());
    for values in combos {
        let mut cfg = base.clone();
        let mut name = Vec::new();
        for ((key, _), v) in axes.iter().zip(&values) {
            cfg = cfg.with_override(key, v)?;
            name.push(format!("{key}={v}"));
        }
        plans.push((values, cfg, out.join(name.join(","))));
    }

    let run = |(values, cfg, dir): (Vec<String>, RunConfig, PathBuf)| -> Result<SweepRow> {
        let metrics = execute(&cfg, &dir)?;
        Ok(SweepRow { values, dir, metrics })
    };
    let rows: Vec<SweepRow> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| plans.into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        plans.into_iter().map(run).collect::<Result<_>>()?
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("sweep.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&path, e);
    let keys: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    writeln!(w, "{},e_final,e_final_unprojected,wall_time_s", keys.join(",")).map_err(io)?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.values.join(","),
            r.metrics.e_final,
            r.metrics.e_final_unprojected,
            r.metrics.wall_time_s
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

/// Finite-volume forward solve of a 2D Neumann example on an `n x n` grid with the
/// true conductivity. Returns `u` and its two gradient components.
pub fn forward_solve(problem: &ProblemInstance, n: usize) -> Result<(Grid2D, Grid2D, Grid2D)> {
    if problem.dim() != 2 || problem.bc != BcKind::Neumann {
        return Err(Error::InvalidArgument(format!(
            "forward solve needs a 2D Neumann example, {} is {}D {:?}",
            problem.id,
            problem.dim(),
            problem.bc
        )));
    }
    let d = &problem.domain;
    let bounds = [d.lower[0], d.upper[0], d.lower[1], d.upper[1]];
    let q = Grid2D::from_fn(n, n, bounds, |x, y| (problem.q_true)(&[x, y]))?;
    let f = Grid2D::from_fn(n, n, bounds, |x, y| (problem.source)(&[x, y]))?;
    let flux = problem
        .flux_bc
        .clone()
        .ok_or(Error::MissingData("flux boundary data g"))?;
    let g = FaceFluxes::from_fn(&q, |p, nrm| flux(&p, &nrm));
    let (f, _) = forward_fd::mean_correct(&f, &g);
    let u = forward_fd::solve_neumann(&q, &f, &g)?;
    let (gx, gy) = forward_fd::gradient_cells(&u)?;
    Ok((u, gx, gy))
}
