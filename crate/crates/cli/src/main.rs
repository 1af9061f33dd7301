use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrecon_core::config::{parse_config, RunConfig};
use qrecon_core::problems::make_example;
use qrecon_core::run::{self, Metrics};
use qrecon_core::{Error, EXAMPLE_IDS};

#[derive(Parser)]
#[command(name = "qrecon", version, about = "Conductivity reconstruction from internal gradient data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one config and write a run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (default: `out_dir` from the config, else runs/<example>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-trace progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Recompute the errors of a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: CheckpointArgs,
    },
    /// Write qtrue.csv, qhat.csv and qerr.csv for a checkpoint.
    Export {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
        /// Nodes per axis (default: `export_resolution` from the config).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Finite-volume solve of a 2D Neumann example; writes u.csv, grad_x.csv, grad_y.csv.
    ForwardSolve {
        #[arg(long, default_value = "discon")]
        example: String,
        /// Cells per axis.
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cartesian sweep over config keys, one run directory per combination.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "axis", required = true, value_parser = parse_axis)]
        axes: Vec<(String, Vec<String>)>,
        #[arg(long)]
        out: PathBuf,
        /// Trainings to run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the example catalogue.
    ListExamples,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or the name of a bundled config such as neu1_exact.cfg.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    trace_interval: Option<usize>,
    /// Override any config key, e.g. `--set epochs=5e3`; repeatable.
    #[arg(long = "set", value_parser = parse_pair)]
    overrides: Vec<(String, String)>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the latest checkpoint of this run directory.
    #[arg(long)]
    run: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn parse_axis(s: &str) -> Result<(String, Vec<String>), String> {
    let (k, v) = parse_pair(s)?;
    let values: Vec<String> = v.split(',').map(|x| x.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(format!("empty value in axis `{s}`"));
    }
    Ok((k, values))
}

/// Config problems exit with 2, everything else with 1.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownExample(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = parse_config(&self.config).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e.to_string()),
            other => other.into(),
        })?;
        let mut set = |key: &str, value: String| -> Result<(), Failure> {
            cfg = cfg.with_override(key, &value)?;
            Ok(())
        };
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(d) = self.delta {
            set("delta", format!("{d:?}"))?;
        }
        if let Some(t) = self.trace_interval {
            set("trace_interval", t.to_string())?;
        }
        for (k, v) in &self.overrides {
            set(k, v.clone())?;
        }
        Ok(cfg)
    }
}

fn checkpoint_file(source: &CheckpointArgs) -> Result<PathBuf, Failure> {
    match (&source.checkpoint, &source.run) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(dir)) => Ok(run::latest_checkpoint(dir)?),
        (None, None) => unreachable!("clap requires one of the two"),
    }
}

fn print_metrics(m: &Metrics) {
    println!("{}", serde_json::to_string_pretty(m).expect("metrics serialize"));
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { cfg, out, quiet } => {
            let config = cfg.load()?;
            let dir = out.unwrap_or_else(|| config.output_dir());
            eprintln!("run {} -> {}", config.example, dir.display());
            let metrics = run::execute_with(&config, &dir, |r| {
                if !quiet {
                    let e = r.rel_error.map_or("-".into(), |e| format!("{e:.4e}"));
                    eprintln!(
                        "epoch {:>7}  lr {:.3e}  loss {:.4e}  e {}",
                        r.epoch, r.lr, r.loss.total, e
                    );
                }
            })?;
            print_metrics(&metrics);
        }
        Command::Evaluate { cfg, source } => {
            let config = cfg.load()?;
            let path = checkpoint_file(&source)?;
            print_metrics(&run::evaluate_checkpoint(&config, &path)?);
        }
        Command::Export {
            cfg,
            source,
            out,
            resolution,
        } => {
            let config = cfg.load()?;
            let path = checkpoint_file(&source)?;
            let (_, nets) = run::read_checkpoint(&path)?;
            let problem = config.problem()?;
            let res = resolution.unwrap_or(config.export_resolution);
            run::export_fields(&problem, &nets, res, &out)?;
            println!("wrote qtrue.csv, qhat.csv, qerr.csv to {}", out.display());
        }
        Command::ForwardSolve { example, n, out } => {
            let problem = make_example(&example).map_err(|e| Failure::Config(e.to_string()))?;
            let (u, gx, gy) = run::forward_solve(&problem, n)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            for (name, grid) in [("u.csv", &u), ("grad_x.csv", &gx), ("grad_y.csv", &gy)] {
                grid.write_csv(&out.join(name))?;
            }
            println!("wrote u.csv, grad_x.csv, grad_y.csv ({n}x{n}) to {}", out.display());
        }
        Command::Sweep {
            cfg,
            axes,
            out,
            jobs,
        } => {
            let config = cfg.load()?;
            let rows = run::sweep(&config, &axes, &out, jobs.max(1))?;
            for r in rows {
                println!(
                    "{}  e_final {:.4e}  ({:.1} s)",
                    r.values.join(" "),
                    r.metrics.e_final,
                    r.metrics.wall_time_s
                );
            }
            println!("summary in {}", out.join("sweep.csv").display());
        }
        Command::ListExamples => {
            for id in EXAMPLE_IDS {
                println!("{id}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
