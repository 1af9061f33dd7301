//! Run configuration files.
//!
//! A config is flat TOML. Required keys: `example`, `gamma_sigma`, `gamma_b`, `gamma_q`,
//! `n_r`, `n_b`, `lr`, `dr`, `step`, `epochs`. Optional keys and their defaults:
//!
//! | key | default |
//! |---|---|
//! | `loss` | `"auto"` (`neumann`, `dirichlet-fluxbc`, `dirichlet-qbc`, `partial`) |
//! | `delta` | `0` |
//! | `gamma_tv` | `0` |
//! | `tv_epsilon` | `1e-6` |
//! | `n_data` | `n_r` |
//! | `seed` | `1` |
//! | `q_widths`, `sigma_widths` | `[26, 26, 26, 10]` |
//! | `trace_interval` | `100` |
//! | `export_resolution` | `256` |
//! | `out_dir` | `runs/<example>` |
//! | `resample` | `false` |
//!
//! Counts (`n_r`, `n_b`, `n_data`, `step`, `epochs`, `trace_interval`,
//! `export_resolution`) may be written in float notation such as `4e4` as long as the
//! value is a whole number. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossWeights, DEFAULT_TV_EPSILON};
use crate::optimize::{LossKind, TrainConfig};
use crate::problems::{make_example, ProblemInstance};

pub const DEFAULT_WIDTHS: [usize; 4] = [26, 26, 26, 10];
pub const DEFAULT_TRACE_INTERVAL: usize = 100;
pub const DEFAULT_EXPORT_RESOLUTION: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub example: String,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub delta: f64,
    pub gamma_sigma: f64,
    pub gamma_b: f64,
    pub gamma_q: f64,
    #[serde(default)]
    pub gamma_tv: f64,
    #[serde(default = "default_tv_epsilon")]
    pub tv_epsilon: f64,
    #[serde(deserialize_with = "count")]
    pub n_r: usize,
    #[serde(deserialize_with = "count")]
    pub n_b: usize,
    #[serde(
        default,
        deserialize_with = "optional_count",
        skip_serializing_if = "Option::is_none"
    )]
    pub n_data: Option<usize>,
    pub lr: f64,
    pub dr: f64,
    #[serde(deserialize_with = "count")]
    pub step: usize,
    #[serde(deserialize_with = "count")]
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_widths")]
    pub q_widths: Vec<usize>,
    #[serde(default = "default_widths")]
    pub sigma_widths: Vec<usize>,
    #[serde(default = "default_trace_interval", deserialize_with = "count")]
    pub trace_interval: usize,
    #[serde(default = "default_export_resolution", deserialize_with = "count")]
    pub export_resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub resample: bool,
}

fn default_tv_epsilon() -> f64 {
    DEFAULT_TV_EPSILON
}
fn default_seed() -> u64 {
    1
}
fn default_widths() -> Vec<usize> {
    DEFAULT_WIDTHS.to_vec()
}
fn default_trace_interval() -> usize {
    DEFAULT_TRACE_INTERVAL
}
fn default_export_resolution() -> usize {
    DEFAULT_EXPORT_RESOLUTION
}

struct CountVisitor;

impl Visitor<'_> for CountVisitor {
    type Value = usize;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a nonnegative whole number (e.g. 40000 or 4e4)")
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<usize, E> {
        usize::try_from(v).map_err(|_| E::custom(format!("count {v} is too large")))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<usize, E> {
        usize::try_from(v).map_err(|_| E::custom(format!("count must be >= 0, got {v}")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<usize, E> {
        if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
            Ok(v as usize)
        } else {
            Err(E::custom(format!("count must be a nonnegative whole number, got {v}")))
        }
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<usize, E> {
        let x: f64 = v
            .trim()
            .parse()
            .map_err(|_| E::custom(format!("not a count: {v:?}")))?;
        self.visit_f64(x)
    }
}

fn count<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    d.deserialize_any(CountVisitor)
}

fn optional_count<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
    count(d).map(Some)
}

/// Parses a count the way config files do (`4e4`, `40000`).
pub fn parse_count(s: &str) -> Result<usize> {
    CountVisitor
        .visit_str::<de::value::Error>(s)
        .map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Parses and validates TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma_sigma: self.gamma_sigma,
            gamma_b: self.gamma_b,
            gamma_q: self.gamma_q,
            gamma_tv: self.gamma_tv,
            tv_epsilon: self.tv_epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            dr: self.dr,
            step: self.step,
            epochs: self.epochs,
            seed: self.seed,
            n_r: self.n_r,
            n_b: self.n_b,
            n_data: self.n_data,
            weights: self.weights(),
            q_hidden: self.q_widths.clone(),
            sigma_hidden: self.sigma_widths.clone(),
            delta: self.delta,
            loss: self.loss,
            trace_interval: self.trace_interval,
            resample: self.resample,
        }
    }

    pub fn problem(&self) -> Result<ProblemInstance> {
        make_example(&self.example).map_err(|e| Error::Config(e.to_string()))
    }

    /// `out_dir`, or `runs/<example>`.
    pub fn output_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&self.example))
    }

    /// Checks ranges and that the example and loss kind fit together. Does not build the
    /// problem's data, so it is cheap even for grid-backed examples.
    pub fn validate(&self) -> Result<()> {
        if !crate::problems::EXAMPLE_IDS.contains(&self.example.as_str()) {
            return Err(Error::Config(format!("unknown example `{}`", self.example)));
        }
        if self.export_resolution < 2 {
            return Err(Error::Config(format!(
                "export_resolution must be >= 2, got {}",
                self.export_resolution
            )));
        }
        self.train_config().validate()
    }

    /// Overrides one key from its textual value, as on a sweep axis.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml())
            .map_err(|e| Error::Config(e.message().to_string()))?;
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        Self::from_toml_str(&toml::to_string(&table).expect("table serializes"))
    }
}

/// Reads a config file. A path that does not exist but names a bundled config (with or
/// without the `.cfg` suffix) resolves to the bundled copy.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    match std::fs::read_to_string(path) {
        Ok(text) => RunConfig::from_toml_str(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let name = path.to_string_lossy();
            match bundled_config(&name) {
                Some(text) => RunConfig::from_toml_str(text),
                None => Err(Error::io(path, e)),
            }
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

macro_rules! bundle {
    ($($name:literal),* $(,)?) => {
        /// Config files shipped with the crate, one per table column.
        pub const BUNDLED: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../configs/", $name, ".cfg")))),*
        ];
    };
}

bundle!(
    "neu1_exact",
    "neu1_noise10",
    "neu1_smoke",
    "discon_exact",
    "discon_noise10",
    "neu2_exact",
    "neu2_noise10",
    "neudim5_exact",
    "neudim5_noise10",
    "neupartial2d_exact",
    "neupartial2d_noise5",
    "neupartial2d_noise10",
    "neupartial3d_exact",
    "neupartial3d_noise10",
    "diri1_exact",
    "diri1_noise10",
    "diridisctn_exact",
    "diridisctn_noise10",
    "diri2_exact",
    "diri2_noise10",
    "diridim5_exact",
    "diridim5_noise10",
    "diripartial2d_exact",
    "diripartial2d_noise5",
    "diripartial2d_noise10",
    "diripartial3d_exact",
    "diripartial3d_noise10",
);

pub fn bundled_config(name: &str) -> Option<&'static str> {
    let stem = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.strip_suffix(".cfg").unwrap_or(s))?;
    BUNDLED.iter().find(|(n, _)| *n == stem).map(|(_, t)| *t)
}

/// Parsed bundled config by name.
pub fn bundled(name: &str) -> Result<RunConfig> {
    let text = bundled_config(name)
        .ok_or_else(|| Error::Config(format!("no bundled config named `{name}`")))?;
    RunConfig::from_toml_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neu1_exact_matches_table() {
        let c = bundled("neu1_exact").unwrap();
        assert_eq!(c.example, "neu1");
        assert_eq!((c.gamma_sigma, c.gamma_b, c.gamma_q), (10.0, 10.0, 1e-5));
        assert_eq!((c.n_r, c.n_b), (40_000, 4_000));
        assert_eq!((c.lr, c.dr, c.step, c.epochs), (2e-3, 0.7, 2000, 60_000));
        assert_eq!(c.delta, 0.0);
        assert_eq!(c.q_widths, vec![26, 26, 26, 10]);
    }

    #[test]
    fn neu1_noise_matches_bracketed_values() {
        let c = bundled("neu1_noise10.cfg").unwrap();
        assert_eq!((c.gamma_sigma, c.gamma_b, c.epochs), (100.0, 50.0, 30_000));
        assert_eq!((c.gamma_q, c.n_r, c.n_b, c.lr, c.dr, c.step), (1e-5, 40_000, 4_000, 2e-3, 0.7, 2000));
        assert_eq!(c.delta, 0.1);
    }

    #[test]
    fn every_bundled_config_is_valid() {
        for (name, text) in BUNDLED {
            let c = RunConfig::from_toml_str(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(name.starts_with(&c.example), "{name}");
        }
    }

    #[test]
    fn negative_gamma_q_is_a_range_error() {
        let text = bundled_config("neu1_exact").unwrap().replace("gamma_q = 1e-5", "gamma_q = -1");
        match RunConfig::from_toml_str(&text) {
            Err(Error::Config(m)) => assert!(m.contains("gamma_q"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let base = bundled_config("neu1_exact").unwrap();
        let extra = format!("{base}\nlearning_rate = 1e-3\n");
        assert!(matches!(RunConfig::from_toml_str(&extra), Err(Error::Config(_))));
        let missing = base.replace("lr = 2e-3\n", "");
        assert!(matches!(RunConfig::from_toml_str(&missing), Err(Error::Config(_))));
        let fractional = base.replace("n_r = 4e4", "n_r = 4.5");
        assert!(matches!(RunConfig::from_toml_str(&fractional), Err(Error::Config(_))));
        let unknown = base.replace("\"neu1\"", "\"neu9\"");
        assert!(matches!(RunConfig::from_toml_str(&unknown), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = bundled("neupartial2d_noise5").unwrap();
        c.n_data = Some(1234);
        c.out_dir = Some("somewhere/else".into());
        c.loss = LossKind::Partial;
        let again = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides() {
        let c = bundled("neu1_exact").unwrap();
        let o = c.with_override("gamma_q", "1e-3").unwrap();
        assert_eq!(o.gamma_q, 1e-3);
        assert_eq!(c.with_override("epochs", "2e3").unwrap().epochs, 2000);
        assert_eq!(c.with_override("loss", "neumann").unwrap().loss, LossKind::Neumann);
        assert!(c.with_override("bogus", "1").is_err());
        assert!(c.with_override("dr", "1.5").is_err());
        assert_eq!(parse_count("4e4").unwrap(), 40_000);
        assert!(parse_count("-3").is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let e = parse_config(Path::new("/nonexistent/missing.cfg")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
        assert!(parse_config(Path::new("neu1_exact.cfg")).is_ok());
    }
}
