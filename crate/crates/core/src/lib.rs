//! Reconstruction of a conductivity `q` in `-div(q grad u) = f` from one noisy
//! measurement of `grad u`, by least squares over tanh networks for `q` and the flux
//! `sigma = q grad u`.
//!
//! The usual entry points are [`config::RunConfig`] with [`run::execute`], or
//! [`optimize::train`] on a [`problems::ProblemInstance`] for programmatic use.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "openblas")]
#[link(name = "openblas")]
extern "C" {}

pub mod activation;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod forward_fd;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optimize;
pub mod problems;
pub mod rng;
pub mod run;

pub use config::{parse_config, RunConfig};
pub use error::{Error, Result};
pub use geometry::{BoxDomain, CollocationSet};
pub use loss::{DirichletVariant, LossAssembly, LossBreakdown, LossWeights, NetPair};
pub use metrics::{relative_l2_error, Quadrature};
pub use network::{AdmissibleBounds, MlpSpec, ParamSet};
pub use optimize::{lr_schedule, train, AdamState, LossKind, TrainConfig, TrainOutput};
pub use problems::{make_example, BcKind, ObservationField, ProblemInstance, EXAMPLE_IDS};
pub use run::{execute, Metrics};
