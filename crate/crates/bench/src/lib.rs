//! Shared fixtures for the benchmarks.

use qrecon_core::loss::{LossAssembly, LossWeights, NetPair};
use qrecon_core::optimize::{build_assembly, initial_nets, LossKind, TrainConfig};
use qrecon_core::problems::make_example;

/// Bundled-config style settings with `n_r` interior points and `n_r / 10`
/// boundary points, default architecture.
pub fn config(n_r: usize) -> TrainConfig {
    TrainConfig {
        lr0: 2e-3,
        dr: 0.7,
        step: 2000,
        epochs: 1,
        seed: 1,
        n_r,
        n_b: (n_r / 10).max(1),
        n_data: None,
        weights: LossWeights::new(10.0, 10.0, 1e-5),
        q_hidden: vec![26, 26, 26, 10],
        sigma_hidden: vec![26, 26, 26, 10],
        delta: 0.0,
        loss: LossKind::Auto,
        trace_interval: 1,
        resample: false,
    }
}

/// Assembled loss and freshly initialised networks.
pub fn fixture(example: &str, n_r: usize) -> (LossAssembly, NetPair) {
    let problem = make_example(example).expect("known example");
    let cfg = config(n_r);
    let assembly = build_assembly(&problem, &cfg, cfg.seed).expect("assembly");
    let nets = initial_nets(&problem, &cfg).expect("nets");
    (assembly, nets)
}
