//! Loss components on hand-built inputs, checked against plain arithmetic.

use ndarray::{array, Array2};
use qrecon_core::autodiff::{check_gradient, NodeId, Tape};
use qrecon_core::loss::*;
use qrecon_core::network::{
    mlp_forward, mlp_forward_with_jacobian, record_forward, AdmissibleBounds, Layer, MlpSpec,
    NetLeaves, ParamSet,
};
use qrecon_core::optimize::{lr_schedule, AdamState};

fn bounds() -> AdmissibleBounds {
    AdmissibleBounds::new(0.5, 2.0).unwrap()
}

/// Depth-1 (affine) network `x -> A x + b`.
fn affine(a: Array2<f64>, b: Vec<f64>) -> (MlpSpec, ParamSet) {
    let spec = MlpSpec::new(a.ncols(), vec![], a.nrows()).unwrap();
    let params = ParamSet {
        layers: vec![Layer {
            weight: a,
            bias: b.into(),
        }],
    };
    (spec, params)
}

fn affine_jacobian(tape: &mut Tape, p: &ParamSet, x: Array2<f64>) -> Vec<NodeId> {
    let leaves = NetLeaves::register(tape, p);
    let x = tape.constant(x);
    record_forward(tape, &leaves, x, true).unwrap().jacobian
}

#[test]
fn data_term_two_points() {
    let mut t = Tape::new();
    // residuals (1,0) and (1,sqrt 2): squared norms 1 and 3
    let q = t.constant(array![[1.0], [1.0]]);
    let s = t.constant(array![[2.0, 0.0], [1.0, 2f64.sqrt()]]);
    let gz = t.constant(array![[1.0, 0.0], [0.0, 0.0]]);
    let e = data_residual(&mut t, q, s, gz, &bounds(), McScale::new(4.0, 2)).unwrap();
    assert!((t.scalar(e).unwrap() - 8.0).abs() < 1e-14);

    let mut t = Tape::new();
    let q = t.constant(array![[1.3], [0.7]]);
    let s = t.constant(array![[1.3, 2.6], [0.7, 0.0]]);
    let gz = t.constant(array![[1.0, 2.0], [1.0, 0.0]]);
    let e = data_residual(&mut t, q, s, gz, &bounds(), McScale::new(1.0, 2)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 0.0);
}

#[test]
fn divergence_term() {
    // constant flux: zero Jacobian
    let (_, p) = affine(Array2::zeros((2, 2)), vec![0.3, -0.2]);
    let mut t = Tape::new();
    let jac = affine_jacobian(&mut t, &p, array![[0.1, 0.2]]);
    let f0 = t.constant(array![[0.0]]);
    let e = divergence_residual(&mut t, &jac, f0, McScale::new(4.0, 1)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 0.0);
    let f1 = t.constant(array![[1.0]]);
    let e = divergence_residual(&mut t, &jac, f1, McScale::new(4.0, 1)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 4.0);

    // affine flux with trace 2, f = -2
    let (_, p) = affine(array![[1.5, 7.0], [-3.0, 0.5]], vec![0.0, 1.0]);
    let mut t = Tape::new();
    let jac = affine_jacobian(&mut t, &p, array![[0.1, 0.2], [0.5, 0.9]]);
    let f = t.constant(array![[-2.0], [-2.0]]);
    let e = divergence_residual(&mut t, &jac, f, McScale::new(1.0, 2)).unwrap();
    assert!(t.scalar(e).unwrap().abs() < 1e-28);
}

#[test]
fn flux_boundary_term() {
    let mut t = Tape::new();
    let s = t.constant(array![[1.0, 0.0], [1.0, 0.0]]);
    let n = t.constant(array![[1.0, 0.0], [0.0, -1.0]]);
    let g = t.constant(array![[1.0], [0.0]]);
    let e = flux_bc_residual(&mut t, s, n, g, McScale::new(4.0, 2)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 0.0);

    let mut t = Tape::new();
    let s = t.constant(array![[1.5, 0.0]]);
    let n = t.constant(array![[1.0, 0.0]]);
    let g = t.constant(array![[1.0]]);
    let e = flux_bc_residual(&mut t, s, n, g, McScale::new(4.0, 1)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 1.0);
}

#[test]
fn dirichlet_boundary_terms() {
    let eval = |r: [f64; 2]| {
        let mut t = Tape::new();
        let s = t.constant(array![[0.25 + r[0], -1.0 + r[1]]]);
        let target = t.constant(array![[0.25, -1.0]]);
        let e = dirichlet_bc_residual(&mut t, s, target, McScale::new(4.0, 1)).unwrap();
        t.scalar(e).unwrap()
    };
    assert_eq!(eval([0.0, 0.0]), 0.0);
    assert_eq!(eval([1.0, 0.0]), 4.0);
    assert_eq!(eval([2.0, 0.0]), 4.0 * eval([1.0, 0.0]));

    let mut t = Tape::new();
    let q = t.constant(array![[1.2], [1.2]]);
    let qb = t.constant(array![[1.2], [1.2]]);
    let e = q_bc_residual(&mut t, q, qb, McScale::new(4.0, 2)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 0.0);
}

#[test]
fn seminorm_and_tv() {
    let (_, p) = affine(array![[1.0, 1.0]], vec![5.0]);
    let mut t = Tape::new();
    let jac = affine_jacobian(&mut t, &p, array![[0.3, 0.4]]);
    let e = seminorm_penalty(&mut t, &jac, McScale::new(4.0, 1)).unwrap();
    assert_eq!(t.scalar(e).unwrap(), 8.0);

    // the bias does not enter
    let (_, p2) = affine(array![[1.0, 1.0]], vec![-3.0]);
    let mut t2 = Tape::new();
    let jac2 = affine_jacobian(&mut t2, &p2, array![[0.3, 0.4]]);
    let e2 = seminorm_penalty(&mut t2, &jac2, McScale::new(4.0, 1)).unwrap();
    assert_eq!(t2.scalar(e2).unwrap(), 8.0);

    let tv = |grad: [f64; 2]| {
        let (_, p) = affine(array![[grad[0], grad[1]]], vec![1.0]);
        let mut t = Tape::new();
        let jac = affine_jacobian(&mut t, &p, array![[0.5, 0.5]]);
        let e = tv_penalty(&mut t, &jac, McScale::new(1.0, 1), 1e-6).unwrap();
        t.scalar(e).unwrap()
    };
    assert_eq!(tv([0.0, 0.0]), 0.0);
    assert!((tv([0.6, 0.8]) - 1.0).abs() < 1e-6);
    let mut last = -1.0;
    for k in 0..20 {
        let v = tv([0.1 * k as f64, 0.0]);
        assert!(v >= last);
        last = v;
    }
    let mut t = Tape::new();
    let jac = affine_jacobian(&mut t, &p, array![[0.5, 0.5]]);
    assert!(tv_penalty(&mut t, &jac, McScale::new(1.0, 1), 0.0).is_err());
}

#[test]
fn breakdown_total_is_the_weighted_sum() {
    let w = LossWeights::new(0.3, 7.0, 1e-3).with_tv(0.01);
    let b = LossBreakdown::from_components(1.25, 0.5, 2.0, 3.0, 0.75, &w);
    let expect = 1.25 + 0.3 * 0.5 + 7.0 * 2.0 + 1e-3 * 3.0 + 0.01 * 0.75;
    assert_eq!(b.total, expect);
    let zero = LossWeights::new(0.0, 0.0, 0.0);
    assert_eq!(LossBreakdown::from_components(1.25, 0.5, 2.0, 3.0, 0.75, &zero).total, 1.25);
}

#[test]
fn spec_level_network_examples() {
    let (spec, p) = affine(array![[1.0, 0.0], [0.0, 1.0]], vec![0.0, 0.0]);
    assert_eq!(mlp_forward(&spec, &p, &[0.3, 0.7]).unwrap().to_vec(), vec![0.3, 0.7]);
    let (_, j) = mlp_forward_with_jacobian(&spec, &p, &[0.3, 0.7]).unwrap();
    assert_eq!(j, array![[1.0, 0.0], [0.0, 1.0]]);

    let spec = MlpSpec::new(1, vec![1], 1).unwrap();
    let p = ParamSet {
        layers: vec![
            Layer { weight: array![[1.0]], bias: array![0.0] },
            Layer { weight: array![[1.0]], bias: array![0.0] },
        ],
    };
    let v = mlp_forward(&spec, &p, &[1.0]).unwrap()[0];
    assert!((v - 0.7615941559557649).abs() < 1e-15);
    let (_, j) = mlp_forward_with_jacobian(&spec, &p, &[0.0]).unwrap();
    assert_eq!(j[[0, 0]], 1.0);
}

#[test]
fn autodiff_spec_examples() {
    // theta^2 at 3
    let mut t = Tape::new();
    let th = t.parameter(array![[3.0]]);
    let sq = t.square(th).unwrap();
    let y = t.sum(sq).unwrap();
    assert_eq!(t.backward(y).unwrap().wrt(th).unwrap()[[0, 0]], 6.0);

    // quadratic loss checked by finite differences
    let err = check_gradient(
        |t, leaves| {
            let s = t.square(leaves[0])?;
            let s = t.scale(s, 2.5)?;
            t.sum(s)
        },
        &[array![[0.7]]],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn schedule_and_adam_examples() {
    let mut c = qrecon_core::config::bundled("neu1_exact").unwrap().train_config();
    c.epochs = 10;
    assert_eq!(lr_schedule(&c, 0), 2e-3);
    assert!((lr_schedule(&c, 2000) - 1.4e-3).abs() < 1e-15);
    assert!((lr_schedule(&c, 4000) - 9.8e-4).abs() < 1e-15);

    let mut s = AdamState::new(1);
    let mut p = [0.0];
    s.step(&mut p, &[1.0], 1e-3).unwrap();
    assert!((p[0] - (-9.99999990e-4)).abs() < 1e-12);
}
