use ndarray::{Array1, Array2};
use proptest::prelude::*;
use qrecon_core::autodiff::Tape;
use qrecon_core::config::{bundled, RunConfig};
use qrecon_core::geometry::{sample_boundary, sample_interior, BoxDomain};
use qrecon_core::loss::{data_residual, McScale};
use qrecon_core::metrics::{relative_error_at, relative_l2_error, Quadrature};
use qrecon_core::network::{
    init_params, mlp_forward, mlp_forward_batch, mlp_forward_with_jacobian, parallelize,
    project_admissible, AdmissibleBounds, MlpSpec,
};
use qrecon_core::optimize::{lr_schedule, AdamState, LossKind};
use qrecon_core::problems::make_example;

fn bounds_strategy() -> impl Strategy<Value = AdmissibleBounds> {
    (0.01f64..5.0, 0.01f64..5.0).prop_map(|(a, w)| AdmissibleBounds::new(a, a + w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutoff_is_stable_idempotent_and_non_expansive(
        b in bounds_strategy(),
        w in prop::collection::vec(-20.0f64..20.0, 1..40),
        t in 0.0f64..=1.0,
    ) {
        let v = Array1::from(w.clone());
        let (p, mask) = project_admissible(v.view(), &b).unwrap();
        let (pp, _) = project_admissible(p.view(), &b).unwrap();
        prop_assert_eq!(&pp, &p);
        let inside = b.c0 + t * (b.c1 - b.c0);
        for i in 0..w.len() {
            prop_assert!(p[i] >= b.c0 && p[i] <= b.c1);
            prop_assert!((p[i] - inside).abs() <= (w[i] - inside).abs());
            let strictly = w[i] > b.c0 && w[i] < b.c1;
            prop_assert_eq!(mask[i], if strictly { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn parallelized_net_is_exact(seed in 0u64..1000, wa in 1usize..7, wb in 1usize..7) {
        let sa = MlpSpec::new(2, vec![wa, wa + 1], 1).unwrap();
        let sb = MlpSpec::new(2, vec![wb, 3], 2).unwrap();
        let pa = init_params(&sa, seed);
        let pb = init_params(&sb, seed + 1);
        let (s, p) = parallelize((&sa, &pa), (&sb, &pb)).unwrap();
        prop_assert_eq!(s.widths(), vec![2, wa + wb, wa + 4, 3]);
        let x = sample_interior(&BoxDomain::cube(2, -1.0, 1.0).unwrap(), 100, seed).unwrap();
        let both = mlp_forward_batch(&s, &p, x.view()).unwrap();
        let a = mlp_forward_batch(&sa, &pa, x.view()).unwrap();
        let b = mlp_forward_batch(&sb, &pb, x.view()).unwrap();
        for r in 0..100 {
            prop_assert_eq!(both[[r, 0]].to_bits(), a[[r, 0]].to_bits());
            prop_assert_eq!(both[[r, 1]].to_bits(), b[[r, 0]].to_bits());
            prop_assert_eq!(both[[r, 2]].to_bits(), b[[r, 1]].to_bits());
        }
    }

    #[test]
    fn input_jacobian_matches_finite_differences(
        seed in 0u64..10_000,
        x in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        // depth 4, width 8, d = 3
        let spec = MlpSpec::new(3, vec![8, 8, 8], 2).unwrap();
        let p = init_params(&spec, seed);
        let (v, j) = mlp_forward_with_jacobian(&spec, &p, &x).unwrap();
        prop_assert_eq!(v.clone(), mlp_forward(&spec, &p, &x).unwrap());
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (mlp_forward(&spec, &p, &xp).unwrap() - mlp_forward(&spec, &p, &xm).unwrap()) / (2.0 * h);
            for o in 0..2 {
                let rel = (j[[o, k]] - fd[o]).abs() / j[[o, k]].abs().max(1.0);
                prop_assert!(rel < 1e-6, "output {o}, x{k}: {} vs {}", j[[o, k]], fd[o]);
            }
        }
    }

    #[test]
    fn data_term_is_quadratically_homogeneous(
        vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, 0.6f64..1.9), 1..20),
    ) {
        let b = AdmissibleBounds::new(0.5, 2.0).unwrap();
        let n = vals.len();
        let eval = |s: f64| {
            let mut t = Tape::new();
            let q = t.constant(Array2::from_shape_fn((n, 1), |(i, _)| vals[i].4));
            let sig = t.constant(Array2::from_shape_fn((n, 2), |(i, k)| s * if k == 0 { vals[i].0 } else { vals[i].1 }));
            let gz = t.constant(Array2::from_shape_fn((n, 2), |(i, k)| s * if k == 0 { vals[i].2 } else { vals[i].3 }));
            let e = data_residual(&mut t, q, sig, gz, &b, McScale::new(1.7, n)).unwrap();
            t.scalar(e).unwrap()
        };
        let base = eval(1.0);
        prop_assert!(base >= 0.0);
        for s in [2.0, 10.0] {
            let scaled = eval(s);
            prop_assert!((scaled - s * s * base).abs() <= 1e-12 * scaled.max(1.0));
        }
    }

    #[test]
    fn schedule_is_nonincreasing(lr in 1e-5f64..1e-1, dr in 0.01f64..=1.0, step in 1usize..5000, e in 0usize..100_000) {
        let mut c = bundled("neu1_exact").unwrap().train_config();
        c.lr0 = lr;
        c.dr = dr;
        c.step = step;
        prop_assert!(lr_schedule(&c, e + 1) <= lr_schedule(&c, e));
        prop_assert!(lr_schedule(&c, e) >= 0.0 && lr_schedule(&c, e) <= lr);
    }

    #[test]
    fn adam_moves_against_the_gradient(g in prop::collection::vec(-10.0f64..10.0, 1..30), lr in 1e-5f64..1e-1) {
        let mut s = AdamState::new(g.len());
        let mut p = vec![0.0; g.len()];
        s.step(&mut p, &g, lr).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            if *gi != 0.0 {
                prop_assert!(pi.signum() == -gi.signum());
            } else {
                prop_assert_eq!(*pi, 0.0);
            }
        }
        prop_assert!(s.v.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn config_round_trip(
        gs in 0.0f64..1e3, gb in 0.0f64..1e3, gq in 0.0f64..1.0, gtv in 0.0f64..1.0,
        n_r in 1usize..100_000, n_b in 1usize..10_000, seed in 0u64..u32::MAX as u64,
        lr in 1e-6f64..1.0, dr in 0.001f64..=1.0, step in 1usize..10_000, epochs in 1usize..100_000,
        delta in 0.0f64..0.5, widths in prop::collection::vec(1usize..64, 0..5),
        loss in prop::sample::select(vec![LossKind::Auto, LossKind::Neumann]),
        n_data in prop::option::of(1usize..1000), resample in any::<bool>(),
    ) {
        let mut c = bundled("neu1_exact").unwrap();
        c.gamma_sigma = gs;
        c.gamma_b = gb;
        c.gamma_q = gq;
        c.gamma_tv = gtv;
        c.n_r = n_r;
        c.n_b = n_b;
        c.seed = seed;
        c.lr = lr;
        c.dr = dr;
        c.step = step;
        c.epochs = epochs;
        c.delta = delta;
        c.q_widths = widths.clone();
        c.sigma_widths = widths;
        c.loss = loss;
        c.n_data = n_data;
        c.resample = resample;
        let again = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        prop_assert_eq!(again, c);
    }

    #[test]
    fn error_ignores_point_order(
        pairs in prop::collection::vec((0.5f64..2.0, 0.5f64..2.0), 2..200),
        shuffle_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (hat, tru): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let e = relative_error_at(&hat, &tru).unwrap();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        let hat2: Vec<f64> = idx.iter().map(|&i| hat[i]).collect();
        let tru2: Vec<f64> = idx.iter().map(|&i| tru[i]).collect();
        prop_assert_eq!(relative_error_at(&hat2, &tru2).unwrap().to_bits(), e.to_bits());
    }

    #[test]
    fn samplers_stay_on_the_domain(seed in any::<u64>(), d in 2usize..6, n in 1usize..200) {
        let dom = BoxDomain::new(vec![-1.0; d], (0..d).map(|i| 1.0 + i as f64).collect()).unwrap();
        let x = sample_interior(&dom, n, seed).unwrap();
        prop_assert!(x.rows().into_iter().all(|r| dom.contains(r.as_slice().unwrap())));
        let (y, nrm) = sample_boundary(&dom, n, seed).unwrap();
        for (r, nr) in y.rows().into_iter().zip(nrm.rows()) {
            let on_face = (0..d).filter(|&i| r[i] == dom.lower[i] || r[i] == dom.upper[i]).count();
            prop_assert_eq!(on_face, 1);
            prop_assert_eq!(nr.iter().filter(|v| **v != 0.0).count(), 1);
            prop_assert_eq!(nr.dot(&nr), 1.0);
        }
    }
}

#[test]
fn grid_error_of_scaled_truth_is_the_scale_gap() {
    let p = make_example("neu1").unwrap();
    for alpha in [0.9, 1.05, 1.3] {
        let e = relative_l2_error(
            |x| Ok(p.q_at(x) * alpha),
            |x| p.q_at(x),
            &p.domain,
            None,
            &Quadrature::Grid { resolution: 128 },
        )
        .unwrap();
        assert!((e - (1.0 - alpha).abs()).abs() < 1e-12, "{alpha}: {e}");
    }
}
