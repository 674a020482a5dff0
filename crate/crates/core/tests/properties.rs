use logfield::comparison::{a_of_x, b_of_u, bulk_map, FieldClassParams, YField};
use logfield::extremes::{isotonic_nonincreasing, Proportion};
use logfield::kernels::{mbrw_cov_bounds_check, overlap_integral, sharp_sandwich_constant};
use logfield::lattice::{dist_inf, Lattice};
use logfield::{kernel_matrix, KernelSpec, SeedSpec};
use proptest::prelude::*;
use rand::Rng;

fn lattice_pair(d: usize, k: u32) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let side = 1usize << k;
    let h = 1.0 / side as f64;
    (prop::collection::vec(0..side, d), prop::collection::vec(0..side, d))
        .prop_map(move |(a, b)| (a.iter().map(|&i| i as f64 * h).collect(), b.iter().map(|&i| i as f64 * h).collect()))
}

fn unit_point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, d)
}

/// Composite Simpson on `[0, upper]` with the kink at `-log max a` as a node.
fn overlap_by_quadrature(a: &[f64], upper: f64) -> f64 {
    let f = |r: f64| a.iter().map(|&ai| (1.0 - r.exp() * ai).max(0.0)).product::<f64>();
    let amax = a.iter().copied().fold(0.0, f64::max);
    let end = if amax > 0.0 { upper.min(-amax.ln()) } else { upper };
    if end <= 0.0 {
        return 0.0;
    }
    let n = 2000;
    let h = end / n as f64;
    let mut s = f(0.0) + f(end);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_integral_agrees_with_quadrature(a in prop::collection::vec(0.0..1.2f64, 1..=3), upper in 0.0..6.0f64) {
        let closed = overlap_integral(&a, upper);
        let quad = overlap_by_quadrature(&a, upper);
        prop_assert!((closed - quad).abs() < 1e-9, "{closed} vs {quad}");
    }

    #[test]
    fn mbrw_sandwich_holds_on_the_lattice(d in 1usize..=3, k in 1u32..=7, seed in any::<u64>()) {
        let spec = KernelSpec::Mbrw { d, eps: (-(k as f64)).exp2() };
        let mut rng = SeedSpec::new(seed, 0, "prop/sandwich").rng();
        let side = 1u64 << k;
        let mut pick = || (0..d).map(|_| rng.random_range(0..side) as f64 / side as f64).collect::<Vec<f64>>();
        let (v, u) = (pick(), pick());
        prop_assume!(v != u);
        let r = mbrw_cov_bounds_check(&spec, &v, &u).unwrap();
        prop_assert!(r.holds(), "{r:?}");
        prop_assert!(r.upper_violation <= sharp_sandwich_constant(d) + 1e-12, "{r:?}");
    }

    #[test]
    fn kernels_are_symmetric_and_bounded_by_variances(
        (x, y) in (unit_point(2), unit_point(2)),
        k in 2u32..=5,
        p in 1.0..3.0f64,
    ) {
        let eps = (-(k as f64)).exp2();
        for spec in [
            KernelSpec::BrownianSheet { d: 2, eps, p },
            KernelSpec::WholePlaneLog { eps },
        ] {
            let cxy = spec.cov(&x, &y).unwrap();
            prop_assert_eq!(cxy, spec.cov(&y, &x).unwrap());
            let (vx, vy) = (spec.cov(&x, &x).unwrap(), spec.cov(&y, &y).unwrap());
            prop_assert!(cxy * cxy <= vx * vy * (1.0 + 1e-12) + 1e-14, "{}: {cxy} vs {vx} {vy}", spec.name());
        }
    }

    #[test]
    fn lattice_kernels_are_symmetric((v, u) in lattice_pair(2, 4)) {
        for spec in [KernelSpec::Mbrw { d: 2, eps: 0.0625 }, KernelSpec::Brw { d: 2, n: 4 }] {
            prop_assert_eq!(spec.cov(&v, &u).unwrap(), spec.cov(&u, &v).unwrap());
        }
    }

    #[test]
    fn brw_covariance_counts_shared_levels((v, u) in lattice_pair(1, 5)) {
        let spec = KernelSpec::Brw { d: 1, n: 5 };
        let shared = (0..=5u32)
            .filter(|&j| {
                let cell = (1u32 << j) as f64;
                (v[0] * cell).floor() == (u[0] * cell).floor()
            })
            .count()
            .min(5);
        let expected = shared as f64 * std::f64::consts::LN_2;
        prop_assert!((spec.cov(&v, &u).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), replica in 0u64..1000) {
        let a: Vec<u64> = { let mut r = SeedSpec::new(seed, replica, "prop").rng(); (0..8).map(|_| r.random()).collect() };
        let b: Vec<u64> = { let mut r = SeedSpec::new(seed, replica, "prop").rng(); (0..8).map(|_| r.random()).collect() };
        let c: Vec<u64> = { let mut r = SeedSpec::new(seed, replica + 1, "prop").rng(); (0..8).map(|_| r.random()).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn isotonic_projection_is_nonincreasing_and_idempotent(xs in prop::collection::vec(0.0..1.0f64, 1..40)) {
        let iso = isotonic_nonincreasing(&xs);
        prop_assert_eq!(iso.len(), xs.len());
        prop_assert!(iso.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(isotonic_nonincreasing(&iso), iso.clone());
        let (s, t): (f64, f64) = (xs.iter().sum(), iso.iter().sum());
        prop_assert!((s - t).abs() < 1e-9);
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(total in 1usize..100_000, frac in 0.0..=1.0f64) {
        let count = (frac * total as f64).round() as usize;
        let p = Proportion::wilson(count, total);
        prop_assert!(0.0 <= p.lower && p.lower <= p.estimate && p.estimate <= p.upper && p.upper <= 1.0, "{p:?}");
    }

    #[test]
    fn a_decreases_as_p_grows(x in unit_point(1), k in 4u32..=7, delta_k in 0u32..=4) {
        let params = FieldClassParams::synthetic(1).unwrap();
        let field = YField::SyntheticMbrw { d: 1 };
        let (eps, delta) = ((-(k as f64)).exp2(), (-(delta_k as f64)).exp2());
        let values: Vec<Option<f64>> =
            [1.0, 2.0, 3.0, 4.0].iter().map(|&p| a_of_x(&params, &field, &x, eps, delta, p).unwrap().value()).collect();
        // Once infeasible at some p, every larger p stays infeasible.
        let feasible: Vec<f64> = values.iter().map_while(|v| *v).collect();
        prop_assert!(values[feasible.len()..].iter().all(Option::is_none));
        prop_assert!(feasible.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{feasible:?}");
    }

    #[test]
    fn b_is_finite_and_positive_for_the_mgff(u in unit_point(2), k in 3u32..=5) {
        let params = FieldClassParams::synthetic(2).unwrap();
        let b = b_of_u(&params, &YField::MgffBulk, &u, (-(k as f64)).exp2(), 1.0).unwrap();
        prop_assert!(b.value.is_finite() && b.value > 0.0);
    }

    #[test]
    fn bulk_map_lands_in_the_bulk(u in unit_point(2)) {
        let y = bulk_map(&u);
        prop_assert!(y.iter().all(|&c| (0.25..=0.75).contains(&c)));
        prop_assert!(dist_inf(&y, &bulk_map(&[0.5, 0.5])) <= 0.25 + 1e-15);
    }
}

#[test]
fn small_kernel_matrices_are_positive_semidefinite() {
    for spec in [
        KernelSpec::Mbrw { d: 2, eps: 0.125 },
        KernelSpec::Brw { d: 2, n: 3 },
        KernelSpec::BrownianSheet { d: 2, eps: 0.25, p: 1.5 },
    ] {
        let points = Lattice::from_eps(2, 0.125).unwrap().points();
        let m = kernel_matrix(&spec, &points).unwrap();
        let n = m.size();
        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| m.get(i, j));
        let min = dense.symmetric_eigenvalues().min();
        assert!(min > -1e-10 * n as f64, "{}: {min}", spec.name());
    }
}
