use bsde_lab::brownian::{fmt17, generate_brownian};
use bsde_lab::exponential::{integrate, IntegrationOptions};
use bsde_lab::field::builtin_field;
use bsde_lab::grid::TimeGrid;
use bsde_lab::norms::{estimate_norm, Conditioning, NormKind, ProcessView};
use bsde_lab::oracle::{
    discrete_conditional_expectation, discrete_exponential, discrete_linear_bsde_solve, discrete_reverse_holder,
    random_tree_instance, representation, verify_scalar_duality, FiniteFiltration,
};
use bsde_lab::quadratic::{clamp_radius, positive_spanning};
use proptest::prelude::*;

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_paths_for_any_pool(seed in any::<u64>(), m in 1usize..40, k in 1usize..12) {
        let g = TimeGrid::uniform(1.0, k).unwrap();
        let a = pool(1).install(|| generate_brownian(&g, 2, m, seed).unwrap());
        let b = pool(3).install(|| generate_brownian(&g, 2, m, seed).unwrap());
        prop_assert_eq!(a.increments(), b.increments());
        let f = builtin_field("generic-2x2-d2").unwrap();
        let sa = pool(1).install(|| integrate(f.as_ref(), &a, IntegrationOptions::default()).unwrap());
        let sb = pool(4).install(|| integrate(f.as_ref(), &b, IntegrationOptions::default()).unwrap());
        for path in 0..m {
            prop_assert_eq!(sa.terminal(path), sb.terminal(path));
        }
    }

    #[test]
    fn different_seeds_differ(seed in any::<u64>()) {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let a = generate_brownian(&g, 1, 8, seed).unwrap();
        let b = generate_brownian(&g, 1, 8, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.increments(), b.increments());
    }

    #[test]
    fn norms_are_absolutely_homogeneous(seed in any::<u64>(), c in -5.0f64..5.0) {
        let g = TimeGrid::uniform(1.0, 6).unwrap();
        let p = generate_brownian(&g, 1, 200, seed).unwrap();
        // Z = (B_t, 1 + t) on intervals, Y = B_t on nodes.
        let z: Vec<f64> = (0..200)
            .flat_map(|m| (0..6).map(move |k| (m, k)))
            .flat_map(|(m, k)| [p.state(m, k)[0], 1.0 + g.t(k)])
            .collect();
        let y: Vec<f64> = (0..200).flat_map(|m| (0..=6).map(move |k| (m, k))).map(|(m, k)| p.state(m, k)[0]).collect();
        let cz: Vec<f64> = z.iter().map(|v| c * v).collect();
        let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
        let cases: Vec<(NormKind, usize, &Vec<f64>, &Vec<f64>)> = vec![
            (NormKind::L2q { q: 2.0 }, 2, &z, &cz),
            (NormKind::L2q { q: 3.0 }, 2, &z, &cz),
            (NormKind::SupP { p: 2.0 }, 1, &y, &cy),
            (NormKind::SupP { p: f64::INFINITY }, 1, &y, &cy),
            (NormKind::Bmo, 2, &z, &cz),
        ];
        for (kind, w, base, scaled) in cases {
            let cond = || Conditioning::Regression { paths: &p, degree: 2, regimes: None };
            let a = estimate_norm(kind, &ProcessView::new(&g, 200, w, base).unwrap(), cond()).unwrap().value;
            let b = estimate_norm(kind, &ProcessView::new(&g, 200, w, scaled).unwrap(), cond()).unwrap().value;
            prop_assert!((b - c.abs() * a).abs() <= 1e-9 * (1.0 + a.abs()), "{:?}: {} vs {}", kind, b, c.abs() * a);
        }
    }

    #[test]
    fn tree_reverse_holder_increases_with_p(seed in any::<u64>(), steps in 1usize..5, n in 1usize..4, tri in any::<bool>()) {
        let inst = random_tree_instance(seed, steps, n, 1, 0.8, tri).unwrap();
        let expo = discrete_exponential(&inst.filt, &inst.problem.a, n).unwrap();
        let mut prev = 0.0;
        for p in [1.0, 1.25, 2.0, 3.5, 6.0] {
            let v = discrete_reverse_holder(&inst.filt, &expo, p).unwrap().value;
            prop_assert!(v >= prev * (1.0 - 1e-12), "p = {}: {} < {}", p, v, prev);
            prev = v;
        }
    }

    #[test]
    fn tower_property(seed in any::<u64>(), steps in 1usize..6, d in 1usize..3, width in 1usize..3, k1 in 0usize..6, k2 in 0usize..6) {
        let steps = if d == 2 { steps.min(4) } else { steps };
        let (lo, hi) = (k1.min(k2).min(steps), k1.max(k2).min(steps));
        let filt = FiniteFiltration::new(steps, d, 0.1).unwrap();
        let inst = random_tree_instance(seed, steps, width, d, 1.0, false).unwrap();
        let x = &inst.problem.xi;
        let inner = discrete_conditional_expectation(&filt, x, width, hi).unwrap();
        // Lift E[X | F_hi] back to the leaves and condition again.
        let lifted: Vec<f64> = (0..filt.leaves())
            .flat_map(|l| inner[filt.ancestor(l, hi) * width..(filt.ancestor(l, hi) + 1) * width].to_vec())
            .collect();
        let twice = discrete_conditional_expectation(&filt, &lifted, width, lo).unwrap();
        let once = discrete_conditional_expectation(&filt, x, width, lo).unwrap();
        for (a, b) in twice.iter().zip(&once) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn backward_induction_equals_representation(seed in any::<u64>(), steps in 1usize..6, n in 1usize..4, d in 1usize..3, tri in any::<bool>()) {
        let steps = if d == 2 { steps.min(4) } else { steps };
        let inst = random_tree_instance(seed, steps, n, d, 0.8, tri).unwrap();
        let (filt, prob) = (&inst.filt, &inst.problem);
        let sol = discrete_linear_bsde_solve(filt, prob).unwrap();
        let expo = discrete_exponential(filt, &prob.a, n).unwrap();
        let rep = representation(filt, &expo, &prob.xi, prob.beta.as_ref()).unwrap();
        for k in 0..=steps {
            for i in 0..filt.level_size(k) {
                for (a, b) in sol.y.at(k, i).iter().zip(rep.at(k, i)) {
                    prop_assert!((a - b).abs() <= 1e-10, "level {} node {}: {} vs {}", k, i, a, b);
                }
            }
        }
    }

    #[test]
    fn duality_witness_attains_lhs(seed in any::<u64>(), steps in 1usize..5, width in 1usize..3, p in 1.0f64..4.0, level in 0usize..5) {
        let inst = random_tree_instance(seed, steps, width, 1, 1.0, false).unwrap();
        let k = level.min(steps - 1);
        let r = verify_scalar_duality(&inst.filt, &inst.problem.xi, width, k, p, 4, seed).unwrap();
        prop_assert!((r.lhs - r.witness_rhs).abs() <= 1e-9 * r.lhs.max(1.0), "{:?}", r);
        prop_assert!(r.random_rhs <= r.lhs * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn clamp_is_monotone_contraction(k in 0.1f64..20.0, r1 in 0.0f64..100.0, r2 in 0.0f64..100.0) {
        let (a, b) = (clamp_radius(r1, k), clamp_radius(r2, k));
        prop_assert!(a <= r1 + 1e-12 && a <= 1.5 * k + 1e-12);
        if r1 <= r2 {
            prop_assert!(a <= b + 1e-12);
        }
        prop_assert!((a - b).abs() <= (r1 - r2).abs() * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn spanning_is_scale_invariant(scales in proptest::collection::vec(0.1f64..10.0, 4)) {
        let base = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let v: Vec<Vec<f64>> = base.iter().zip(&scales).map(|(b, s)| vec![b[0] * s, b[1] * s]).collect();
        prop_assert!(positive_spanning(&v, 2).unwrap().0);
        prop_assert!(!positive_spanning(&v[..3], 2).unwrap().0);
    }

    #[test]
    fn csv_numbers_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
    }
}
