//! Cross-module checks: Monte Carlo pipelines run on the tree's leaves reproduce the tree.

use bsde_lab::counterexamples::NonexistenceSpec;
use bsde_lab::exponential::{integrate, IntegrationOptions};
use bsde_lab::field::builtin_field;
use bsde_lab::linear::{linear_solver, LinearProblem, SolverConfig};
use bsde_lab::oracle::{discrete_exponential, discrete_linear_bsde_solve, FiniteFiltration, NodeProcess, TreeProblem};
use bsde_lab::terminal::TerminalSpec;

#[test]
fn euler_exponential_on_leaves_matches_tree_recursion() {
    for name in ["triangular-3", "generic-2x2-d2", "emery"] {
        let field = builtin_field(name).unwrap();
        let filt = FiniteFiltration::new(4, field.d(), 0.25).unwrap();
        let paths = filt.as_path_ensemble();
        let euler = integrate(field.as_ref(), &paths, IntegrationOptions::default()).unwrap();
        let tree = discrete_exponential(&filt, &NodeProcess::from_field(&filt, field.as_ref()), field.n()).unwrap();
        for leaf in 0..filt.leaves() {
            for (a, b) in euler.terminal(leaf).iter().zip(tree.s.at(4, leaf)) {
                assert!((a - b).abs() < 1e-12, "{name}: leaf {leaf}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn path_solvers_reproduce_tree_solution() {
    // With d = 1 the level-k state takes k + 1 values, so degree K regression is exact.
    let steps = 5;
    let cfg = SolverConfig {
        degree: steps,
        ..Default::default()
    };
    for (name, solvers) in [
        ("triangular-3", &["regression", "triangular", "representation"][..]),
        ("right-outer-3", &["regression", "right-outer"][..]),
        ("scalar-0.5", &["regression", "representation"][..]),
    ] {
        let field = builtin_field(name).unwrap();
        let n = field.n();
        let filt = FiniteFiltration::new(steps, 1, 0.2).unwrap();
        let paths = filt.as_path_ensemble();
        let xi = TerminalSpec::Bounded { amplitude: 1.0, shift: 0.2 }.sample(&paths, n).unwrap();
        let tree = discrete_linear_bsde_solve(
            &filt,
            &TreeProblem {
                n,
                xi: xi.clone(),
                beta: None,
                a: NodeProcess::from_field(&filt, field.as_ref()),
                alpha: None,
            },
        )
        .unwrap();
        for s in solvers {
            let prob = LinearProblem::new(field.clone(), xi.clone());
            let sol = linear_solver(s, field.as_ref()).unwrap().solve(&prob, &paths, &cfg).unwrap();
            for leaf in 0..filt.leaves() {
                for k in 0..=steps {
                    for (a, b) in sol.y(leaf, k).iter().zip(tree.y.at(k, filt.ancestor(leaf, k))) {
                        assert!((a - b).abs() < 1e-8, "{name}/{s}: leaf {leaf} level {k}: {a} vs {b}");
                    }
                }
            }
        }
    }
}

#[test]
fn solution_csv_is_the_mean_profile() {
    let field = builtin_field("scalar-0.5").unwrap();
    let filt = FiniteFiltration::new(3, 1, 0.25).unwrap();
    let paths = filt.as_path_ensemble();
    let xi = TerminalSpec::Brownian { scale: 1.0, shift: 0.0 }.sample(&paths, 1).unwrap();
    let sol = linear_solver("auto", field.as_ref())
        .unwrap()
        .solve(&LinearProblem::new(field.clone(), xi), &paths, &SolverConfig::default())
        .unwrap();
    let mut buf = Vec::new();
    sol.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
    let first: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert!((first[1] - sol.y0[0]).abs() < 1e-15);
}

#[test]
fn default_nonexistence_levels_satisfy_their_conditions() {
    let spec = NonexistenceSpec::default_levels(1.0, 12).unwrap();
    let c = spec.check_conditions();
    assert!(c.all(), "{c:?}");
    assert!(spec.b.windows(2).all(|w| w[0] < w[1]));
    assert!(spec.b.iter().all(|b| *b < std::f64::consts::FRAC_PI_2));
}
