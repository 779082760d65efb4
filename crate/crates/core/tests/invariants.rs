use mbsde::{
    build_tree, check_wellposedness, path_norms, prox_step_solve, solve_classical, solve_penalized, stability_audit,
    AdaptedProcess, ConvexSpec, DelayMeasure, GeneratorSpec, RunData, ScenarioTree, SolverConfig, Terminal, Weight,
};
use proptest::prelude::*;

fn clipped(tree: &ScenarioTree<f64>, a: f64, b: f64, lo: f64, hi: f64) -> Vec<f64> {
    Terminal::ClippedLinear {
        a: vec![a],
        b: vec![b],
        lo: vec![lo],
        hi: vec![hi],
    }
    .leaves(tree)
    .unwrap()
}

fn generators(horizon: f64, dt: f64) -> Vec<GeneratorSpec<f64>> {
    vec![
        GeneratorSpec::zero(1, 1),
        GeneratorSpec::linear_instant(vec![0.8], vec![-0.4], 1, 1).unwrap(),
        GeneratorSpec::delayed_z(0.7, dt, 1, 1, horizon)
            .unwrap()
            .with_constants(1.0, 0.49),
        GeneratorSpec::moving_average_z(
            Weight::Constant(0.5),
            DelayMeasure::DiscreteMixture(vec![(-2.0 * dt, 0.3), (-dt, 0.3), (0.0, 0.4)]),
            1,
            1,
        )
        .unwrap()
        .with_constants(1.0, 0.25),
        GeneratorSpec::running_integral_z(0.6, 1, 1, horizon)
            .unwrap()
            .with_offset(vec![0.3])
            .unwrap()
            .with_constants(1.0, 0.36 * horizon * horizon),
    ]
}

/// Independent statistics by walking every root-to-leaf path.
fn leaf_enumeration_norms(p: &AdaptedProcess<f64>, tree: &ScenarioTree<f64>) -> (f64, f64) {
    let n = tree.n_steps();
    let leaves = tree.n_leaves();
    let b = tree.branching();
    let (mut s2, mut h2) = (0.0, 0.0);
    for leaf in 0..leaves {
        let mut sup: f64 = 0.0;
        for level in 0..=n {
            let idx = leaf / b.pow((n - level) as u32);
            let v: f64 = p.node(level, idx).iter().map(|x| x * x).sum();
            sup = sup.max(v);
            if level < n {
                h2 += tree.dt() * v;
            }
        }
        s2 += sup;
    }
    (s2 / leaves as f64, h2 / leaves as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn terminal_values_are_exact(a in -1.0..1.0f64, b in -2.0..2.0f64, n in 1usize..6, which in 0usize..5) {
        let tree = build_tree(n, 1.0, 1).unwrap();
        let xi = clipped(&tree, a, b, -0.9, 0.9);
        let gen = generators(1.0, tree.dt()).swap_remove(which);
        let phi = ConvexSpec::indicator_box(vec![-1.0], vec![1.0]).unwrap();
        let cfg = SolverConfig::default();
        for sol in [
            solve_classical(&tree, &xi, &gen, &cfg).unwrap(),
            solve_penalized(&tree, &xi, &gen, &phi, 0.01, &cfg).unwrap(),
            prox_step_solve(&tree, &xi, &gen, &phi, &cfg).unwrap(),
        ] {
            prop_assert_eq!(sol.y.leaves(), xi.as_slice());
        }
    }

    #[test]
    fn zero_penalty_is_the_classical_solver(a in -1.0..1.0f64, b in -2.0..2.0f64, eps in 1e-3..2.0f64, which in 0usize..5) {
        let tree = build_tree(4, 1.0, 1).unwrap();
        let xi = clipped(&tree, a, b, -5.0, 5.0);
        let gen = generators(1.0, tree.dt()).swap_remove(which);
        let cfg = SolverConfig::default();
        let plain = solve_classical(&tree, &xi, &gen, &cfg).unwrap();
        let pen = solve_penalized(&tree, &xi, &gen, &ConvexSpec::zero(1), eps, &cfg).unwrap();
        let prox = prox_step_solve(&tree, &xi, &gen, &ConvexSpec::zero(1), &cfg).unwrap();
        prop_assert_eq!(&pen.y, &plain.y);
        prop_assert_eq!(&pen.z, &plain.z);
        prop_assert!(pen.u.values().iter().all(|&u| u == 0.0));
        prop_assert_eq!(&prox.y, &plain.y);
    }

    #[test]
    fn penalty_term_is_monotone(
        a1 in -0.5..0.5f64, b1 in -2.0..2.0f64,
        a2 in -0.5..0.5f64, b2 in -2.0..2.0f64,
        eps in 1e-3..1.0f64, which in 0usize..5,
    ) {
        let tree = build_tree(4, 1.0, 1).unwrap();
        let gen = generators(1.0, tree.dt()).swap_remove(which);
        let cfg = SolverConfig::default();
        for phi in [
            ConvexSpec::indicator_box(vec![-0.5], vec![0.5]).unwrap(),
            ConvexSpec::one_norm(0.8, 1).unwrap(),
            ConvexSpec::quadratic(2.0, 1).unwrap(),
        ] {
            let x1 = clipped(&tree, a1, b1, -0.5, 0.5);
            let x2 = clipped(&tree, a2, b2, -0.5, 0.5);
            let s1 = solve_penalized(&tree, &x1, &gen, &phi, eps, &cfg).unwrap();
            let s2 = solve_penalized(&tree, &x2, &gen, &phi, eps, &cfg).unwrap();
            let mut total = 0.0;
            for level in 0..tree.n_steps() {
                let w = tree.dt() / tree.level_len(level) as f64;
                for idx in 0..tree.level_len(level) {
                    let dy = s1.y.node(level, idx)[0] - s2.y.node(level, idx)[0];
                    let du = s1.u.node(level, idx)[0] - s2.u.node(level, idx)[0];
                    total += w * dy * du;
                }
            }
            prop_assert!(total >= -1e-10, "sum dt <dY, dU> = {}", total);
        }
    }

    #[test]
    fn prox_scheme_stays_in_the_box(a in -1.0..1.0f64, b in -3.0..3.0f64, which in 0usize..5) {
        let tree = build_tree(5, 1.0, 1).unwrap();
        let xi = clipped(&tree, a, b, -0.7, 0.4);
        let gen = generators(1.0, tree.dt()).swap_remove(which).with_offset(vec![2.0]).unwrap();
        let phi = ConvexSpec::indicator_box(vec![-0.7], vec![0.4]).unwrap();
        let sol = prox_step_solve(&tree, &xi, &gen, &phi, &SolverConfig::default()).unwrap();
        prop_assert!(sol.y.values().iter().all(|&v| (-0.7..=0.4).contains(&v)));
    }

    #[test]
    fn picard_terminates_within_n_plus_two(n in 1usize..8, which in 0usize..5, a in -1.0..1.0f64) {
        let tree = build_tree(n, 1.0, 1).unwrap();
        let xi = clipped(&tree, a, 1.0, -2.0, 2.0);
        let gen = generators(1.0, tree.dt()).swap_remove(which);
        let sol = solve_classical(&tree, &xi, &gen, &SolverConfig::default()).unwrap();
        prop_assert!(sol.diagnostics.converged);
        prop_assert!(sol.diagnostics.iterations_used <= n + 2, "{:?}", sol.diagnostics.iterate_distances);
        prop_assert!(*sol.diagnostics.iterate_distances.last().unwrap() <= 1e-10);
    }

    #[test]
    fn uniqueness_implies_existence(l in 0.0..3.0f64, k in 0.0..5.0f64, t in 0.01..2.0f64, beta in 0.01..30.0f64) {
        let r = check_wellposedness(l, k, t, beta).unwrap();
        prop_assert!(!r.uniqueness_ok || r.existence_ok);
    }

    #[test]
    fn norms_match_leaf_enumeration(n in 1usize..5, d in 1usize..3, seed in 0u64..1000) {
        let tree = build_tree(n, 0.7, d).unwrap();
        let p = AdaptedProcess::from_fn(&tree, 2, |level, idx| {
            let x = (seed as f64 + 1.3 * level as f64 + 0.37 * idx as f64).sin();
            vec![x, 0.5 - x * x]
        });
        let report = path_norms(&p, &tree, 0.0).unwrap();
        let (s2, h2) = leaf_enumeration_norms(&p, &tree);
        prop_assert!((report.s2 - s2).abs() <= 1e-12);
        prop_assert!((report.h2 - h2).abs() <= 1e-12);
    }
}

#[test]
fn identical_data_give_zero_stability_lhs() {
    let tree = build_tree(4, 1.0, 1).unwrap();
    let xi = clipped(&tree, 0.1, 1.0, -0.5, 0.5);
    let phi = ConvexSpec::indicator_box(vec![-0.5], vec![0.5]).unwrap();
    for gen in generators(1.0, tree.dt()) {
        let s = solve_penalized(&tree, &xi, &gen, &phi, 0.05, &SolverConfig::default()).unwrap();
        let run = RunData {
            solution: &s,
            xi: &xi,
            generator: &gen,
        };
        let audit = stability_audit(run, run, &tree, 1.0).unwrap();
        assert_eq!(audit.lhs, 0.0);
        assert_eq!(audit.constant, 0.0);
    }
}

#[test]
fn two_dimensional_problem_runs() {
    let tree = build_tree(3, 1.0, 2).unwrap();
    let xi = Terminal::Linear {
        a: vec![0.1, -0.2],
        b: vec![1.0, 0.0, 0.5, 0.5],
    }
    .leaves(&tree)
    .unwrap();
    let gen = GeneratorSpec::delayed_z(0.3, 1.0 / 3.0, 2, 2, 1.0)
        .unwrap()
        .with_constants(1.0, 0.18);
    let phi = ConvexSpec::one_norm(0.5, 2).unwrap();
    let sol = solve_penalized(&tree, &xi, &gen, &phi, 0.1, &SolverConfig::default()).unwrap();
    assert_eq!(sol.z.width(), 4);
    assert_eq!(sol.y.leaves(), xi.as_slice());
}

#[test]
fn single_precision_matches_double() {
    let tree32 = build_tree::<f32>(4, 1.0, 1).unwrap();
    let tree64 = build_tree::<f64>(4, 1.0, 1).unwrap();
    let t32 = Terminal::ClippedLinear {
        a: vec![0.2f32],
        b: vec![1.0],
        lo: vec![-0.5],
        hi: vec![0.5],
    };
    let xi32 = t32.leaves(&tree32).unwrap();
    let xi64 = clipped(&tree64, 0.2, 1.0, -0.5, 0.5);
    let phi32 = ConvexSpec::indicator_box(vec![-0.5f32], vec![0.5]).unwrap();
    let phi64 = ConvexSpec::indicator_box(vec![-0.5f64], vec![0.5]).unwrap();
    let g32 = GeneratorSpec::linear_instant(vec![1.0f32], vec![0.0], 1, 1).unwrap();
    let g64 = GeneratorSpec::linear_instant(vec![1.0f64], vec![0.0], 1, 1).unwrap();
    let cfg32 = SolverConfig {
        picard_tol: 1e-5f32,
        ..SolverConfig::default()
    };
    let s32 = solve_penalized(&tree32, &xi32, &g32, &phi32, 0.01, &cfg32).unwrap();
    let s64 = solve_penalized(&tree64, &xi64, &g64, &phi64, 0.01, &SolverConfig::default()).unwrap();
    assert!((s32.y0()[0] as f64 - s64.y0()[0]).abs() < 1e-5);
}
