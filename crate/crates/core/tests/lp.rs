mod common;

use branchlab::lp::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_vertex_enumeration(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=4) {
        let inst = common::random_lp(seed, n, m);
        let oracle = common::vertex_enumeration(&inst).expect("planted point is feasible");
        let sol = LpSolver::new().solve_default(&inst, &[], None).unwrap();
        prop_assert!(sol.is_optimal());
        prop_assert!((sol.objective - oracle).abs() <= 1e-7 * oracle.abs().max(1.0), "simplex {} oracle {}", sol.objective, oracle);
        prop_assert!(inst.is_feasible(&sol.x, 1e-6, f64::INFINITY));
    }

    #[test]
    fn warm_start_agrees_with_cold(seed in any::<u64>(), n in 2usize..=6, m in 1usize..=4, var in 0usize..6) {
        let inst = common::random_lp(seed, n, m);
        let solver = LpSolver::new();
        let root = solver.solve_default(&inst, &[], None).unwrap();
        let j = var % n;
        let (lb, ub) = (inst.lower()[j], inst.upper()[j]);
        let cut = [BoundOverride::upper(j, (lb + ub) / 2.0)];
        let warm = solver.solve_default(&inst, &cut, Some(&root.basis)).unwrap();
        let cold = solver.solve_default(&inst, &cut, None).unwrap();
        prop_assert_eq!(warm.status, cold.status);
        if cold.is_optimal() {
            prop_assert!((warm.objective - cold.objective).abs() <= 1e-7 * cold.objective.abs().max(1.0));
        }
    }

    #[test]
    fn children_never_beat_parent(seed in any::<u64>(), n in 2usize..=10, m in 1usize..=5) {
        let inst = common::random_binary(seed, n, m);
        let solver = LpSolver::new();
        let root = solver.solve_default(&inst, &[], None).unwrap();
        prop_assert!(root.is_optimal());
        for j in (0..n).filter(|&j| is_fractional(root.x[j])) {
            let (down, up) = solver.probe_children(&inst, &[], &root, j).unwrap();
            for child in [down, up] {
                if child.is_optimal() {
                    prop_assert!(child.objective >= root.objective - FEAS_TOL);
                }
            }
        }
    }
}

#[test]
fn crossed_bounds_are_infeasible_without_pivoting() {
    let inst = common::random_lp(1, 3, 2);
    let (lb, ub) = (inst.lower()[0], inst.upper()[0]);
    let sol = LpSolver::new().solve_default(&inst, &[BoundOverride::lower(0, ub), BoundOverride::upper(0, lb)], None).unwrap();
    assert_eq!(sol.status, LpStatus::Infeasible);
    assert_eq!(sol.iterations, 0);
}
