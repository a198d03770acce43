mod common;

use std::sync::Arc;

use branchlab::bnb::Budget;
use branchlab::eval::*;
use branchlab::gcnn::{GcnnParams, HIDDEN};
use branchlab::milp::{generate_instance, Family, InstanceFamilySpec, MilpInstance};

fn instances(count: u64, n: usize) -> Vec<MilpInstance> {
    (0..count).map(|s| generate_instance(&InstanceFamilySpec::new(Family::MultiKnapsack, n, 5, 0.8, 500 + s)).unwrap()).collect()
}

fn settings(workers: usize) -> EvalSettings {
    EvalSettings { budget: Budget::clock(3000.0), workers, seed: 5, ..Default::default() }
}

#[test]
fn scores_do_not_depend_on_worker_count() {
    let insts = instances(12, 16);
    for spec in ["random", "hybrid", "pseudocost"] {
        let spec: PolicySpec = spec.parse().unwrap();
        let one = evaluate_policy(&spec, &insts, &settings(1)).unwrap();
        let four = evaluate_policy(&spec, &insts, &settings(4)).unwrap();
        assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&four).unwrap());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        one.write_csv(&mut a).unwrap();
        four.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn rows_are_consistent_and_aggregates_recompute() {
    let insts = instances(10, 16);
    let report = evaluate_policy(&PolicySpec::MostInfeasible, &insts, &settings(2)).unwrap();
    assert_eq!(report.rows.len(), insts.len());
    assert!(report.rows.windows(2).all(|w| w[0].instance < w[1].instance), "rows sorted by instance");
    for r in &report.rows {
        assert_eq!(r.reward.unwrap() + r.dual_integral.unwrap(), r.constant.unwrap(), "{}", r.instance);
    }
    let ok: Vec<&EvalRow> = report.rows.iter().filter(|r| r.is_ok()).collect();
    let mean = ok.iter().map(|r| r.reward.unwrap()).sum::<f64>() / ok.len() as f64;
    let mean_di = ok.iter().map(|r| r.dual_integral.unwrap()).sum::<f64>() / ok.len() as f64;
    let agg = &report.aggregate;
    assert!((agg.mean_reward.unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    assert!((agg.mean_integral.unwrap() - mean_di).abs() <= 1e-12 * mean_di.abs().max(1.0));
    assert_eq!(*agg, Aggregate::from_rows(&report.rows));
    assert!(!report.fingerprint.reproducible || report.fingerprint.clock_mode == branchlab::bnb::ClockMode::Pseudo);
}

#[test]
fn a_policy_ties_with_itself() {
    let insts = instances(6, 14);
    let specs = vec![PolicySpec::Random { seed: 3 }, PolicySpec::Random { seed: 3 }];
    let board = compare_policies(&specs, &insts, &settings(1)).unwrap();
    assert_eq!(board.rows.len(), 2);
    assert_eq!(board.rows[0].mean_reward, board.rows[1].mean_reward);
    let (a, b) = paired_rewards(&board.reports[0], &board.reports[1]);
    let t = sign_test(&a, &b);
    assert_eq!((t.wins, t.losses, t.ties), (0, 0, 6));
    assert_eq!(t.p_value, 1.0);
}

#[test]
fn strong_branching_uses_no_more_nodes_than_random() {
    let insts = instances(50, 12);
    let s = EvalSettings { budget: Budget::UNLIMITED, ..settings(4) };
    let board = compare_policies(&[PolicySpec::StrongBranching, PolicySpec::Random { seed: 1 }], &insts, &s).unwrap();
    let nodes = |k: usize| board.reports[k].rows.iter().map(|r| r.nodes.unwrap() as f64).collect::<Vec<_>>();
    let (sb, rnd) = (nodes(0), nodes(1));
    // Fewer nodes is a win for strong branching.
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let t = sign_test(&neg(&sb), &neg(&rnd));
    assert!(sb.iter().sum::<f64>() <= rnd.iter().sum::<f64>());
    assert!(t.p_value < 0.05, "{t:?}");
    assert!((t.p_value - common::sign_test_p(t.wins, t.losses)).abs() <= 1e-12);
}

#[test]
fn sign_test_matches_direct_binomial_sum() {
    for (w, l) in [(0, 0), (5, 0), (26, 4), (37, 13), (10, 10), (0, 12), (120, 80)] {
        let a: Vec<f64> = (0..w + l).map(|k| if k < w { 1.0 } else { -1.0 }).collect();
        let t = sign_test(&a, &vec![0.0; w + l]);
        assert_eq!((t.wins, t.losses), (w, l));
        assert!((t.p_value - common::sign_test_p(w, l)).abs() <= 1e-12 * t.p_value.max(1e-300) + 1e-15, "{w}:{l}");
    }
}

#[test]
fn checkpoint_selection_rules() {
    let insts = instances(4, 14);
    let params = Arc::new(GcnnParams::init(HIDDEN, 2));
    let single = [CandidateCheckpoint { id: "only".into(), params: params.clone(), valid_loss: Some(1.0) }];
    assert_eq!(select_best_checkpoint(&single, &insts, &settings(1)).unwrap().best, "only");
    let twins = [
        CandidateCheckpoint { id: "early".into(), params: params.clone(), valid_loss: Some(0.5) },
        CandidateCheckpoint { id: "late".into(), params, valid_loss: Some(0.9) },
    ];
    let sel = select_best_checkpoint(&twins, &insts, &settings(1)).unwrap();
    assert_eq!(sel.best, "late", "equal rewards go to the later checkpoint");
    assert_eq!(sel.table.len(), 2);
    assert!(matches!(select_best_checkpoint(&[], &insts, &settings(1)), Err(EvalError::NoCheckpoints)));
}

#[test]
fn streams_are_stable_and_distinct() {
    assert_eq!(stream_seed(1, "a"), stream_seed(1, "a"));
    assert_ne!(stream_seed(1, "a"), stream_seed(1, "b"));
    assert_ne!(stream_seed(1, "a"), stream_seed(2, "a"));
}
