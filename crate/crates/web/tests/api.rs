use branchlab_web::{hybrid_frequency_json, select_demo_json, solve_trace_json};
use serde_json::Value;

#[test]
fn traces_for_each_requested_policy() {
    let out: Value = serde_json::from_str(&solve_trace_json("multi-knapsack", 14, 4, 3, "pseudocost, random", 5000.0).unwrap()).unwrap();
    let runs = out["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        assert_eq!(r["horizon"], 5000.0);
        assert!(r["dual_integral"].as_f64().unwrap() >= 0.0);
        let events = r["events"].as_array().unwrap();
        assert_eq!(events[0][0], 0.0);
    }
}

#[test]
fn rejects_bad_input() {
    assert!(solve_trace_json("lattice", 10, 3, 0, "random", 100.0).is_err());
    assert!(solve_trace_json("set-cover", 0, 3, 0, "random", 100.0).is_err());
    assert!(solve_trace_json("set-cover", 10, 3, 0, "oracle", 100.0).is_err());
    assert!(hybrid_frequency_json(1.0, true, 100, 0).is_err());
    assert!(select_demo_json(0, 0, 15.0).is_err());
}

#[test]
fn frequency_tracks_r0() {
    let below: Value = serde_json::from_str(&hybrid_frequency_json(0.3, true, 10_000, 1).unwrap()).unwrap();
    assert!((below["pc_fraction"].as_f64().unwrap() - 0.3).abs() <= 0.02);
    let above: Value = serde_json::from_str(&hybrid_frequency_json(0.3, false, 10_000, 1).unwrap()).unwrap();
    assert!((above["pc_fraction"].as_f64().unwrap() - 0.7).abs() <= 0.02);
}

#[test]
fn selection_demo_keeps_p_percent() {
    let out: Value = serde_json::from_str(&select_demo_json(4, 3, 15.0).unwrap()).unwrap();
    let points = out["points"].as_array().unwrap();
    let kept = points.iter().filter(|p| p["selected"] == true).count();
    assert_eq!(kept as u64, out["kept"].as_u64().unwrap());
    assert_eq!(kept, ((0.15 * points.len() as f64) - 1e-9).ceil() as usize);
}
