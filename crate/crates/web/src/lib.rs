//! Browser bindings. Each export wraps a plain function returning JSON so
//! the same code is testable natively.

use branchlab::bail::{compute_returns, select_top, train_envelope, EnvelopeConfig};
use branchlab::bnb::{dual_integral, solve, BnbConfig, Budget};
use branchlab::branching::{hybrid_select, HybridBranch, HybridConfig, Hybrid, PseudocostStore};
use branchlab::eval::PolicySpec;
use branchlab::lp::LpSolver;
use branchlab::milp::{generate_instance, Family, InstanceFamilySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_VARS: usize = 60;

#[derive(Serialize)]
struct TraceRun {
    policy: String,
    status: String,
    events: Vec<(f64, f64)>,
    horizon: f64,
    opt: f64,
    dual_integral: f64,
    nodes: usize,
}

#[derive(Serialize)]
struct TraceComparison {
    instance: String,
    runs: Vec<TraceRun>,
}

/// Dual-bound traces of several rules on one generated instance.
pub fn solve_trace_json(family: &str, n: usize, m: usize, seed: u64, policies: &str, max_clock: f64) -> Result<String, String> {
    if n == 0 || n > MAX_VARS || m == 0 || m > MAX_VARS {
        return Err(format!("sizes must lie in 1..={MAX_VARS}"));
    }
    let family: Family = family.parse().map_err(|e| format!("{e}"))?;
    let inst = generate_instance(&InstanceFamilySpec::new(family, n, m, 0.7, seed)).map_err(|e| e.to_string())?;
    let budget = Budget::clock(max_clock);
    budget.validate().map_err(|e| e.to_string())?;
    let mut runs = vec![];
    for name in policies.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = match name.parse::<PolicySpec>().map_err(|e| e.to_string())? {
            PolicySpec::Random { .. } => PolicySpec::Random { seed },
            other => other,
        };
        let res = solve(&inst, spec.build(inst.name()).as_mut(), &BnbConfig { budget, ..Default::default() }).map_err(|e| e.to_string())?;
        runs.push(TraceRun {
            policy: spec.name(),
            status: format!("{:?}", res.status),
            dual_integral: dual_integral(&res.trace).map_err(|e| e.to_string())?,
            events: res.trace.events,
            horizon: res.trace.horizon,
            opt: res.trace.opt_value,
            nodes: res.nodes_processed,
        });
    }
    serde_json::to_string(&TraceComparison { instance: inst.name().to_string(), runs }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Frequency {
    draws: usize,
    pseudocost: usize,
    active_constraint: usize,
    pc_fraction: f64,
    expected: f64,
}

/// Samples the hybrid expert's rule choice `draws` times with the dual
/// bound held below (or above) the switch threshold.
pub fn hybrid_frequency_json(r0: f64, below_threshold: bool, draws: usize, seed: u64) -> Result<String, String> {
    let cfg = HybridConfig { r0, seed, ..Default::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    if draws == 0 || draws > 1_000_000 {
        return Err("draws must lie in 1..=1000000".into());
    }
    let inst = generate_instance(&InstanceFamilySpec::new(Family::MultiKnapsack, 8, 2, 0.8, seed)).map_err(|e| e.to_string())?;
    let lp = LpSolver::new().solve_default(&inst, &[], None).map_err(|e| e.to_string())?;
    let cands: Vec<usize> = (0..inst.num_int()).collect();
    let store = PseudocostStore::new(inst.num_int());
    let db = if below_threshold { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pc = 0;
    for _ in 0..draws {
        let (_, branch) = hybrid_select(db, 0.0, &cfg, &mut rng, &inst, &lp.x, &cands, &store).map_err(|e| e.to_string())?;
        pc += usize::from(branch == HybridBranch::Pseudocost);
    }
    let out = Frequency {
        draws,
        pseudocost: pc,
        active_constraint: draws - pc,
        pc_fraction: pc as f64 / draws as f64,
        expected: if below_threshold { r0 } else { 1.0 - r0 },
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Point {
    ret: f64,
    value: f64,
    ratio: f64,
    selected: bool,
}

#[derive(Serialize)]
struct SelectionDemo {
    points: Vec<Point>,
    threshold: f64,
    kept: usize,
    violation_fraction: f64,
}

/// Collects hybrid episodes on small knapsacks, fits an envelope and keeps
/// the top `p` percent.
pub fn select_demo_json(seed: u64, episodes: usize, p: f64) -> Result<String, String> {
    if episodes == 0 || episodes > 20 {
        return Err("episodes must lie in 1..=20".into());
    }
    let mut recorded = vec![];
    for k in 0..episodes as u64 {
        let inst = generate_instance(&InstanceFamilySpec::new(Family::MultiKnapsack, 14, 4, 0.8, seed.wrapping_add(k))).map_err(|e| e.to_string())?;
        let mut policy = Hybrid::new(HybridConfig { seed: seed.wrapping_add(k), ..Default::default() }).map_err(|e| e.to_string())?;
        let cfg = BnbConfig { budget: Budget::nodes(20), record_episode: true, ..Default::default() };
        let ep = solve(&inst, &mut policy, &cfg).map_err(|e| e.to_string())?.episode.expect("recording enabled");
        if !ep.transitions.is_empty() {
            recorded.push(ep);
        }
    }
    let set = compute_returns(&recorded, 1.0).map_err(|e| e.to_string())?;
    let cfg = EnvelopeConfig { epochs: 8, hidden: 16, seed, p, ..Default::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    let (model, report) = train_envelope(&set, &cfg).map_err(|e| e.to_string())?;
    let values = set
        .entries
        .iter()
        .map(|e| model.value(e.obs.as_ref().expect("recorded observation"), &e.candidates))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| e.to_string())?;
    let sel = select_top(&set.returns(), &values, p).map_err(|e| e.to_string())?;
    let mut chosen = vec![false; values.len()];
    sel.selected.iter().for_each(|&i| chosen[i] = true);
    let points = sel.ranking.iter().map(|r| Point { ret: r.ret, value: r.value, ratio: r.ratio, selected: chosen[r.index] }).collect();
    let out = SelectionDemo { points, threshold: sel.threshold, kept: sel.selected.len(), violation_fraction: report.violation_fraction };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn solve_trace(family: &str, n: usize, m: usize, seed: u64, policies: &str, max_clock: f64) -> Result<String, JsValue> {
    solve_trace_json(family, n, m, seed, policies, max_clock).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn hybrid_frequency(r0: f64, below_threshold: bool, draws: usize, seed: u64) -> Result<String, JsValue> {
    hybrid_frequency_json(r0, below_threshold, draws, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn select_demo(seed: u64, episodes: usize, p: f64) -> Result<String, JsValue> {
    select_demo_json(seed, episodes, p).map_err(|e| JsValue::from_str(&e))
}
