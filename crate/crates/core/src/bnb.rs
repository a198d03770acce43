//! Best-bound branch and bound with dual-bound tracking on a deterministic
//! clock.
//!
//! The clock starts at 0 when the root relaxation is solved. Every later LP
//! solve advances it by its simplex iterations plus one, so two solves never
//! share a timestamp. Work a policy does on its own (probing, diving) is
//! charged the same way.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bail::{Episode, Transition};
use crate::branching::{BranchError, BranchingPolicy, Direction, NodeContext, PseudocostStore};
use crate::lp::{is_fractional, BoundOverride, LpError, LpSolution, LpSolver, LpStatus, FEAS_TOL};
use crate::milp::MilpInstance;
use crate::observation::f_dim;

#[derive(Debug, Error)]
pub enum BnbError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("node {node}: {source}")]
    Branch { node: usize, source: BranchError },
    #[error("node {node}: policy returned {index}, which is not a branching candidate")]
    InvalidChoice { node: usize, index: usize },
    #[error("root relaxation is unbounded")]
    UnboundedRoot,
    #[error("LP solve hit the iteration limit at node {0}")]
    IterationLimit(usize),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("first event at clock {0}, expected 0")]
    FirstClock(f64),
    #[error("clock not strictly increasing at event {0}")]
    ClockOrder(usize),
    #[error("dual bound decreases at event {0}")]
    BoundOrder(usize),
    #[error("non-finite value at event {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Cumulative simplex iterations; reproducible.
    Pseudo,
    /// Microseconds since the root solve; not reproducible.
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_nodes: Option<usize>,
    pub max_clock: Option<f64>,
}

impl Budget {
    pub const UNLIMITED: Budget = Budget { max_nodes: None, max_clock: None };

    pub fn clock(max_clock: f64) -> Budget {
        Budget { max_nodes: None, max_clock: Some(max_clock) }
    }

    pub fn nodes(max_nodes: usize) -> Budget {
        Budget { max_nodes: Some(max_nodes), max_clock: None }
    }

    pub fn validate(&self) -> Result<(), BnbError> {
        if self.max_nodes == Some(0) {
            return Err(BnbError::InvalidBudget("max_nodes must be positive".into()));
        }
        if let Some(c) = self.max_clock {
            if !(c > 0.0 && c.is_finite()) {
                return Err(BnbError::InvalidBudget(format!("max_clock must be positive and finite, got {c}")));
            }
        }
        Ok(())
    }
}

/// Global dual bound over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTrace {
    /// `(clock, z*)` at every improvement.
    pub events: Vec<(f64, f64)>,
    pub horizon: f64,
    pub opt_value: f64,
    pub clock_mode: ClockMode,
}

impl DualTrace {
    pub fn validate(&self) -> Result<(), TraceError> {
        for (k, &(c, z)) in self.events.iter().enumerate() {
            if !c.is_finite() || !z.is_finite() {
                return Err(TraceError::NonFinite(k));
            }
            if k == 0 && c != 0.0 {
                return Err(TraceError::FirstClock(c));
            }
            if k > 0 {
                let (pc, pz) = self.events[k - 1];
                if c <= pc {
                    return Err(TraceError::ClockOrder(k));
                }
                if z < pz {
                    return Err(TraceError::BoundOrder(k));
                }
            }
        }
        Ok(())
    }

    /// `integral of z*` over `[from, to]`, clipped to `[0, horizon]`. The
    /// bound is held constant after the last event.
    pub fn area(&self, from: f64, to: f64) -> f64 {
        let to = to.min(self.horizon);
        let mut total = 0.0;
        for (k, &(c, z)) in self.events.iter().enumerate() {
            let end = self.events.get(k + 1).map_or(self.horizon, |e| e.0).min(to);
            let start = c.max(from);
            if end > start {
                total += z * (end - start);
            }
        }
        total
    }

    /// The constant that turns the dual integral into a reward: `T * opt`.
    pub fn reward_constant(&self) -> f64 {
        self.horizon * self.opt_value
    }
}

/// `T * opt - integral of z*`.
pub fn dual_integral(trace: &DualTrace) -> Result<f64, TraceError> {
    trace.validate()?;
    if trace.events.is_empty() {
        return Ok(0.0);
    }
    Ok(trace.reward_constant() - trace.area(0.0, trace.horizon))
}

pub fn cumulative_reward(trace: &DualTrace, constant: f64) -> Result<f64, TraceError> {
    Ok(constant - dual_integral(trace)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    BudgetExhausted,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub incumbent: Option<Vec<f64>>,
    pub incumbent_value: Option<f64>,
    pub nodes_processed: usize,
    pub clock: f64,
    pub trace: DualTrace,
    pub episode: Option<Episode>,
}

#[derive(Debug, Clone)]
pub struct BnbConfig {
    pub budget: Budget,
    pub clock_mode: ClockMode,
    pub record_episode: bool,
    pub solver: LpSolver,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig { budget: Budget::UNLIMITED, clock_mode: ClockMode::Pseudo, record_episode: false, solver: LpSolver::new() }
    }
}

struct Node {
    id: usize,
    depth: usize,
    overrides: Vec<BoundOverride>,
    lp: LpSolution,
    candidates: Vec<usize>,
}

struct Open(Node);

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Open {}
impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Open {
    // Max-heap order: lowest objective first, then lowest id.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.lp.objective.total_cmp(&self.0.lp.objective).then(other.0.id.cmp(&self.0.id))
    }
}

fn candidates(inst: &MilpInstance, x: &[f64]) -> Vec<usize> {
    (0..inst.num_int()).filter(|&j| is_fractional(x[j])).collect()
}

fn prunable(obj: f64, incumbent: Option<f64>) -> bool {
    incumbent.is_some_and(|inc| obj >= inc - FEAS_TOL * (1.0 + inc.abs()))
}

struct Clock {
    mode: ClockMode,
    value: f64,
    /// Only read in wall mode; `Instant` is unavailable on some targets.
    start: Option<Instant>,
}

impl Clock {
    fn advance(&mut self, iterations: u64) {
        self.value = match self.mode {
            ClockMode::Pseudo => self.value + iterations as f64,
            ClockMode::Wall => {
                let micros = self.start.map_or(0.0, |s| s.elapsed().as_micros() as f64);
                micros.max(self.value + 1.0)
            }
        };
    }
}

/// Lifts `z*` to the best open bound (or the incumbent) if that improved it.
fn raise_bound(z_star: &mut f64, open: &BinaryHeap<Open>, incumbent: &Option<(Vec<f64>, f64)>, now: f64, events: &mut Vec<(f64, f64)>) {
    let best_open = open.peek().map_or(f64::INFINITY, |o| o.0.lp.objective);
    let bound = best_open.min(incumbent.as_ref().map_or(f64::INFINITY, |i| i.1));
    if bound.is_finite() && bound > *z_star {
        *z_star = bound;
        let last = events.last_mut().expect("root event");
        if last.0 == now {
            last.1 = bound;
        } else {
            debug_assert!(now > last.0);
            events.push((now, bound));
        }
    }
}

struct Decision {
    node: usize,
    clock: f64,
    obs: Arc<crate::observation::BipartiteObservation>,
    candidates: Vec<usize>,
    action: usize,
}

/// Solves `inst` to optimality or until the budget runs out, asking `policy`
/// for every branching variable.
pub fn solve(inst: &MilpInstance, policy: &mut dyn BranchingPolicy, config: &BnbConfig) -> Result<SolveResult, BnbError> {
    config.budget.validate()?;
    let solver = &config.solver;
    let root = solver.solve_default(inst, &[], None)?;
    let start = (config.clock_mode == ClockMode::Wall).then(Instant::now);
    let mut clock = Clock { mode: config.clock_mode, value: 0.0, start };
    let mut pseudocosts = PseudocostStore::new(inst.num_int());
    match root.status {
        LpStatus::Optimal => {}
        LpStatus::Unbounded => return Err(BnbError::UnboundedRoot),
        LpStatus::IterationLimit => return Err(BnbError::IterationLimit(0)),
        LpStatus::Infeasible => {
            let trace = DualTrace { events: vec![], horizon: 0.0, opt_value: 0.0, clock_mode: config.clock_mode };
            let episode = config.record_episode.then(|| Episode {
                instance: inst.name().to_string(),
                policy: policy.name().to_string(),
                status: SolveStatus::Infeasible,
                transitions: vec![],
                trace: trace.clone(),
                tail_reward: 0.0,
            });
            return Ok(SolveResult {
                status: SolveStatus::Infeasible,
                incumbent: None,
                incumbent_value: None,
                nodes_processed: 0,
                clock: 0.0,
                trace,
                episode,
            });
        }
    }

    let mut events = vec![(0.0, root.objective)];
    let mut z_star = root.objective;
    let mut incumbent: Option<(Vec<f64>, f64)> = None;
    let mut open = BinaryHeap::new();
    let mut next_id = 1;
    let mut nodes_processed = 0;
    let mut decisions: Vec<Decision> = Vec::new();
    let mut exhausted = false;

    let accept = |lp: LpSolution, overrides: Vec<BoundOverride>, depth: usize, id: usize, incumbent: &mut Option<(Vec<f64>, f64)>, open: &mut BinaryHeap<Open>| {
        if !lp.is_optimal() || prunable(lp.objective, incumbent.as_ref().map(|i| i.1)) {
            return;
        }
        let cands = candidates(inst, &lp.x);
        if cands.is_empty() {
            let mut x = lp.x.clone();
            for v in x.iter_mut().take(inst.num_int()) {
                *v = v.round();
            }
            let value = inst.objective_value(&x);
            if incumbent.as_ref().is_none_or(|i| value < i.1) {
                *incumbent = Some((x, value));
            }
        } else {
            open.push(Open(Node { id, depth, overrides, lp, candidates: cands }));
        }
    };
    accept(root, vec![], 0, 0, &mut incumbent, &mut open);

    raise_bound(&mut z_star, &open, &incumbent, clock.value, &mut events);

    while let Some(Open(node)) = open.pop() {
        if prunable(node.lp.objective, incumbent.as_ref().map(|i| i.1)) {
            raise_bound(&mut z_star, &open, &incumbent, clock.value, &mut events);
            continue;
        }
        let over_nodes = config.budget.max_nodes.is_some_and(|n| nodes_processed >= n);
        let over_clock = config.budget.max_clock.is_some_and(|c| clock.value >= c);
        if over_nodes || over_clock {
            open.push(Open(node));
            exhausted = true;
            break;
        }
        nodes_processed += 1;
        let dual_bound = z_star;
        let mut ctx = NodeContext::new(inst, solver, &node.overrides, &node.lp, &node.candidates, &mut pseudocosts);
        ctx.node_id = node.id;
        ctx.depth = node.depth;
        ctx.dual_bound = dual_bound;
        let branch_err = |source| BnbError::Branch { node: node.id, source };
        if config.record_episode {
            ctx.observation().map_err(branch_err)?;
        }
        let choice = policy.select(&mut ctx).map_err(branch_err)?;
        if !node.candidates.contains(&choice) {
            return Err(BnbError::InvalidChoice { node: node.id, index: choice });
        }
        let extra = ctx.extra_iterations;
        let cached = ctx.probe_cache.take().filter(|p| p.0 == choice);
        let obs = if config.record_episode { Some(Arc::new(ctx.take_observation().map_err(branch_err)?)) } else { None };
        drop(ctx);
        if extra > 0 {
            clock.advance(extra);
        }

        let v = node.lp.x[choice];
        let mut down_over = node.overrides.clone();
        down_over.push(BoundOverride::upper(choice, v.floor()));
        let mut up_over = node.overrides.clone();
        up_over.push(BoundOverride::lower(choice, v.ceil()));
        let (down, up) = match cached {
            Some((_, d, u)) => (d, u),
            None => {
                let d = solver.solve_default(inst, &down_over, Some(&node.lp.basis))?;
                clock.advance(d.iterations + 1);
                let u = solver.solve_default(inst, &up_over, Some(&node.lp.basis))?;
                clock.advance(u.iterations + 1);
                pseudocosts.update(choice, Direction::Down, node.lp.objective, &d, v - v.floor());
                pseudocosts.update(choice, Direction::Up, node.lp.objective, &u, v.ceil() - v);
                (d, u)
            }
        };
        for child in [&down, &up] {
            if child.status == LpStatus::IterationLimit {
                return Err(BnbError::IterationLimit(node.id));
            }
        }
        accept(down, down_over, node.depth + 1, next_id, &mut incumbent, &mut open);
        accept(up, up_over, node.depth + 1, next_id + 1, &mut incumbent, &mut open);
        next_id += 2;
        raise_bound(&mut z_star, &open, &incumbent, clock.value, &mut events);
        if let Some(obs) = obs {
            decisions.push(Decision { node: node.id, clock: clock.value, obs, candidates: node.candidates.clone(), action: choice });
        }
    }

    let status = if exhausted {
        SolveStatus::BudgetExhausted
    } else if incumbent.is_some() {
        SolveStatus::Optimal
    } else {
        SolveStatus::Infeasible
    };
    let horizon = config.budget.max_clock.unwrap_or(clock.value);
    let opt_value = incumbent.as_ref().map_or(z_star, |i| i.1);
    events.retain(|e| e.0 <= horizon);
    if incumbent.is_some() {
        // LP objectives can sit an ulp above the recomputed incumbent value.
        for e in &mut events {
            debug_assert!(e.1 <= opt_value + 1e-6 * opt_value.abs().max(1.0));
            e.1 = e.1.min(opt_value);
        }
    }
    let trace = DualTrace { events, horizon, opt_value, clock_mode: config.clock_mode };
    trace.validate()?;

    let episode = config.record_episode.then(|| {
        let mut transitions: Vec<Transition> = Vec::with_capacity(decisions.len());
        let mut prev = 0.0;
        for d in decisions {
            let reward = trace.area(prev, d.clock);
            prev = d.clock.max(prev);
            let digest = f_dim(&d.obs, &d.candidates);
            if let Some(last) = transitions.last_mut() {
                last.next_digest = Some(digest);
                last.next_candidates = Some(d.candidates.clone());
            }
            transitions.push(Transition {
                node: d.node,
                clock: d.clock,
                digest,
                obs: d.obs,
                candidates: d.candidates,
                action: d.action,
                reward,
                next_digest: None,
                next_candidates: None,
                done: false,
            });
        }
        if let Some(last) = transitions.last_mut() {
            last.done = true;
        }
        Episode {
            instance: inst.name().to_string(),
            policy: policy.name().to_string(),
            status,
            transitions,
            tail_reward: trace.area(prev, trace.horizon),
            trace: trace.clone(),
        }
    });

    let (incumbent, incumbent_value) = match incumbent {
        Some((x, v)) => (Some(x), Some(v)),
        None => (None, None),
    };
    Ok(SolveResult { status, incumbent, incumbent_value, nodes_processed, clock: clock.value, trace, episode })
}
