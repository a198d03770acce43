//! Variable selection rules and the policy interface the search calls at
//! every branched node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{effective_bounds, frac_part, is_fractional, BoundOverride, LpError, LpSolution, LpSolver, FEAS_TOL};
use crate::milp::MilpInstance;
use crate::observation::{extract_observation, BipartiteObservation, NodeView, ObservationError};

/// Floor applied to both factors of the product score.
pub const SCORE_EPSILON: f64 = 1e-6;
/// Objective gain assigned to an infeasible strong-branching child.
pub const INFEASIBLE_GAIN: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BranchError {
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("policy failure: {0}")]
    Policy(String),
}

/// Product score `max(a, eps) * max(b, eps)`.
pub fn product_score(a: f64, b: f64, eps: f64) -> f64 {
    a.max(eps) * b.max(eps)
}

/// Index into `candidates` of the highest score; near-equal scores resolve to
/// the lowest variable index.
fn argmax_lowest(candidates: &[usize], scores: &[f64]) -> Result<usize, BranchError> {
    let mut best: Option<(usize, f64)> = None;
    for (&j, &s) in candidates.iter().zip(scores) {
        best = match best {
            None => Some((j, s)),
            Some((bj, bs)) => {
                let tol = 1e-12 * bs.abs() + 1e-15;
                if s > bs + tol || ((s - bs).abs() <= tol && j < bj) {
                    Some((j, s))
                } else {
                    Some((bj, bs))
                }
            }
        };
    }
    best.map(|(j, _)| j).ok_or(BranchError::EmptyCandidates)
}

pub fn most_infeasible_select(x: &[f64], candidates: &[usize]) -> Result<usize, BranchError> {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&j| {
            let f = frac_part(x[j]);
            f.min(1.0 - f)
        })
        .collect();
    argmax_lowest(candidates, &scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// Running averages of per-unit objective gain, per integer variable and
/// branching direction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudocostStore {
    up: Vec<f64>,
    down: Vec<f64>,
    up_count: Vec<u64>,
    down_count: Vec<u64>,
}

impl PseudocostStore {
    pub fn new(num_int: usize) -> Self {
        PseudocostStore {
            up: vec![0.0; num_int],
            down: vec![0.0; num_int],
            up_count: vec![0; num_int],
            down_count: vec![0; num_int],
        }
    }

    /// `Psi+`, or 1 before the first upward observation.
    pub fn psi_up(&self, j: usize) -> f64 {
        if self.up_count[j] == 0 { 1.0 } else { self.up[j] }
    }

    pub fn psi_down(&self, j: usize) -> f64 {
        if self.down_count[j] == 0 { 1.0 } else { self.down[j] }
    }

    pub fn count(&self, j: usize, dir: Direction) -> u64 {
        match dir {
            Direction::Up => self.up_count[j],
            Direction::Down => self.down_count[j],
        }
    }

    /// Folds one child observation into the running mean. Infeasible or
    /// otherwise non-optimal children leave the store untouched.
    pub fn update(&mut self, j: usize, dir: Direction, parent_obj: f64, child: &LpSolution, distance: f64) {
        if !child.is_optimal() || distance <= 0.0 {
            return;
        }
        self.record(j, dir, (child.objective - parent_obj).max(0.0) / distance);
    }

    pub fn record(&mut self, j: usize, dir: Direction, unit_gain: f64) {
        let (mean, count) = match dir {
            Direction::Up => (&mut self.up[j], &mut self.up_count[j]),
            Direction::Down => (&mut self.down[j], &mut self.down_count[j]),
        };
        *count += 1;
        *mean += (unit_gain - *mean) / *count as f64;
    }

    /// Multiplies every recorded mean; the default of 1 for unobserved
    /// directions is not a recorded value and stays 1.
    pub fn scaled(&self, factor: f64) -> PseudocostStore {
        PseudocostStore {
            up: self.up.iter().map(|v| v * factor).collect(),
            down: self.down.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn pc_score(x: f64, psi_down: f64, psi_up: f64, eps: f64) -> f64 {
    product_score((x - x.floor()) * psi_down, (x.ceil() - x) * psi_up, eps)
}

pub fn pc_select(x: &[f64], candidates: &[usize], store: &PseudocostStore, eps: f64) -> Result<usize, BranchError> {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&j| pc_score(x[j], store.psi_down(j), store.psi_up(j), eps))
        .collect();
    argmax_lowest(candidates, &scores)
}

/// Everything a policy may look at when choosing a branching variable.
pub struct NodeContext<'a> {
    pub instance: &'a MilpInstance,
    pub solver: &'a LpSolver,
    pub node_id: usize,
    pub depth: usize,
    pub overrides: &'a [BoundOverride],
    pub lp: &'a LpSolution,
    pub candidates: &'a [usize],
    /// Current global dual bound.
    pub dual_bound: f64,
    pub pseudocosts: &'a mut PseudocostStore,
    /// Simplex iterations spent by the policy itself (probing, diving).
    pub extra_iterations: u64,
    /// Children computed while probing, reusable by the search.
    pub probe_cache: Option<(usize, LpSolution, LpSolution)>,
    observation: Option<BipartiteObservation>,
}

impl<'a> NodeContext<'a> {
    pub fn new(
        instance: &'a MilpInstance,
        solver: &'a LpSolver,
        overrides: &'a [BoundOverride],
        lp: &'a LpSolution,
        candidates: &'a [usize],
        pseudocosts: &'a mut PseudocostStore,
    ) -> Self {
        NodeContext {
            instance,
            solver,
            node_id: 0,
            depth: 0,
            overrides,
            lp,
            candidates,
            dual_bound: lp.objective,
            pseudocosts,
            extra_iterations: 0,
            probe_cache: None,
            observation: None,
        }
    }

    pub fn observation(&mut self) -> Result<&BipartiteObservation, BranchError> {
        if self.observation.is_none() {
            let (lower, upper) = effective_bounds(self.instance, self.overrides)?;
            let view = NodeView { lower: &lower, upper: &upper, depth: self.depth };
            let obs = extract_observation(self.instance, view, self.lp, self.candidates, self.pseudocosts)?;
            self.observation = Some(obs);
        }
        Ok(self.observation.as_ref().expect("just filled"))
    }

    pub fn take_observation(&mut self) -> Result<BipartiteObservation, BranchError> {
        self.observation()?;
        Ok(self.observation.take().expect("just filled"))
    }
}

/// A branching variable selection rule.
pub trait BranchingPolicy {
    fn name(&self) -> &str;

    /// Returns the chosen variable; it must be one of `ctx.candidates`.
    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError>;
}

#[derive(Debug, Clone, Default)]
pub struct MostInfeasible;

impl BranchingPolicy for MostInfeasible {
    fn name(&self) -> &str {
        "most-infeasible"
    }
    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        most_infeasible_select(&ctx.lp.x, ctx.candidates)
    }
}

#[derive(Debug, Clone)]
pub struct Pseudocost {
    pub epsilon: f64,
}

impl Default for Pseudocost {
    fn default() -> Self {
        Pseudocost { epsilon: SCORE_EPSILON }
    }
}

impl BranchingPolicy for Pseudocost {
    fn name(&self) -> &str {
        "pseudocost"
    }
    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        pc_select(&ctx.lp.x, ctx.candidates, ctx.pseudocosts, self.epsilon)
    }
}

/// Strong branching: solves both children of every candidate.
pub fn sb_select(ctx: &mut NodeContext<'_>, eps: f64) -> Result<usize, BranchError> {
    if ctx.candidates.is_empty() {
        return Err(BranchError::EmptyCandidates);
    }
    let parent = ctx.lp.objective;
    let gain = |child: &LpSolution| if child.is_optimal() { child.objective - parent } else { INFEASIBLE_GAIN };
    let mut scores = Vec::with_capacity(ctx.candidates.len());
    let mut probes = Vec::with_capacity(ctx.candidates.len());
    for &j in ctx.candidates {
        let (down, up) = ctx.solver.probe_children(ctx.instance, ctx.overrides, ctx.lp, j)?;
        ctx.extra_iterations += down.iterations + up.iterations + 2;
        let x = ctx.lp.x[j];
        ctx.pseudocosts.update(j, Direction::Down, parent, &down, x - x.floor());
        ctx.pseudocosts.update(j, Direction::Up, parent, &up, x.ceil() - x);
        scores.push(product_score(gain(&down), gain(&up), eps));
        probes.push((down, up));
    }
    let best = argmax_lowest(ctx.candidates, &scores)?;
    let k = ctx.candidates.iter().position(|&j| j == best).expect("argmax returns a candidate");
    let (down, up) = probes.swap_remove(k);
    ctx.probe_cache = Some((best, down, up));
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct StrongBranching {
    pub epsilon: f64,
}

impl Default for StrongBranching {
    fn default() -> Self {
        StrongBranching { epsilon: SCORE_EPSILON }
    }
}

impl BranchingPolicy for StrongBranching {
    fn name(&self) -> &str {
        "strong-branching"
    }
    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        sb_select(ctx, self.epsilon)
    }
}

/// Blend weights of the four active-constraint sub-scores.
pub type AcWeights = [f64; 4];

/// Active-constraint scores for each candidate, in candidate order.
///
/// Over the rows tight at `x`: W1 counts rows touching the candidate, W2
/// divides each such row by the number of candidates it touches, W3 sums
/// `|a_ij| / ||A_i||_2`, and W4 sums `|a_ij|` over the candidates' total
/// magnitude in the row. Each is divided by its largest value over the
/// candidates before blending.
pub fn ac_scores(inst: &MilpInstance, x: &[f64], candidates: &[usize], weights: &AcWeights) -> Vec<f64> {
    let k = candidates.len();
    let mut w = [vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    for (i, row) in inst.rows().iter().enumerate() {
        if inst.rhs()[i] - row.dot(x) > FEAS_TOL {
            continue;
        }
        let coeffs: Vec<f64> = candidates.iter().map(|&j| row.coeff(j)).collect();
        let touching = coeffs.iter().filter(|a| **a != 0.0).count();
        if touching == 0 {
            continue;
        }
        let norm = row.norm2();
        let cand_mass: f64 = coeffs.iter().map(|a| a.abs()).sum();
        for (c, &a) in coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            w[0][c] += 1.0;
            w[1][c] += 1.0 / touching as f64;
            w[2][c] += a.abs() / norm;
            w[3][c] += a.abs() / cand_mass;
        }
    }
    for sub in &mut w {
        let max = sub.iter().fold(0.0f64, |a, &v| a.max(v));
        if max > 0.0 {
            sub.iter_mut().for_each(|v| *v /= max);
        }
    }
    (0..k).map(|c| (0..4).map(|s| weights[s] * w[s][c]).sum()).collect()
}

/// Highest active-constraint score; falls back to most-infeasible when no
/// candidate touches an active row or every weight is zero.
pub fn ac_select(inst: &MilpInstance, x: &[f64], candidates: &[usize], weights: &AcWeights) -> Result<usize, BranchError> {
    let scores = ac_scores(inst, x, candidates, weights);
    if scores.iter().all(|&s| s == 0.0) {
        return most_infeasible_select(x, candidates);
    }
    argmax_lowest(candidates, &scores)
}

#[derive(Debug, Clone)]
pub struct ActiveConstraint {
    pub weights: AcWeights,
}

impl Default for ActiveConstraint {
    fn default() -> Self {
        ActiveConstraint { weights: [0.25; 4] }
    }
}

impl BranchingPolicy for ActiveConstraint {
    fn name(&self) -> &str {
        "active-constraint"
    }
    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        ac_select(ctx.instance, &ctx.lp.x, ctx.candidates, &self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum Db0Mode {
    /// Root bound plus 20% of the gap to a most-infeasible dive.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub db0: Db0Mode,
    pub r0: f64,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig { db0: Db0Mode::Auto, r0: 0.5, seed: 0, epsilon: SCORE_EPSILON }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<(), BranchError> {
        if !(self.r0 > 0.0 && self.r0 < 1.0) {
            return Err(BranchError::Config(format!("hybrid.r0 = {} must lie in (0, 1)", self.r0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HybridBranch {
    Pseudocost,
    ActiveConstraint,
}

/// The sampling rule: pseudocost when `db <= DB0` and `r <= R0`, or when
/// `db > DB0` and `r > R0`; active-constraint otherwise.
pub fn hybrid_branch(db: f64, db0: f64, r0: f64, r: f64) -> HybridBranch {
    if (db <= db0 && r <= r0) || (db > db0 && r > r0) {
        HybridBranch::Pseudocost
    } else {
        HybridBranch::ActiveConstraint
    }
}

/// One hybrid decision. Draws `r`, and `r1..r4` when the active-constraint
/// branch is taken.
pub fn hybrid_select<R: Rng>(
    db: f64,
    db0: f64,
    config: &HybridConfig,
    rng: &mut R,
    inst: &MilpInstance,
    x: &[f64],
    candidates: &[usize],
    store: &PseudocostStore,
) -> Result<(usize, HybridBranch), BranchError> {
    if candidates.is_empty() {
        return Err(BranchError::EmptyCandidates);
    }
    let r: f64 = rng.random();
    let branch = hybrid_branch(db, db0, config.r0, r);
    let choice = match branch {
        HybridBranch::Pseudocost => pc_select(x, candidates, store, config.epsilon)?,
        HybridBranch::ActiveConstraint => {
            let weights: AcWeights = std::array::from_fn(|_| rng.random());
            ac_select(inst, x, candidates, &weights)?
        }
    };
    Ok((choice, branch))
}

/// Rounds along most-infeasible choices until an integral relaxation turns
/// up. Returns the objective found (if any) and the iterations spent.
pub fn most_infeasible_dive(
    inst: &MilpInstance,
    solver: &LpSolver,
    overrides: &[BoundOverride],
    lp: &LpSolution,
) -> Result<(Option<f64>, u64), LpError> {
    let mut overrides = overrides.to_vec();
    let mut current = lp.clone();
    let mut spent = 0;
    for _ in 0..=inst.num_int() {
        let cands: Vec<usize> = (0..inst.num_int()).filter(|&j| is_fractional(current.x[j])).collect();
        if cands.is_empty() {
            return Ok((Some(current.objective), spent));
        }
        let j = most_infeasible_select(&current.x, &cands).expect("nonempty");
        let v = current.x[j];
        let down = BoundOverride::upper(j, v.floor());
        let up = BoundOverride::lower(j, v.ceil());
        let order = if frac_part(v) >= 0.5 { [up, down] } else { [down, up] };
        let mut advanced = false;
        for o in order {
            let mut trial = overrides.clone();
            trial.push(o);
            let child = solver.solve_default(inst, &trial, Some(&current.basis))?;
            spent += child.iterations + 1;
            if child.is_optimal() {
                overrides = trial;
                current = child;
                advanced = true;
                break;
            }
        }
        if !advanced {
            return Ok((None, spent));
        }
    }
    Ok((None, spent))
}

/// The data-collection expert mixing pseudocost and active-constraint
/// choices according to the dual bound and a coin flip.
#[derive(Debug, Clone)]
pub struct Hybrid {
    pub config: HybridConfig,
    rng: ChaCha8Rng,
    db0: Option<f64>,
    pub pc_decisions: u64,
    pub ac_decisions: u64,
}

impl Hybrid {
    pub fn new(config: HybridConfig) -> Result<Self, BranchError> {
        config.validate()?;
        Ok(Hybrid {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            db0: match config.db0 {
                Db0Mode::Fixed(v) => Some(v),
                Db0Mode::Auto => None,
            },
            config,
            pc_decisions: 0,
            ac_decisions: 0,
        })
    }

    pub fn threshold(&self) -> Option<f64> {
        self.db0
    }
}

impl BranchingPolicy for Hybrid {
    fn name(&self) -> &str {
        "hybrid"
    }

    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        let db0 = match self.db0 {
            Some(v) => v,
            None => {
                let root = ctx.lp.objective;
                let (dive, spent) = most_infeasible_dive(ctx.instance, ctx.solver, ctx.overrides, ctx.lp)?;
                ctx.extra_iterations += spent;
                let v = match dive {
                    Some(inc) => root + 0.2 * (inc - root),
                    None => root,
                };
                self.db0 = Some(v);
                v
            }
        };
        let (j, branch) = hybrid_select(
            ctx.dual_bound,
            db0,
            &self.config,
            &mut self.rng,
            ctx.instance,
            &ctx.lp.x,
            ctx.candidates,
            ctx.pseudocosts,
        )?;
        match branch {
            HybridBranch::Pseudocost => self.pc_decisions += 1,
            HybridBranch::ActiveConstraint => self.ac_decisions += 1,
        }
        Ok(j)
    }
}

/// Uniform choice among the candidates.
#[derive(Debug, Clone)]
pub struct RandomBranching {
    rng: ChaCha8Rng,
}

impl RandomBranching {
    pub fn new(seed: u64) -> Self {
        RandomBranching { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl BranchingPolicy for RandomBranching {
    fn name(&self) -> &str {
        "random"
    }
    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        if ctx.candidates.is_empty() {
            return Err(BranchError::EmptyCandidates);
        }
        Ok(ctx.candidates[self.rng.random_range(0..ctx.candidates.len())])
    }
}
