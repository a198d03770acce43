//! Dense bounded-variable primal simplex for the LP relaxations solved at
//! every branch-and-bound node.
//!
//! Rows `A x <= b` get one slack each, so the working system is
//! `[A | I] (x, s) = b` with `s >= 0`. Phase one minimizes the sum of bound
//! violations of the basic variables, which lets the same code start from the
//! slack basis or from any warm basis whose values became infeasible after a
//! bound change (the usual case for child nodes).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::milp::MilpInstance;

/// Primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-7;
/// Integrality tolerance.
pub const INT_TOL: f64 = 1e-6;

const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-11;
const DRIFT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: u64 = 50;
const DRIFT_CHECK_EVERY: u64 = 10;
const MAX_RESTARTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("override on variable {var} loosens its {side:?} bound from {old} to {new}")]
    LooseningOverride { var: usize, side: BoundSide, old: f64, new: f64 },
    #[error("override references variable {0} which does not exist")]
    UnknownVariable(usize),
    #[error("variable {var} has integral value {value}; it cannot be branched on")]
    NotFractional { var: usize, value: f64 },
    #[error("parent relaxation is not optimal ({0:?})")]
    NotOptimal(LpStatus),
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundSide {
    Lower,
    Upper,
}

/// A bound tightening applied on top of the instance bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOverride {
    pub var: usize,
    pub side: BoundSide,
    pub value: f64,
}

impl BoundOverride {
    pub fn lower(var: usize, value: f64) -> Self {
        BoundOverride { var, side: BoundSide::Lower, value }
    }
    pub fn upper(var: usize, value: f64) -> Self {
        BoundOverride { var, side: BoundSide::Upper, value }
    }
}

/// Basic columns (over structurals `0..n` then slacks `n..n+m`) and, for the
/// nonbasic ones, whether they sit at their upper bound.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Basis {
    pub basic: Vec<usize>,
    pub at_upper: Vec<bool>,
}

impl Basis {
    pub fn is_basic(&self, col: usize) -> bool {
        self.basic.contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Structural values; meaningful when optimal.
    pub x: Vec<f64>,
    pub objective: f64,
    pub basis: Basis,
    pub iterations: u64,
    /// Row duals `y = c_B^T B^{-1}` (nonpositive at optimality for `<=` rows).
    pub duals: Vec<f64>,
    /// Structural reduced costs `c_j - y^T A_j`.
    pub reduced_costs: Vec<f64>,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    fn without_point(status: LpStatus, n: usize, m: usize, iterations: u64) -> Self {
        LpSolution {
            status,
            x: vec![f64::NAN; n],
            objective: if status == LpStatus::Infeasible { f64::INFINITY } else { f64::NEG_INFINITY },
            basis: Basis::default(),
            iterations,
            duals: vec![0.0; m],
            reduced_costs: vec![0.0; n],
        }
    }
}

pub fn frac_part(v: f64) -> f64 {
    v - v.floor()
}

pub fn is_fractional(v: f64) -> bool {
    let f = frac_part(v);
    f > INT_TOL && f < 1.0 - INT_TOL
}

/// Instance bounds with `overrides` applied in order.
pub fn effective_bounds(inst: &MilpInstance, overrides: &[BoundOverride]) -> Result<(Vec<f64>, Vec<f64>), LpError> {
    let mut lb = inst.lower().to_vec();
    let mut ub = inst.upper().to_vec();
    for o in overrides {
        if o.var >= lb.len() {
            return Err(LpError::UnknownVariable(o.var));
        }
        match o.side {
            BoundSide::Lower => {
                if o.value < lb[o.var] {
                    return Err(LpError::LooseningOverride { var: o.var, side: o.side, old: lb[o.var], new: o.value });
                }
                lb[o.var] = o.value;
            }
            BoundSide::Upper => {
                if o.value > ub[o.var] {
                    return Err(LpError::LooseningOverride { var: o.var, side: o.side, old: ub[o.var], new: o.value });
                }
                ub[o.var] = o.value;
            }
        }
    }
    Ok((lb, ub))
}

/// Reusable, single-threaded LP context.
#[derive(Debug, Clone, Default)]
pub struct LpSolver {
    pub iteration_limit: Option<u64>,
}

pub const DEFAULT_ITER_LIMIT: u64 = 200_000;

impl LpSolver {
    pub fn new() -> Self {
        LpSolver::default()
    }

    pub fn solve(
        &self,
        inst: &MilpInstance,
        overrides: &[BoundOverride],
        warm: Option<&Basis>,
        iter_limit: u64,
    ) -> Result<LpSolution, LpError> {
        let (lb, ub) = effective_bounds(inst, overrides)?;
        let (n, m) = (inst.num_vars(), inst.num_cons());
        if (0..n).any(|j| lb[j] > ub[j]) {
            return Ok(LpSolution::without_point(LpStatus::Infeasible, n, m, 0));
        }
        let mut simplex = Simplex::new(inst, lb, ub);
        let mut start = warm.filter(|b| simplex.accepts(b)).cloned();
        let mut total_iters = 0;
        for _ in 0..MAX_RESTARTS {
            simplex.install(start.as_ref());
            match simplex.run(iter_limit.saturating_sub(total_iters)) {
                Ok(status) => {
                    total_iters += simplex.iterations;
                    return Ok(simplex.solution(status, total_iters));
                }
                Err(_) => {
                    total_iters += simplex.iterations;
                    // Fall back to the always-nonsingular slack basis.
                    start = None;
                }
            }
        }
        Err(LpError::NumericalInstability(format!(
            "basis stayed singular after {MAX_RESTARTS} refactorization restarts"
        )))
    }

    pub fn solve_default(&self, inst: &MilpInstance, overrides: &[BoundOverride], warm: Option<&Basis>) -> Result<LpSolution, LpError> {
        self.solve(inst, overrides, warm, self.iteration_limit.unwrap_or(DEFAULT_ITER_LIMIT))
    }

    /// Solves both children of branching on `var` at a node with optimal
    /// relaxation `parent`, warm-started from the parent basis.
    pub fn probe_children(
        &self,
        inst: &MilpInstance,
        overrides: &[BoundOverride],
        parent: &LpSolution,
        var: usize,
    ) -> Result<(LpSolution, LpSolution), LpError> {
        if !parent.is_optimal() {
            return Err(LpError::NotOptimal(parent.status));
        }
        let value = *parent.x.get(var).ok_or(LpError::UnknownVariable(var))?;
        if !is_fractional(value) {
            return Err(LpError::NotFractional { var, value });
        }
        let mut down = overrides.to_vec();
        down.push(BoundOverride::upper(var, value.floor()));
        let mut up = overrides.to_vec();
        up.push(BoundOverride::lower(var, value.ceil()));
        let down = self.solve_default(inst, &down, Some(&parent.basis))?;
        let up = self.solve_default(inst, &up, Some(&parent.basis))?;
        Ok((down, up))
    }
}

struct Simplex<'a> {
    inst: &'a MilpInstance,
    n: usize,
    m: usize,
    /// Structural columns as (row, coefficient).
    cols: Vec<Vec<(usize, f64)>>,
    cost: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    x: Vec<f64>,
    head: Vec<usize>,
    pos: Vec<Option<usize>>,
    binv: Vec<f64>,
    iterations: u64,
}

#[derive(Debug)]
struct Singular;

impl<'a> Simplex<'a> {
    fn new(inst: &'a MilpInstance, lb: Vec<f64>, ub: Vec<f64>) -> Self {
        let (n, m) = (inst.num_vars(), inst.num_cons());
        let mut cols = vec![Vec::new(); n];
        for (i, row) in inst.rows().iter().enumerate() {
            for &(j, a) in row.entries() {
                cols[j].push((i, a));
            }
        }
        let mut cost = inst.objective().to_vec();
        cost.resize(n + m, 0.0);
        let mut lb_all = lb;
        let mut ub_all = ub;
        lb_all.resize(n + m, 0.0);
        ub_all.resize(n + m, f64::INFINITY);
        Simplex {
            inst,
            n,
            m,
            cols,
            cost,
            lb: lb_all,
            ub: ub_all,
            x: vec![0.0; n + m],
            head: Vec::new(),
            pos: vec![None; n + m],
            binv: vec![0.0; m * m],
            iterations: 0,
        }
    }

    fn ntot(&self) -> usize {
        self.n + self.m
    }

    fn accepts(&self, basis: &Basis) -> bool {
        let mut seen = vec![false; self.ntot()];
        basis.basic.len() == self.m
            && basis.basic.iter().all(|&j| j < self.ntot() && !std::mem::replace(&mut seen[j], true))
    }

    fn install(&mut self, basis: Option<&Basis>) {
        self.iterations = 0;
        self.head = match basis {
            Some(b) => b.basic.clone(),
            None => (self.n..self.ntot()).collect(),
        };
        self.pos = vec![None; self.ntot()];
        for (r, &j) in self.head.iter().enumerate() {
            self.pos[j] = Some(r);
        }
        for j in 0..self.ntot() {
            if self.pos[j].is_some() {
                continue;
            }
            let want_upper = basis.and_then(|b| b.at_upper.get(j).copied()).unwrap_or(false);
            self.x[j] = self.resting_value(j, want_upper);
        }
    }

    fn resting_value(&self, j: usize, want_upper: bool) -> f64 {
        let (lo, hi) = (self.lb[j], self.ub[j]);
        if want_upper && hi.is_finite() {
            hi
        } else if lo.is_finite() {
            lo
        } else if hi.is_finite() {
            hi
        } else {
            0.0
        }
    }

    /// Entry `(i, j)` of `[A | I]` restricted to column `j`, as sparse pairs.
    fn column(&self, j: usize) -> ColumnRef<'_> {
        if j < self.n { ColumnRef::Structural(&self.cols[j]) } else { ColumnRef::Slack(j - self.n) }
    }

    fn refactor(&mut self) -> Result<(), Singular> {
        let m = self.m;
        let mut b = vec![0.0; m * m];
        for (r, &j) in self.head.iter().enumerate() {
            match self.column(j) {
                ColumnRef::Structural(col) => {
                    for &(i, a) in col {
                        b[i * m + r] = a;
                    }
                }
                ColumnRef::Slack(i) => b[i * m + r] = 1.0,
            }
        }
        self.binv = invert(&mut b, m).ok_or(Singular)?;
        Ok(())
    }

    /// `b - N x_N`.
    fn nonbasic_rhs(&self) -> Vec<f64> {
        let mut rhs = self.inst.rhs().to_vec();
        for j in 0..self.ntot() {
            if self.pos[j].is_some() || self.x[j] == 0.0 {
                continue;
            }
            let v = self.x[j];
            match self.column(j) {
                ColumnRef::Structural(col) => {
                    for &(i, a) in col {
                        rhs[i] -= a * v;
                    }
                }
                ColumnRef::Slack(i) => rhs[i] -= v,
            }
        }
        rhs
    }

    fn recompute_basic(&mut self) {
        let rhs = self.nonbasic_rhs();
        let m = self.m;
        for r in 0..m {
            let row = &self.binv[r * m..(r + 1) * m];
            self.x[self.head[r]] = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
        }
    }

    /// Relative residual of `B x_B = b - N x_N`.
    fn residual(&self) -> f64 {
        let mut res = self.nonbasic_rhs();
        let scale = 1.0 + res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for &j in &self.head {
            let v = self.x[j];
            match self.column(j) {
                ColumnRef::Structural(col) => {
                    for &(i, a) in col {
                        res[i] -= a * v;
                    }
                }
                ColumnRef::Slack(i) => res[i] -= v,
            }
        }
        res.iter().fold(0.0f64, |a, v| a.max(v.abs())) / scale
    }

    fn binv_column(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut alpha = vec![0.0; m];
        match self.column(j) {
            ColumnRef::Structural(col) => {
                for (r, out) in alpha.iter_mut().enumerate() {
                    let row = &self.binv[r * m..(r + 1) * m];
                    *out = col.iter().map(|&(i, a)| a * row[i]).sum();
                }
            }
            ColumnRef::Slack(i) => {
                for (r, out) in alpha.iter_mut().enumerate() {
                    *out = self.binv[r * m + i];
                }
            }
        }
        alpha
    }

    fn dot_column(&self, y: &[f64], j: usize) -> f64 {
        match self.column(j) {
            ColumnRef::Structural(col) => col.iter().map(|&(i, a)| a * y[i]).sum(),
            ColumnRef::Slack(i) => y[i],
        }
    }

    fn row_multipliers(&self, d_basic: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (r, &d) in d_basic.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (k, yk) in y.iter_mut().enumerate() {
                *yk += d * self.binv[r * m + k];
            }
        }
        y
    }

    fn infeasibility(&self, j: usize) -> f64 {
        let v = self.x[j];
        if v < self.lb[j] - FEAS_TOL {
            self.lb[j] - v
        } else if v > self.ub[j] + FEAS_TOL {
            v - self.ub[j]
        } else {
            0.0
        }
    }

    fn run(&mut self, iter_limit: u64) -> Result<LpStatus, Singular> {
        self.refactor()?;
        self.recompute_basic();
        let stall_limit = 3 * self.ntot() as u64;
        let mut since_refactor = 0u64;
        let mut stalled = 0u64;
        let mut bland = false;
        let mut last_measure = f64::INFINITY;
        let mut last_phase_one = true;
        let mut verifications = 0;

        loop {
            if since_refactor >= REFACTOR_EVERY
                || (since_refactor > 0 && since_refactor % DRIFT_CHECK_EVERY == 0 && self.residual() > DRIFT_TOL)
            {
                self.refactor()?;
                self.recompute_basic();
                since_refactor = 0;
            }

            let d_basic: Vec<f64> = self
                .head
                .iter()
                .map(|&j| {
                    if self.x[j] < self.lb[j] - FEAS_TOL {
                        -1.0
                    } else if self.x[j] > self.ub[j] + FEAS_TOL {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let phase_one = d_basic.iter().any(|&d| d != 0.0);
            let measure = if phase_one {
                self.head.iter().map(|&j| self.infeasibility(j)).sum()
            } else {
                (0..self.ntot()).map(|j| self.cost[j] * self.x[j]).sum::<f64>()
            };
            if phase_one != last_phase_one {
                last_measure = f64::INFINITY;
                last_phase_one = phase_one;
            }
            if measure < last_measure - 1e-12 * (1.0 + measure.abs()) {
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= stall_limit {
                    bland = true;
                }
            }
            last_measure = last_measure.min(measure);

            let y = if phase_one {
                self.row_multipliers(&d_basic)
            } else {
                let cb: Vec<f64> = self.head.iter().map(|&j| self.cost[j]).collect();
                self.row_multipliers(&cb)
            };

            // Pricing.
            let mut entering: Option<(usize, f64, f64)> = None;
            for j in 0..self.ntot() {
                if self.pos[j].is_some() || self.lb[j] == self.ub[j] {
                    continue;
                }
                let cj = if phase_one { 0.0 } else { self.cost[j] };
                let rj = cj - self.dot_column(&y, j);
                let dir = if rj < -OPT_TOL && self.x[j] < self.ub[j] {
                    1.0
                } else if rj > OPT_TOL && self.x[j] > self.lb[j] {
                    -1.0
                } else {
                    continue;
                };
                let better = match entering {
                    None => true,
                    Some((_, _, best)) => !bland && rj.abs() > best,
                };
                if better {
                    entering = Some((j, dir, rj.abs()));
                }
                if bland {
                    break;
                }
            }

            let Some((q, dir, _)) = entering else {
                // Confirm the verdict on a fresh factorization before reporting it.
                if since_refactor > 0 && verifications < MAX_RESTARTS {
                    verifications += 1;
                    self.refactor()?;
                    self.recompute_basic();
                    since_refactor = 0;
                    continue;
                }
                return Ok(if phase_one { LpStatus::Infeasible } else { LpStatus::Optimal });
            };

            if self.iterations >= iter_limit {
                return Ok(LpStatus::IterationLimit);
            }

            let alpha = self.binv_column(q);
            let mut step = if self.lb[q].is_finite() && self.ub[q].is_finite() {
                self.ub[q] - self.lb[q]
            } else {
                f64::INFINITY
            };
            // (row, leaves at upper, |alpha|)
            let mut leaving: Option<(usize, bool, f64)> = None;
            for (r, &a) in alpha.iter().enumerate() {
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let i = self.head[r];
                let delta = -dir * a;
                let (xi, lo, hi) = (self.x[i], self.lb[i], self.ub[i]);
                let limit = if xi < lo - FEAS_TOL {
                    (delta > 0.0).then(|| ((lo - xi) / delta, false))
                } else if xi > hi + FEAS_TOL {
                    (delta < 0.0).then(|| ((xi - hi) / -delta, true))
                } else if delta > 0.0 && hi.is_finite() {
                    Some((((hi - xi) / delta).max(0.0), true))
                } else if delta < 0.0 && lo.is_finite() {
                    Some((((xi - lo) / -delta).max(0.0), false))
                } else {
                    None
                };
                let Some((t, to_upper)) = limit else { continue };
                let take = match leaving {
                    None => t <= step,
                    Some((br, _, babs)) => {
                        t < step - 1e-12
                            || (t <= step + 1e-12 && if bland { i < self.head[br] } else { a.abs() > babs })
                    }
                };
                if take {
                    step = step.min(t);
                    leaving = Some((r, to_upper, a.abs()));
                }
            }

            if step.is_infinite() {
                if phase_one {
                    return Err(Singular);
                }
                return Ok(LpStatus::Unbounded);
            }

            self.x[q] += dir * step;
            for (r, &a) in alpha.iter().enumerate() {
                if a != 0.0 {
                    let i = self.head[r];
                    self.x[i] -= dir * step * a;
                }
            }
            self.iterations += 1;

            match leaving {
                None => {
                    // Bound flip of the entering column.
                    self.x[q] = if dir > 0.0 { self.ub[q] } else { self.lb[q] };
                }
                Some((r, to_upper, _)) => {
                    let out = self.head[r];
                    self.x[out] = if to_upper { self.ub[out] } else { self.lb[out] };
                    self.pos[out] = None;
                    self.pos[q] = Some(r);
                    self.head[r] = q;
                    self.pivot(r, &alpha);
                    since_refactor += 1;
                }
            }
        }
    }

    /// Product-form update of the explicit inverse.
    fn pivot(&mut self, r: usize, alpha: &[f64]) {
        let m = self.m;
        let piv = alpha[r];
        let pivot_row: Vec<f64> = self.binv[r * m..(r + 1) * m].iter().map(|v| v / piv).collect();
        for (i, &a) in alpha.iter().enumerate() {
            let row = &mut self.binv[i * m..(i + 1) * m];
            if i == r {
                row.copy_from_slice(&pivot_row);
            } else if a != 0.0 {
                for (dst, &p) in row.iter_mut().zip(&pivot_row) {
                    *dst -= a * p;
                }
            }
        }
    }

    fn solution(&self, status: LpStatus, iterations: u64) -> LpSolution {
        let (n, m) = (self.n, self.m);
        if matches!(status, LpStatus::Infeasible | LpStatus::Unbounded) {
            return LpSolution::without_point(status, n, m, iterations);
        }
        let x = self.x[..n].to_vec();
        let objective = self.inst.objective_value(&x);
        let cb: Vec<f64> = self.head.iter().map(|&j| self.cost[j]).collect();
        let duals = self.row_multipliers(&cb);
        let reduced_costs = (0..n).map(|j| self.cost[j] - self.dot_column(&duals, j)).collect();
        let at_upper = (0..self.ntot())
            .map(|j| self.pos[j].is_none() && self.ub[j].is_finite() && self.x[j] == self.ub[j] && self.lb[j] != self.ub[j])
            .collect();
        LpSolution {
            status,
            x,
            objective,
            basis: Basis { basic: self.head.clone(), at_upper },
            iterations,
            duals,
            reduced_costs,
        }
    }
}

enum ColumnRef<'c> {
    Structural(&'c [(usize, f64)]),
    Slack(usize),
}

/// Gauss-Jordan inversion with partial pivoting; `None` when singular.
fn invert(a: &mut [f64], m: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for c in 0..m {
        let p = (c..m).max_by(|&i, &k| a[i * m + c].abs().total_cmp(&a[k * m + c].abs()))?;
        if a[p * m + c].abs() < SINGULAR_TOL {
            return None;
        }
        if p != c {
            for k in 0..m {
                a.swap(p * m + k, c * m + k);
                inv.swap(p * m + k, c * m + k);
            }
        }
        let d = a[c * m + c];
        for k in 0..m {
            a[c * m + k] /= d;
            inv[c * m + k] /= d;
        }
        for i in 0..m {
            if i == c {
                continue;
            }
            let f = a[i * m + c];
            if f == 0.0 {
                continue;
            }
            for k in 0..m {
                a[i * m + k] -= f * a[c * m + k];
                inv[i * m + k] -= f * inv[c * m + k];
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::{MilpBuilder, RowSense};

    fn solve(inst: &MilpInstance, ov: &[BoundOverride]) -> LpSolution {
        LpSolver::new().solve_default(inst, ov, None).unwrap()
    }

    fn two_var() -> MilpInstance {
        MilpBuilder::new("tv", 2, 0)
            .objective(vec![-1.0, -1.0])
            .bounds(vec![0.0, 0.0], vec![1.0, 1.0])
            .row(RowSense::Le, vec![(0, 1.0), (1, 1.0)], 1.0)
            .build()
            .unwrap()
    }

    fn knapsack() -> MilpInstance {
        MilpBuilder::new("knap", 2, 2)
            .objective(vec![-5.0, -4.0])
            .bounds(vec![0.0, 0.0], vec![1.0, 1.0])
            .row(RowSense::Le, vec![(0, 2.0), (1, 3.0)], 4.0)
            .build()
            .unwrap()
    }

    #[test]
    fn simple_box_lp() {
        let s = solve(&two_var(), &[]);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_box_is_infeasible() {
        let s = solve(&two_var(), &[BoundOverride::lower(0, 2.0)]);
        assert_eq!(s.status, LpStatus::Infeasible);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn loosening_override_rejected() {
        let err = LpSolver::new().solve_default(&two_var(), &[BoundOverride::upper(0, 3.0)], None).unwrap_err();
        assert!(matches!(err, LpError::LooseningOverride { var: 0, .. }));
    }

    #[test]
    fn zero_objective() {
        let inst = MilpBuilder::new("z", 2, 0)
            .bounds(vec![0.0, 0.0], vec![1.0, 1.0])
            .row(RowSense::Ge, vec![(0, 1.0), (1, 1.0)], 1.0)
            .build()
            .unwrap();
        let s = solve(&inst, &[]);
        assert_eq!(s.status, LpStatus::Optimal);
        assert_eq!(s.objective, 0.0);
        assert!(s.x[0] + s.x[1] >= 1.0 - FEAS_TOL);
    }

    #[test]
    fn knapsack_relaxation_and_children() {
        let inst = knapsack();
        let root = solve(&inst, &[]);
        assert!((root.objective + 23.0 / 3.0).abs() < 1e-9);
        assert!((root.x[0] - 1.0).abs() < 1e-9 && (root.x[1] - 2.0 / 3.0).abs() < 1e-9);
        let (down, up) = LpSolver::new().probe_children(&inst, &[], &root, 1).unwrap();
        assert!((down.objective + 5.0).abs() < 1e-9);
        // x2 = 1 leaves 2 x1 <= 1, so x1 = 1/2 and the objective is -5/2 - 4.
        assert!((up.objective + 6.5).abs() < 1e-9, "{}", up.objective);
        assert!(down.objective >= root.objective - FEAS_TOL);
        assert!(up.objective >= root.objective - FEAS_TOL);
    }

    #[test]
    fn probing_integral_variable_fails() {
        let inst = knapsack();
        let root = solve(&inst, &[]);
        let err = LpSolver::new().probe_children(&inst, &[], &root, 0).unwrap_err();
        assert!(matches!(err, LpError::NotFractional { var: 0, .. }));
    }

    #[test]
    fn infeasible_child_is_a_legal_probe_result() {
        // x0 + x1 >= 1.5 with x in [0,1]^2: branching x1 down forces x0 >= 1.5.
        let inst = MilpBuilder::new("ic", 2, 2)
            .objective(vec![1.0, 1.0])
            .bounds(vec![0.0, 0.0], vec![1.0, 1.0])
            .row(RowSense::Ge, vec![(0, 1.0), (1, 1.0)], 1.5)
            .build()
            .unwrap();
        let root = solve(&inst, &[]);
        let frac = (0..2).find(|&j| is_fractional(root.x[j])).unwrap();
        let (down, up) = LpSolver::new().probe_children(&inst, &[], &root, frac).unwrap();
        assert_eq!(down.status, LpStatus::Infeasible);
        assert_eq!(up.status, LpStatus::Optimal);
    }

    #[test]
    fn unbounded_detected() {
        let inst = MilpBuilder::new("u", 1, 0)
            .objective(vec![-1.0])
            .row(RowSense::Ge, vec![(0, 1.0)], 1.0)
            .build()
            .unwrap();
        assert_eq!(solve(&inst, &[]).status, LpStatus::Unbounded);
    }

    #[test]
    fn free_variables_and_equalities() {
        // min x0 + 2 x1, x0 - x1 = 1, x1 >= -3, x0 free  ->  x1 = -3, x0 = -2.
        let inst = MilpBuilder::new("f", 2, 0)
            .objective(vec![1.0, 2.0])
            .bounds(vec![f64::NEG_INFINITY, -3.0], vec![f64::INFINITY, f64::INFINITY])
            .row(RowSense::Eq, vec![(0, 1.0), (1, -1.0)], 1.0)
            .build()
            .unwrap();
        let s = solve(&inst, &[]);
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 8.0).abs() < 1e-9, "{}", s.objective);
    }

    #[test]
    fn iteration_limit_is_a_status() {
        let inst = knapsack();
        let s = LpSolver::new().solve(&inst, &[], None, 0).unwrap();
        assert_eq!(s.status, LpStatus::IterationLimit);
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let inst = knapsack();
        let root = solve(&inst, &[]);
        let ov = [BoundOverride::upper(1, 0.0)];
        let warm = LpSolver::new().solve_default(&inst, &ov, Some(&root.basis)).unwrap();
        let cold = solve(&inst, &ov);
        assert!((warm.objective - cold.objective).abs() < 1e-9);
    }
}
