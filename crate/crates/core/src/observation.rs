//! Bipartite variable/constraint state encoding of a branch-and-bound node,
//! plus the content digest used to index recorded states.
//!
//! Feature catalog (version [`CATALOG_VERSION`]).
//!
//! Variable node `j` (12 columns):
//!  0. `c_j / ||c||_inf`
//!  1. fractional part of `x_j`
//!  2. candidate flag
//!  3. lower bound finite
//!  4. upper bound finite
//!  5. `x_j` at lower bound
//!  6. `x_j` at upper bound
//!  7. basic in the node LP
//!  8. sign of the reduced cost (-1, 0, +1)
//!  9. `depth / (depth + 1)`
//! 10. `Psi+_j` over the largest `Psi+` among candidates (clamped to 1)
//! 11. `Psi-_j` likewise
//!
//! Constraint node `i` (5 columns):
//!  0. `b_i / ||A_i||_2`, scaled by the largest magnitude over rows
//!  1. slack `(b_i - A_i x) / ||A_i||_2`, scaled the same way
//!  2. active flag (slack within the feasibility tolerance)
//!  3. sign of the row dual
//!  4. `nnz(A_i) / n`
//!
//! Edge `(i, j)` for every nonzero `a_ij`, valued `a_ij / ||A_i||_2`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::branching::PseudocostStore;
use crate::lp::{frac_part, LpSolution, LpStatus, FEAS_TOL};
use crate::milp::MilpInstance;

pub const CATALOG_VERSION: u32 = 1;
pub const VAR_FEATURES: usize = 12;
pub const CONS_FEATURES: usize = 5;
/// Identifies the digest construction in dataset headers.
pub const DIGEST_ALGORITHM: &str = "sha256-128/q1e-9/v1";
const QUANTUM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("observation requires an optimal node relaxation, got {0:?}")]
    NotOptimal(LpStatus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartiteObservation {
    pub num_vars: usize,
    pub num_cons: usize,
    /// Row-major `num_vars x VAR_FEATURES`.
    pub var_features: Vec<f64>,
    /// Row-major `num_cons x CONS_FEATURES`.
    pub cons_features: Vec<f64>,
    /// `(constraint, variable, normalized coefficient)`.
    pub edges: Vec<(usize, usize, f64)>,
}

impl BipartiteObservation {
    pub fn var_row(&self, j: usize) -> &[f64] {
        &self.var_features[j * VAR_FEATURES..(j + 1) * VAR_FEATURES]
    }

    pub fn cons_row(&self, i: usize) -> &[f64] {
        &self.cons_features[i * CONS_FEATURES..(i + 1) * CONS_FEATURES]
    }

    pub fn all_finite(&self) -> bool {
        self.var_features.iter().chain(&self.cons_features).all(|v| v.is_finite())
            && self.edges.iter().all(|e| e.2.is_finite())
    }

    /// Reorders variables so that new variable `k` is old variable `perm[k]`.
    pub fn permute_vars(&self, perm: &[usize]) -> BipartiteObservation {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let var_features = perm.iter().flat_map(|&old| self.var_row(old).to_vec()).collect();
        BipartiteObservation {
            num_vars: self.num_vars,
            num_cons: self.num_cons,
            var_features,
            cons_features: self.cons_features.clone(),
            edges: self.edges.iter().map(|&(i, j, e)| (i, inverse[j], e)).collect(),
        }
    }
}

/// Effective bounds and tree position of the node being encoded.
#[derive(Debug, Clone, Copy)]
pub struct NodeView<'a> {
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub depth: usize,
}

fn sign(v: f64, tol: f64) -> f64 {
    if v > tol {
        1.0
    } else if v < -tol {
        -1.0
    } else {
        0.0
    }
}

pub fn extract_observation(
    inst: &MilpInstance,
    node: NodeView<'_>,
    lp: &LpSolution,
    candidates: &[usize],
    pseudocosts: &PseudocostStore,
) -> Result<BipartiteObservation, ObservationError> {
    if !lp.is_optimal() {
        return Err(ObservationError::NotOptimal(lp.status));
    }
    let (n, m) = (inst.num_vars(), inst.num_cons());
    let c_max = inst.objective().iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let mut is_candidate = vec![false; n];
    for &j in candidates {
        is_candidate[j] = true;
    }
    let up_max = candidates.iter().map(|&j| pseudocosts.psi_up(j)).fold(0.0f64, f64::max);
    let down_max = candidates.iter().map(|&j| pseudocosts.psi_down(j)).fold(0.0f64, f64::max);
    let scaled = |v: f64, max: f64| if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let mut basic = vec![false; n];
    for &k in &lp.basis.basic {
        if k < n {
            basic[k] = true;
        }
    }
    let depth_feat = node.depth as f64 / (node.depth as f64 + 1.0);

    let mut var_features = Vec::with_capacity(n * VAR_FEATURES);
    for j in 0..n {
        let x = lp.x[j];
        let (lo, hi) = (node.lower[j], node.upper[j]);
        let (pu, pd) = if j < inst.num_int() {
            (scaled(pseudocosts.psi_up(j), up_max), scaled(pseudocosts.psi_down(j), down_max))
        } else {
            (0.0, 0.0)
        };
        var_features.extend_from_slice(&[
            if c_max > 0.0 { inst.objective()[j] / c_max } else { 0.0 },
            frac_part(x).clamp(0.0, 1.0),
            f64::from(u8::from(is_candidate[j])),
            f64::from(u8::from(lo.is_finite())),
            f64::from(u8::from(hi.is_finite())),
            f64::from(u8::from(lo.is_finite() && (x - lo).abs() <= FEAS_TOL)),
            f64::from(u8::from(hi.is_finite() && (x - hi).abs() <= FEAS_TOL)),
            f64::from(u8::from(basic[j])),
            sign(lp.reduced_costs[j], 1e-9),
            depth_feat,
            pu,
            pd,
        ]);
    }

    let norms: Vec<f64> = inst.rows().iter().map(|r| r.norm2()).collect();
    let per_norm = |v: f64, i: usize| if norms[i] > 0.0 { v / norms[i] } else { 0.0 };
    let rhs_scaled: Vec<f64> = (0..m).map(|i| per_norm(inst.rhs()[i], i)).collect();
    let slack: Vec<f64> = (0..m).map(|i| inst.rhs()[i] - inst.row(i).dot(&lp.x)).collect();
    let slack_scaled: Vec<f64> = (0..m).map(|i| per_norm(slack[i].max(0.0), i)).collect();
    let rhs_max = rhs_scaled.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let slack_max = slack_scaled.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut cons_features = Vec::with_capacity(m * CONS_FEATURES);
    let mut edges = Vec::with_capacity(inst.nnz());
    for i in 0..m {
        cons_features.extend_from_slice(&[
            if rhs_max > 0.0 { rhs_scaled[i] / rhs_max } else { 0.0 },
            if slack_max > 0.0 { slack_scaled[i] / slack_max } else { 0.0 },
            f64::from(u8::from(slack[i] <= FEAS_TOL)),
            sign(lp.duals[i], 1e-9),
            inst.row(i).nnz() as f64 / n.max(1) as f64,
        ]);
        for &(j, a) in inst.row(i).entries() {
            edges.push((i, j, a / norms[i]));
        }
    }
    Ok(BipartiteObservation { num_vars: n, num_cons: m, var_features, cons_features, edges })
}

/// 128-bit content digest of a state `(observation, candidate set)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateDigest(pub [u8; 16]);

impl StateDigest {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<StateDigest> {
        if s.len() != 32 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 16];
        for (k, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * k..2 * k + 2], 16).ok()?;
        }
        Some(StateDigest(out))
    }
}

impl fmt::Debug for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateDigest({})", self.to_hex())
    }
}

impl fmt::Display for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for StateDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for StateDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        StateDigest::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad state digest `{s}`")))
    }
}

fn quantize(v: f64) -> i64 {
    (v / QUANTUM).round() as i64
}

/// Canonical byte form: little-endian header, features in index order
/// quantized to 1e-9, edges in stored order, then the sorted candidate set.
pub fn canonical_bytes(obs: &BipartiteObservation, candidates: &[usize]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 8 * (obs.var_features.len() + obs.cons_features.len() + 3 * obs.edges.len()));
    buf.extend_from_slice(b"BLSTATE1");
    buf.extend_from_slice(&CATALOG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(obs.num_vars as u64).to_le_bytes());
    buf.extend_from_slice(&(obs.num_cons as u64).to_le_bytes());
    for &v in obs.var_features.iter().chain(&obs.cons_features) {
        buf.extend_from_slice(&quantize(v).to_le_bytes());
    }
    buf.extend_from_slice(&(obs.edges.len() as u64).to_le_bytes());
    for &(i, j, e) in &obs.edges {
        buf.extend_from_slice(&(i as u64).to_le_bytes());
        buf.extend_from_slice(&(j as u64).to_le_bytes());
        buf.extend_from_slice(&quantize(e).to_le_bytes());
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    buf.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for j in sorted {
        buf.extend_from_slice(&(j as u64).to_le_bytes());
    }
    buf
}

pub fn f_dim(obs: &BipartiteObservation, candidates: &[usize]) -> StateDigest {
    let hash = Sha256::digest(canonical_bytes(obs, candidates));
    let mut out = [0u8; 16];
    out.copy_from_slice(&hash[..16]);
    StateDigest(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::LpSolver;
    use crate::milp::{MilpBuilder, RowSense};

    fn knapsack() -> MilpInstance {
        MilpBuilder::new("knap", 2, 2)
            .objective(vec![-5.0, -4.0])
            .bounds(vec![0.0, 0.0], vec![1.0, 1.0])
            .row(RowSense::Le, vec![(0, 2.0), (1, 3.0)], 4.0)
            .build()
            .unwrap()
    }

    fn root_obs(inst: &MilpInstance) -> (BipartiteObservation, Vec<usize>) {
        let lp = LpSolver::new().solve_default(inst, &[], None).unwrap();
        let cands: Vec<usize> = (0..inst.num_int()).filter(|&j| crate::lp::is_fractional(lp.x[j])).collect();
        let view = NodeView { lower: inst.lower(), upper: inst.upper(), depth: 0 };
        (extract_observation(inst, view, &lp, &cands, &PseudocostStore::new(inst.num_int())).unwrap(), cands)
    }

    #[test]
    fn knapsack_root_features() {
        let (obs, cands) = root_obs(&knapsack());
        assert_eq!(cands, vec![1]);
        assert_eq!(obs.edges.len(), 2);
        assert_eq!(obs.cons_row(0)[2], 1.0, "the capacity row is tight at (1, 2/3)");
        let v1 = obs.var_row(1);
        assert!((v1[0] + 0.8).abs() < 1e-12);
        assert!((v1[1] - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(v1[2], 1.0);
        assert_eq!(v1[7], 1.0);
        assert_eq!(obs.var_row(0)[6], 1.0, "x0 sits at its upper bound");
        let norm = 13f64.sqrt();
        assert!((obs.edges[0].2 - 2.0 / norm).abs() < 1e-15);
        assert!(obs.all_finite());
    }

    #[test]
    fn no_constraints_no_edges() {
        let inst = MilpBuilder::new("free", 1, 1).objective(vec![1.0]).bounds(vec![0.0], vec![1.0]).build().unwrap();
        let (obs, _) = root_obs(&inst);
        assert!(obs.edges.is_empty());
        assert!(obs.cons_features.is_empty());
        assert_eq!(obs.var_features.len(), VAR_FEATURES);
    }

    #[test]
    fn extraction_and_digest_are_deterministic() {
        let inst = knapsack();
        let (a, ca) = root_obs(&inst);
        let (b, cb) = root_obs(&inst);
        assert_eq!(a, b);
        assert_eq!(f_dim(&a, &ca), f_dim(&b, &cb));
    }

    #[test]
    fn candidate_flag_changes_digest() {
        let (obs, cands) = root_obs(&knapsack());
        let mut flipped = obs.clone();
        flipped.var_features[2] = 1.0 - flipped.var_features[2];
        assert_ne!(f_dim(&obs, &cands), f_dim(&flipped, &cands));
        assert_ne!(f_dim(&obs, &cands), f_dim(&obs, &[0, 1]));
    }

    #[test]
    fn digest_is_stable_across_runs() {
        let obs = BipartiteObservation {
            num_vars: 1,
            num_cons: 1,
            var_features: vec![0.5; VAR_FEATURES],
            cons_features: vec![0.25; CONS_FEATURES],
            edges: vec![(0, 0, 1.0)],
        };
        // Frozen value: guards against accidental changes to the canonical form.
        assert_eq!(f_dim(&obs, &[0]).to_hex(), FROZEN_DIGEST);
    }

    const FROZEN_DIGEST: &str = "d520fef29eff3fe41d4c7399d904888a";

    #[test]
    fn hex_round_trip() {
        let d = StateDigest([7; 16]);
        assert_eq!(StateDigest::from_hex(&d.to_hex()), Some(d));
        assert_eq!(StateDigest::from_hex("zz"), None);
    }
}
