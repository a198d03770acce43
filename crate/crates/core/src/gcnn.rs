//! Bipartite graph-convolutional policy and value network with hand-written
//! reverse-mode gradients.
//!
//! Layout: embeddings for variable and constraint features, one
//! variable-to-constraint pass `c_i <- f_c(c_i, sum_j g_c(c_i, v_j, e_ij))`,
//! one constraint-to-variable pass `v_j <- f_v(v_j, sum_i g_v(c_i, v_j, e_ij))`,
//! a per-variable logit head and a mean-pooled value head. Every `f`/`g` is
//! Linear-ReLU-Linear.
//!
//! The second linear layer of `g` commutes with the sum, so the messages are
//! aggregated after the ReLU and the layer is applied once per receiver.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branching::{BranchError, BranchingPolicy, NodeContext};
use crate::observation::{BipartiteObservation, CATALOG_VERSION, CONS_FEATURES, VAR_FEATURES};

pub const HIDDEN: usize = 32;
pub const GRAD_CLIP: f64 = 10.0;
const CHECKPOINT_MAGIC: &[u8; 8] = b"BLGCNN\0\0";
const CHECKPOINT_VERSION: u32 = 1;
/// Samples per deterministic reduction chunk.
const CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum GcnnError {
    #[error("observation width mismatch: {0}")]
    Width(String),
    #[error("non-finite value after layer {0}")]
    NonFinite(&'static str),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("action {0} is not a candidate")]
    NotCandidate(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint feature catalog v{found} does not match v{expected}")]
    CatalogMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerSlot {
    pub name: &'static str,
    pub input: usize,
    pub output: usize,
    /// Weights (`output x input`, row-major) start here; biases follow.
    pub offset: usize,
}

impl LayerSlot {
    fn w(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.input * self.output
    }
    fn b(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.input * self.output;
        s..s + self.output
    }
}

const EMB_V: usize = 0;
const EMB_C: usize = 1;
const GC1: usize = 2;
const GC2: usize = 3;
const FC1: usize = 4;
const FC2: usize = 5;
const GV1: usize = 6;
const GV2: usize = 7;
const FV1: usize = 8;
const FV2: usize = 9;
const POLICY: usize = 10;
const VALUE: usize = 11;

fn layout(h: usize) -> (Vec<LayerSlot>, usize) {
    let shapes: [(&'static str, usize, usize); 12] = [
        ("embed_var", VAR_FEATURES, h),
        ("embed_cons", CONS_FEATURES, h),
        ("g_c.0", 2 * h + 1, h),
        ("g_c.1", h, h),
        ("f_c.0", 2 * h, h),
        ("f_c.1", h, h),
        ("g_v.0", 2 * h + 1, h),
        ("g_v.1", h, h),
        ("f_v.0", 2 * h, h),
        ("f_v.1", h, h),
        ("policy_head", h, 1),
        ("value_head", h, 1),
    ];
    let mut offset = 0;
    let slots = shapes
        .iter()
        .map(|&(name, input, output)| {
            let s = LayerSlot { name, input, output, offset };
            offset += input * output + output;
            s
        })
        .collect();
    (slots, offset)
}

/// Flat parameter vector with a fixed layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnnParams {
    hidden: usize,
    layers: Vec<LayerSlot>,
    pub values: Vec<f64>,
}

impl GcnnParams {
    pub fn zeros(hidden: usize) -> Self {
        let (layers, len) = layout(hidden);
        GcnnParams { hidden, layers, values: vec![0.0; len] }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut p = GcnnParams::zeros(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in p.layers.clone() {
            let s = (6.0 / (slot.input + slot.output) as f64).sqrt();
            for v in &mut p.values[slot.w()] {
                *v = rng.random_range(-s..s);
            }
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<LayerSlot> {
        self.layers.iter().copied().find(|s| s.name == name)
    }

    /// True at weight coordinates, false at biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for s in &self.layers {
            mask[s.w()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn value_bias_index(&self) -> usize {
        self.layers[VALUE].b().start
    }

    fn w(&self, l: usize) -> &[f64] {
        &self.values[self.layers[l].w()]
    }
    fn b(&self, l: usize) -> &[f64] {
        &self.values[self.layers[l].b()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y (rows x dout) += x (rows x din) * W[:, off..off+din]^T`, `W` being
/// `dout x ld`.
#[allow(clippy::too_many_arguments)]
fn mm_wt(x: &[f64], rows: usize, din: usize, w: &[f64], ld: usize, off: usize, dout: usize, y: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo += dot(xr, &w[o * ld + off..o * ld + off + din]);
        }
    }
}

/// `dx (rows x din) += dy (rows x dout) * W[:, off..off+din]`.
#[allow(clippy::too_many_arguments)]
fn mm_w(dy: &[f64], rows: usize, dout: usize, w: &[f64], ld: usize, off: usize, din: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let dxr = &mut dx[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dy[r * dout + o];
            if g == 0.0 {
                continue;
            }
            for (d, wv) in dxr.iter_mut().zip(&w[o * ld + off..o * ld + off + din]) {
                *d += g * wv;
            }
        }
    }
}

/// `dW[:, off..off+din] += dy^T x`.
#[allow(clippy::too_many_arguments)]
fn mm_outer(dy: &[f64], rows: usize, dout: usize, x: &[f64], din: usize, dw: &mut [f64], ld: usize, off: usize) {
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dy[r * dout + o];
            if g == 0.0 {
                continue;
            }
            for (d, xv) in dw[o * ld + off..o * ld + off + din].iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
}

fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
    }
}

fn bias_grad(dy: &[f64], db: &mut [f64]) {
    for row in dy.chunks(db.len()) {
        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Zeroes `d` wherever the pre-activation was not positive.
fn relu_back(pre: &[f64], d: &mut [f64]) {
    d.iter_mut().zip(pre).for_each(|(g, p)| {
        if *p <= 0.0 {
            *g = 0.0
        }
    });
}

fn check(v: &[f64], layer: &'static str) -> Result<(), GcnnError> {
    if v.iter().all(|x| x.is_finite()) { Ok(()) } else { Err(GcnnError::NonFinite(layer)) }
}

struct Conv {
    /// Per-edge pre-activations of the first layer.
    pre: Vec<f64>,
    /// Aggregated activations per receiver.
    sum: Vec<f64>,
    deg: Vec<f64>,
    out: Vec<f64>,
}

struct Mlp {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

struct Cache {
    n: usize,
    m: usize,
    hv: Vec<f64>,
    v0: Vec<f64>,
    hc: Vec<f64>,
    c0: Vec<f64>,
    conv_c: Conv,
    f_c: Mlp,
    conv_v: Conv,
    f_v: Mlp,
    logits: Vec<f64>,
    pooled: Vec<f64>,
    value: f64,
}

impl GcnnParams {
    fn embed(&self, l: usize, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        let s = self.layers[l];
        let mut pre = vec![0.0; rows * s.output];
        mm_wt(x, rows, s.input, self.w(l), s.input, 0, s.output, &mut pre);
        add_bias(&mut pre, self.b(l));
        let act = relu(&pre);
        (pre, act)
    }

    /// One message pass. `to_cons` selects the receivers.
    fn conv(&self, g1: usize, g2: usize, c: &[f64], v: &[f64], edges: &[(usize, usize, f64)], n_recv: usize, to_cons: bool) -> Conv {
        let h = self.hidden;
        let ld = 2 * h + 1;
        let w1 = self.w(g1);
        let (m, n) = (c.len() / h, v.len() / h);
        let mut pc = vec![0.0; m * h];
        mm_wt(c, m, h, w1, ld, 0, h, &mut pc);
        let mut pv = vec![0.0; n * h];
        mm_wt(v, n, h, w1, ld, h, h, &mut pv);
        let b1 = self.b(g1);
        let mut pre = vec![0.0; edges.len() * h];
        let mut sum = vec![0.0; n_recv * h];
        let mut deg = vec![0.0; n_recv];
        for (k, &(i, j, e)) in edges.iter().enumerate() {
            let recv = if to_cons { i } else { j };
            deg[recv] += 1.0;
            for o in 0..h {
                let z = pc[i * h + o] + pv[j * h + o] + e * w1[o * ld + 2 * h] + b1[o];
                pre[k * h + o] = z;
                sum[recv * h + o] += z.max(0.0);
            }
        }
        let mut out = vec![0.0; n_recv * h];
        mm_wt(&sum, n_recv, h, self.w(g2), h, 0, h, &mut out);
        let b2 = self.b(g2);
        for r in 0..n_recv {
            for o in 0..h {
                out[r * h + o] += deg[r] * b2[o];
            }
        }
        Conv { pre, sum, deg, out }
    }

    fn mlp(&self, l1: usize, l2: usize, a: &[f64], b: &[f64], rows: usize) -> Mlp {
        let h = self.hidden;
        let mut pre = vec![0.0; rows * h];
        mm_wt(a, rows, h, self.w(l1), 2 * h, 0, h, &mut pre);
        mm_wt(b, rows, h, self.w(l1), 2 * h, h, h, &mut pre);
        add_bias(&mut pre, self.b(l1));
        let act = relu(&pre);
        let mut out = vec![0.0; rows * h];
        mm_wt(&act, rows, h, self.w(l2), h, 0, h, &mut out);
        add_bias(&mut out, self.b(l2));
        Mlp { pre, act, out }
    }

    fn forward_cached(&self, obs: &BipartiteObservation) -> Result<Cache, GcnnError> {
        let (n, m, h) = (obs.num_vars, obs.num_cons, self.hidden);
        if obs.var_features.len() != n * VAR_FEATURES || obs.cons_features.len() != m * CONS_FEATURES {
            return Err(GcnnError::Width(format!(
                "expected {VAR_FEATURES} variable and {CONS_FEATURES} constraint features for {n}x{m}"
            )));
        }
        if let Some(&(i, j, _)) = obs.edges.iter().find(|e| e.0 >= m || e.1 >= n) {
            return Err(GcnnError::Width(format!("edge ({i}, {j}) outside {m}x{n}")));
        }
        let (hv, v0) = self.embed(EMB_V, &obs.var_features, n);
        let (hc, c0) = self.embed(EMB_C, &obs.cons_features, m);
        check(&v0, "embed_var")?;
        check(&c0, "embed_cons")?;
        let conv_c = self.conv(GC1, GC2, &c0, &v0, &obs.edges, m, true);
        check(&conv_c.out, "g_c")?;
        let f_c = self.mlp(FC1, FC2, &c0, &conv_c.out, m);
        check(&f_c.out, "f_c")?;
        let conv_v = self.conv(GV1, GV2, &f_c.out, &v0, &obs.edges, n, false);
        check(&conv_v.out, "g_v")?;
        let f_v = self.mlp(FV1, FV2, &v0, &conv_v.out, n);
        check(&f_v.out, "f_v")?;
        let (wp, bp) = (self.w(POLICY), self.b(POLICY)[0]);
        let logits: Vec<f64> = f_v.out.chunks(h).map(|v| dot(v, wp) + bp).collect();
        let mut pooled = vec![0.0; h];
        for v in f_v.out.chunks(h) {
            pooled.iter_mut().zip(v).for_each(|(p, x)| *p += x);
        }
        if n > 0 {
            pooled.iter_mut().for_each(|p| *p /= n as f64);
        }
        let value = dot(&pooled, self.w(VALUE)) + self.b(VALUE)[0];
        check(&logits, "policy_head")?;
        check(&[value], "value_head")?;
        Ok(Cache { n, m, hv, v0, hc, c0, conv_c, f_c, conv_v, f_v, logits, pooled, value })
    }

    fn conv_back(
        &self,
        g1: usize,
        g2: usize,
        cache: &Conv,
        c: &[f64],
        v: &[f64],
        edges: &[(usize, usize, f64)],
        to_cons: bool,
        dout: &[f64],
        grad: &mut [f64],
        dc: &mut [f64],
        dv: &mut [f64],
    ) {
        let h = self.hidden;
        let ld = 2 * h + 1;
        let n_recv = cache.deg.len();
        let (s1, s2) = (self.layers[g1], self.layers[g2]);
        mm_outer(dout, n_recv, h, &cache.sum, h, &mut grad[s2.w()], h, 0);
        {
            let db2 = &mut grad[s2.b()];
            for r in 0..n_recv {
                for o in 0..h {
                    db2[o] += cache.deg[r] * dout[r * h + o];
                }
            }
        }
        let mut dsum = vec![0.0; n_recv * h];
        mm_w(dout, n_recv, h, self.w(g2), h, 0, h, &mut dsum);
        let (m, n) = (c.len() / h, v.len() / h);
        let mut dpc = vec![0.0; m * h];
        let mut dpv = vec![0.0; n * h];
        let mut dwe = vec![0.0; h];
        let mut db1 = vec![0.0; h];
        for (k, &(i, j, e)) in edges.iter().enumerate() {
            let recv = if to_cons { i } else { j };
            for o in 0..h {
                if cache.pre[k * h + o] <= 0.0 {
                    continue;
                }
                let g = dsum[recv * h + o];
                dpc[i * h + o] += g;
                dpv[j * h + o] += g;
                dwe[o] += e * g;
                db1[o] += g;
            }
        }
        let gw1 = &mut grad[s1.w()];
        mm_outer(&dpc, m, h, c, h, gw1, ld, 0);
        mm_outer(&dpv, n, h, v, h, gw1, ld, h);
        for o in 0..h {
            gw1[o * ld + 2 * h] += dwe[o];
        }
        bias_grad(&db1, &mut grad[s1.b()]);
        let w1 = self.w(g1);
        mm_w(&dpc, m, h, w1, ld, 0, h, dc);
        mm_w(&dpv, n, h, w1, ld, h, h, dv);
    }

    #[allow(clippy::too_many_arguments)]
    fn mlp_back(&self, l1: usize, l2: usize, cache: &Mlp, a: &[f64], b: &[f64], rows: usize, dout: &[f64], grad: &mut [f64], da: &mut [f64], db: &mut [f64]) {
        let h = self.hidden;
        let (s1, s2) = (self.layers[l1], self.layers[l2]);
        mm_outer(dout, rows, h, &cache.act, h, &mut grad[s2.w()], h, 0);
        bias_grad(dout, &mut grad[s2.b()]);
        let mut dact = vec![0.0; rows * h];
        mm_w(dout, rows, h, self.w(l2), h, 0, h, &mut dact);
        relu_back(&cache.pre, &mut dact);
        mm_outer(&dact, rows, h, a, h, &mut grad[s1.w()], 2 * h, 0);
        mm_outer(&dact, rows, h, b, h, &mut grad[s1.w()], 2 * h, h);
        bias_grad(&dact, &mut grad[s1.b()]);
        mm_w(&dact, rows, h, self.w(l1), 2 * h, 0, h, da);
        mm_w(&dact, rows, h, self.w(l1), 2 * h, h, h, db);
    }

    /// Accumulates into `grad` the gradient of `sum_j dlogits_j * logit_j +
    /// dvalue * value`.
    fn backward(&self, obs: &BipartiteObservation, cache: &Cache, dlogits: &[f64], dvalue: f64, grad: &mut [f64]) {
        let (n, m, h) = (cache.n, cache.m, self.hidden);
        let mut dv1 = vec![0.0; n * h];
        {
            let sp = self.layers[POLICY];
            let wp = self.w(POLICY);
            for j in 0..n {
                let g = dlogits[j];
                if g == 0.0 {
                    continue;
                }
                let v = &cache.f_v.out[j * h..(j + 1) * h];
                for o in 0..h {
                    grad[sp.offset + o] += g * v[o];
                    dv1[j * h + o] += g * wp[o];
                }
                grad[sp.b().start] += g;
            }
        }
        if dvalue != 0.0 {
            let sv = self.layers[VALUE];
            let wv = self.w(VALUE);
            for o in 0..h {
                grad[sv.offset + o] += dvalue * cache.pooled[o];
            }
            grad[sv.b().start] += dvalue;
            if n > 0 {
                for j in 0..n {
                    for o in 0..h {
                        dv1[j * h + o] += dvalue * wv[o] / n as f64;
                    }
                }
            }
        }
        let mut dv0 = vec![0.0; n * h];
        let mut dnv = vec![0.0; n * h];
        self.mlp_back(FV1, FV2, &cache.f_v, &cache.v0, &cache.conv_v.out, n, &dv1, grad, &mut dv0, &mut dnv);
        let mut dc1 = vec![0.0; m * h];
        self.conv_back(GV1, GV2, &cache.conv_v, &cache.f_c.out, &cache.v0, &obs.edges, false, &dnv, grad, &mut dc1, &mut dv0);
        let mut dc0 = vec![0.0; m * h];
        let mut dmc = vec![0.0; m * h];
        self.mlp_back(FC1, FC2, &cache.f_c, &cache.c0, &cache.conv_c.out, m, &dc1, grad, &mut dc0, &mut dmc);
        self.conv_back(GC1, GC2, &cache.conv_c, &cache.c0, &cache.v0, &obs.edges, true, &dmc, grad, &mut dc0, &mut dv0);
        for (l, pre, d, x, rows) in [(EMB_V, &cache.hv, dv0, &obs.var_features, n), (EMB_C, &cache.hc, dc0, &obs.cons_features, m)] {
            let mut d = d;
            relu_back(pre, &mut d);
            let s = self.layers[l];
            mm_outer(&d, rows, h, x, s.input, &mut grad[s.w()], s.input, 0);
            bias_grad(&d, &mut grad[s.b()]);
        }
    }
}

/// Logits of the candidates (in candidate order) and the value estimate.
pub fn gcnn_forward(params: &GcnnParams, obs: &BipartiteObservation, candidates: &[usize]) -> Result<(Vec<f64>, f64), GcnnError> {
    let cache = params.forward_cached(obs)?;
    let logits = candidates
        .iter()
        .map(|&j| cache.logits.get(j).copied().ok_or(GcnnError::NotCandidate(j)))
        .collect::<Result<_, _>>()?;
    Ok((logits, cache.value))
}

/// Softmax over the candidate logits.
pub fn masked_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

/// Candidate with the largest logit; ties go to the lowest variable index.
pub fn predict_branch(params: &GcnnParams, obs: &BipartiteObservation, candidates: &[usize]) -> Result<usize, GcnnError> {
    if candidates.is_empty() {
        return Err(GcnnError::EmptyCandidates);
    }
    let (logits, _) = gcnn_forward(params, obs, candidates)?;
    let mut best = (candidates[0], logits[0]);
    for (&j, &l) in candidates.iter().zip(&logits).skip(1) {
        if l > best.1 || (l == best.1 && j < best.0) {
            best = (j, l);
        }
    }
    Ok(best.0)
}

/// A training example. `target` is only read by the value loss.
#[derive(Debug, Clone)]
pub struct Sample {
    pub obs: Arc<BipartiteObservation>,
    pub candidates: Vec<usize>,
    pub action: usize,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    /// Mean cross-entropy of the expert action.
    Policy,
    /// `sum_i (V_i - G_i)^2 (1[V_i >= G_i] + K 1[V_i < G_i]) + lambda ||w||^2`.
    Value { k: f64, lambda: f64 },
}

fn sample_grad(params: &GcnnParams, s: &Sample, head: Head, scale: f64, grad: &mut [f64]) -> Result<f64, GcnnError> {
    let cache = params.forward_cached(&s.obs)?;
    let mut dlogits = vec![0.0; cache.n];
    let (loss, dvalue) = match head {
        Head::Policy => {
            let pos = s.candidates.iter().position(|&j| j == s.action).ok_or(GcnnError::NotCandidate(s.action))?;
            let logits: Vec<f64> = s.candidates.iter().map(|&j| cache.logits[j]).collect();
            let probs = masked_softmax(&logits);
            for (k, &j) in s.candidates.iter().enumerate() {
                dlogits[j] = scale * (probs[k] - f64::from(u8::from(k == pos)));
            }
            (-log_softmax_at(&logits, pos), 0.0)
        }
        Head::Value { k, .. } => {
            let diff = cache.value - s.target;
            let w = if cache.value >= s.target { 1.0 } else { k };
            (w * diff * diff, scale * 2.0 * w * diff)
        }
    };
    params.backward(&s.obs, &cache, &dlogits, dvalue, grad);
    Ok(loss)
}

fn chunk_grad(params: &GcnnParams, chunk: &[&Sample], head: Head, scale: f64) -> Result<(f64, Vec<f64>), GcnnError> {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for s in chunk {
        loss += sample_grad(params, s, head, scale, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Data-term loss (summed) and its gradient scaled by `scale`, reduced over
/// fixed-size chunks in order so the result does not depend on threading.
fn data_grad(params: &GcnnParams, batch: &[&Sample], head: Head, scale: f64) -> Result<(f64, Vec<f64>), GcnnError> {
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, Vec<f64>), GcnnError>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(|c| chunk_grad(params, c, head, scale)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, Vec<f64>), GcnnError>> = chunks.iter().map(|c| chunk_grad(params, c, head, scale)).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Loss and exact gradient over `batch` for the chosen head.
pub fn loss_and_grad(params: &GcnnParams, batch: &[Sample], head: Head) -> Result<(f64, Vec<f64>), GcnnError> {
    if batch.is_empty() {
        return Err(GcnnError::EmptyDataset);
    }
    let refs: Vec<&Sample> = batch.iter().collect();
    match head {
        Head::Policy => {
            let n = batch.len() as f64;
            let (loss, grad) = data_grad(params, &refs, head, 1.0 / n)?;
            Ok((loss / n, grad))
        }
        Head::Value { lambda, .. } => {
            let (mut loss, mut grad) = data_grad(params, &refs, head, 1.0)?;
            add_ridge(params, lambda, 1.0, &mut loss, &mut grad);
            Ok((loss, grad))
        }
    }
}

fn add_ridge(params: &GcnnParams, lambda: f64, scale: f64, loss: &mut f64, grad: &mut [f64]) {
    if lambda == 0.0 {
        return;
    }
    for s in &params.layers {
        for k in s.w() {
            let w = params.values[k];
            *loss += lambda * w * w;
            grad[k] += scale * 2.0 * lambda * w;
        }
    }
}

pub fn cross_entropy_loss(params: &GcnnParams, batch: &[Sample]) -> Result<f64, GcnnError> {
    if batch.is_empty() {
        return Err(GcnnError::EmptyDataset);
    }
    let mut total = 0.0;
    for s in batch {
        let pos = s.candidates.iter().position(|&j| j == s.action).ok_or(GcnnError::NotCandidate(s.action))?;
        let (logits, _) = gcnn_forward(params, &s.obs, &s.candidates)?;
        total -= log_softmax_at(&logits, pos);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Keep a checkpoint every this many epochs (and after the last).
    pub checkpoint_every: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.01, batch_size: 32, epochs: 30, seed: 0, checkpoint_every: 5, hidden: HIDDEN }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GcnnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GcnnError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 || self.hidden == 0 {
            return Err(GcnnError::Config("batch size, epochs, checkpoint cadence and width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: GcnnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Entry 0 is the untrained network.
    pub curve: Vec<EpochLoss>,
    pub checkpoints: Vec<Checkpoint>,
    /// Epoch at which the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

/// Mean-gradient step over shuffled mini-batches. `mask` freezes the
/// coordinates where it is false.
pub(crate) fn gd_epoch(
    params: &mut GcnnParams,
    data: &[Sample],
    order: &[usize],
    batch_size: usize,
    lr: f64,
    head: Head,
    mask: Option<&[bool]>,
) -> Result<(), GcnnError> {
    for batch in order.chunks(batch_size) {
        let refs: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
        let scale = 1.0 / refs.len() as f64;
        let (mut loss, mut grad) = data_grad(params, &refs, head, scale)?;
        if let Head::Value { lambda, .. } = head {
            add_ridge(params, lambda, 1.0 / data.len() as f64, &mut loss, &mut grad);
        }
        if let Some(mask) = mask {
            grad.iter_mut().zip(mask).for_each(|(g, &keep)| {
                if !keep {
                    *g = 0.0
                }
            });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(GcnnError::NonFinite("gradient"));
        }
        let factor = if norm > GRAD_CLIP { lr * GRAD_CLIP / norm } else { lr };
        params.values.iter_mut().zip(&grad).for_each(|(p, g)| *p -= factor * g);
    }
    Ok(())
}

pub(crate) fn shuffled(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// Imitation training with mini-batch gradient descent on the cross-entropy.
pub fn train_policy(train: &[Sample], valid: &[Sample], config: &TrainConfig) -> Result<TrainOutcome, GcnnError> {
    config.validate()?;
    if train.is_empty() {
        return Err(GcnnError::EmptyDataset);
    }
    let mut params = GcnnParams::init(config.hidden, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |p: &GcnnParams| -> Result<EpochLoss, GcnnError> {
        Ok(EpochLoss {
            epoch: 0,
            train_loss: cross_entropy_loss(p, train)?,
            valid_loss: if valid.is_empty() { None } else { Some(cross_entropy_loss(p, valid)?) },
        })
    };
    let mut curve = vec![eval(&params)?];
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.epochs {
        let order = shuffled(train.len(), &mut rng);
        let before = params.clone();
        let step = gd_epoch(&mut params, train, &order, config.batch_size, config.learning_rate, Head::Policy, None);
        let entry = step.and_then(|_| eval(&params)).ok().filter(|e| e.train_loss.is_finite() && params.all_finite());
        let Some(mut entry) = entry else {
            if checkpoints.last().is_none_or(|c: &Checkpoint| c.epoch != epoch - 1) {
                checkpoints.push(Checkpoint { epoch: epoch - 1, params: before });
            }
            return Ok(TrainOutcome { curve, checkpoints, diverged_at: Some(epoch) });
        };
        entry.epoch = epoch;
        curve.push(entry);
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            checkpoints.push(Checkpoint { epoch, params: params.clone() });
        }
    }
    Ok(TrainOutcome { curve, checkpoints, diverged_at: None })
}

pub fn write_loss_csv<W: Write>(mut out: W, curve: &[EpochLoss]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,valid_loss")?;
    for e in curve {
        let valid = e.valid_loss.map(|v| format!("{v:.17e}")).unwrap_or_default();
        writeln!(out, "{},{:.17e},{}", e.epoch, e.train_loss, valid)?;
    }
    Ok(())
}

pub fn read_loss_csv(text: &str) -> Result<Vec<EpochLoss>, GcnnError> {
    let bad = |line: usize| GcnnError::Checkpoint(format!("loss curve line {line} is malformed"));
    let mut curve = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(k + 1));
        }
        curve.push(EpochLoss {
            epoch: f[0].parse().map_err(|_| bad(k + 1))?,
            train_loss: f[1].parse().map_err(|_| bad(k + 1))?,
            valid_loss: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad(k + 1))?) },
        });
    }
    Ok(curve)
}

/// Binary checkpoint: magic, format version, feature catalog version,
/// feature widths, hidden width, epoch, tag string, then the parameters as
/// little-endian `f64`.
pub fn write_checkpoint<W: Write>(mut out: W, params: &GcnnParams, epoch: usize, tag: &str) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for v in [CHECKPOINT_VERSION, CATALOG_VERSION, VAR_FEATURES as u32, CONS_FEATURES as u32, params.hidden as u32, epoch as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(tag.len() as u32).to_le_bytes())?;
    out.write_all(tag.as_bytes())?;
    out.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub params: GcnnParams,
    pub epoch: usize,
    pub tag: String,
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<LoadedCheckpoint, GcnnError> {
    let ck = |m: &str| GcnnError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("not a checkpoint file"));
    }
    let mut u32s = [0u32; 7];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, catalog, fv, fc, hidden, epoch, tag_len] = u32s;
    if version != CHECKPOINT_VERSION {
        return Err(ck(&format!("unsupported checkpoint version {version}")));
    }
    if catalog != CATALOG_VERSION {
        return Err(GcnnError::CatalogMismatch { found: catalog, expected: CATALOG_VERSION });
    }
    if fv as usize != VAR_FEATURES || fc as usize != CONS_FEATURES || hidden == 0 || hidden > 4096 {
        return Err(ck(&format!("incompatible widths {fv}/{fc}/{hidden}")));
    }
    let mut tag = vec![0u8; tag_len as usize];
    input.read_exact(&mut tag)?;
    let tag = String::from_utf8(tag).map_err(|_| ck("tag is not UTF-8"))?;
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut params = GcnnParams::zeros(hidden as usize);
    if count != params.len() {
        return Err(ck(&format!("expected {} parameters, header says {count}", params.len())));
    }
    for v in &mut params.values {
        input.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    if !params.all_finite() {
        return Err(ck("non-finite parameter"));
    }
    Ok(LoadedCheckpoint { params, epoch: epoch as usize, tag })
}

/// Branching with a trained network.
#[derive(Debug, Clone)]
pub struct GcnnPolicy {
    pub params: Arc<GcnnParams>,
    name: String,
}

impl GcnnPolicy {
    pub fn new(params: Arc<GcnnParams>) -> Self {
        GcnnPolicy { params, name: "gcnn".into() }
    }

    pub fn named(params: Arc<GcnnParams>, name: impl Into<String>) -> Self {
        GcnnPolicy { params, name: name.into() }
    }
}

impl BranchingPolicy for GcnnPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn select(&mut self, ctx: &mut NodeContext<'_>) -> Result<usize, BranchError> {
        let candidates = ctx.candidates;
        let obs = ctx.observation()?;
        predict_branch(&self.params, obs, candidates).map_err(|e| BranchError::Policy(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn random_obs(rng: &mut ChaCha8Rng, n: usize, m: usize, density: f64) -> BipartiteObservation {
        let var_features = (0..n * VAR_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cons_features = (0..m * CONS_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut edges = vec![];
        for i in 0..m {
            for j in 0..n {
                if rng.random_bool(density) {
                    edges.push((i, j, rng.random_range(-1.0..1.0)));
                }
            }
        }
        BipartiteObservation { num_vars: n, num_cons: m, var_features, cons_features, edges }
    }

    #[test]
    fn layout_is_contiguous() {
        let p = GcnnParams::zeros(HIDDEN);
        let mut end = 0;
        for s in p.layers() {
            assert_eq!(s.offset, end);
            end = s.b().end;
        }
        assert_eq!(end, p.len());
        assert_eq!(p.weight_mask().iter().filter(|&&w| !w).count(), 10 * HIDDEN + 2);
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        assert_eq!(masked_softmax(&[0.3; 4]), vec![0.25; 4]);
    }

    #[test]
    fn policy_loss_leaves_value_head_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = Arc::new(random_obs(&mut rng, 5, 3, 0.6));
        let p = GcnnParams::init(8, 3);
        let batch = vec![Sample { obs, candidates: vec![1, 3], action: 3, target: 0.0 }];
        let (_, g) = loss_and_grad(&p, &batch, Head::Policy).unwrap();
        let s = p.slot("value_head").unwrap();
        assert!(g[s.offset..s.offset + s.input + 1].iter().all(|&v| v == 0.0));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_and_catalog_guard() {
        let p = GcnnParams::init(4, 9);
        let mut buf = vec![];
        write_checkpoint(&mut buf, &p, 7, "abc").unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!((back.params, back.epoch, back.tag.as_str()), (p, 7, "abc"));
        buf[12..16].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&buf[..]), Err(GcnnError::CatalogMismatch { found: 99, .. })));
    }

    #[test]
    fn loss_csv_roundtrip() {
        let curve = vec![
            EpochLoss { epoch: 0, train_loss: 1.5, valid_loss: Some(0.1) },
            EpochLoss { epoch: 1, train_loss: 0.25, valid_loss: None },
        ];
        let mut buf = vec![];
        write_loss_csv(&mut buf, &curve).unwrap();
        assert_eq!(read_loss_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), curve);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let obs = BipartiteObservation { num_vars: 2, num_cons: 0, var_features: vec![0.0; 5], cons_features: vec![], edges: vec![] };
        assert!(matches!(gcnn_forward(&GcnnParams::init(4, 0), &obs, &[0]), Err(GcnnError::Width(_))));
    }
}
