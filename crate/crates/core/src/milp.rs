//! Mixed-integer linear programs in a single internal form:
//!
//! ```text
//! minimize c^T x  subject to  A x <= b,  l <= x <= u,  x_0..x_{p-1} integer
//! ```
//!
//! Rows given as `>=` or `=` are rewritten into `<=` rows when an instance is
//! built, so every consumer (simplex, scoring rules, observations) sees one
//! shape. Infinite bounds are stored as IEEE infinities and are only ever
//! tested with `is_finite`, never used in arithmetic.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_TAG: &str = "MILP";
pub const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstanceError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Semantic { path: String, msg: String },
    #[error("unsupported instance family `{0}`")]
    UnsupportedFamily(String),
    #[error("invalid generator parameters: {0}")]
    InvalidSpec(String),
}

fn semantic(path: impl Into<String>, msg: impl Into<String>) -> InstanceError {
    InstanceError::Semantic { path: path.into(), msg: msg.into() }
}

/// Relation of a constraint row as written in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

/// One `<=` row: coefficients sorted by column, zeros removed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseRow {
    entries: Vec<(usize, f64)>,
}

impl SparseRow {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn coeff(&self, col: usize) -> f64 {
        match self.entries.binary_search_by_key(&col, |&(c, _)| c) {
            Ok(k) => self.entries[k].1,
            Err(_) => 0.0,
        }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(j, a)| a * x[j]).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.entries.iter().map(|&(_, a)| a * a).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilpInstance {
    name: String,
    num_int: usize,
    objective: Vec<f64>,
    rows: Vec<SparseRow>,
    rhs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl MilpInstance {
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }
    pub fn num_cons(&self) -> usize {
        self.rows.len()
    }
    /// The first `num_int` variables are integer-constrained.
    pub fn num_int(&self) -> usize {
        self.num_int
    }
    pub fn is_integer(&self, j: usize) -> bool {
        j < self.num_int
    }
    pub fn objective(&self) -> &[f64] {
        &self.objective
    }
    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }
    pub fn row(&self, i: usize) -> &SparseRow {
        &self.rows[i]
    }
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::nnz).sum()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Row activities `A x`.
    pub fn activities(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(x)).collect()
    }

    /// Checks bounds, rows and integrality of `x` within the given tolerances.
    pub fn is_feasible(&self, x: &[f64], feas_tol: f64, int_tol: f64) -> bool {
        if x.len() != self.num_vars() {
            return false;
        }
        let bounds_ok = (0..self.num_vars())
            .all(|j| x[j] >= self.lower[j] - feas_tol && x[j] <= self.upper[j] + feas_tol);
        let rows_ok = self
            .rows
            .iter()
            .zip(&self.rhs)
            .all(|(r, &b)| r.dot(x) <= b + feas_tol);
        let int_ok = (0..self.num_int).all(|j| (x[j] - x[j].round()).abs() <= int_tol);
        bounds_ok && rows_ok && int_ok
    }

    /// Dense copy of the constraint matrix, row-major.
    pub fn dense_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.num_vars();
        self.rows
            .iter()
            .map(|r| {
                let mut dense = vec![0.0; n];
                for &(j, a) in &r.entries {
                    dense[j] = a;
                }
                dense
            })
            .collect()
    }

    /// Same data with integrality dropped.
    pub fn lp_relaxation(&self) -> MilpInstance {
        MilpInstance { num_int: 0, ..self.clone() }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Scales every objective coefficient by `factor`.
    pub fn scaled_objective(&self, factor: f64) -> MilpInstance {
        MilpInstance {
            objective: self.objective.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    /// Canonical text form; see [`parse_instance`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{FORMAT_TAG} {FORMAT_VERSION} {} {} {} {}",
            self.name,
            self.num_vars(),
            self.num_cons(),
            self.num_int
        );
        out.push_str("OBJ");
        for &c in &self.objective {
            let _ = write!(out, " {}", fmt_real(c));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "ROW {i} {} {}", fmt_real(self.rhs[i]), row.nnz());
            for &(j, a) in &row.entries {
                let _ = write!(out, " {j} {}", fmt_real(a));
            }
            out.push('\n');
        }
        for j in 0..self.num_vars() {
            let _ = writeln!(out, "BND {j} {} {}", fmt_real(self.lower[j]), fmt_real(self.upper[j]));
        }
        out
    }
}

impl fmt::Display for MilpInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for MilpInstance {
    type Err = InstanceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_instance(s)
    }
}

/// 17 significant digits, `inf`/`-inf` for unbounded values.
pub fn fmt_real(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// Incremental construction with validation and row normalization.
#[derive(Debug, Clone)]
pub struct MilpBuilder {
    name: String,
    num_int: usize,
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rows: Vec<(RowSense, f64, Vec<(usize, f64)>)>,
}

impl MilpBuilder {
    /// Starts an instance with `n` variables bounded to `[0, +inf)` and zero cost.
    pub fn new(name: impl Into<String>, n: usize, num_int: usize) -> Self {
        MilpBuilder {
            name: name.into(),
            num_int,
            objective: vec![0.0; n],
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            rows: Vec::new(),
        }
    }

    pub fn objective(mut self, c: Vec<f64>) -> Self {
        self.objective = c;
        self
    }

    pub fn bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.lower[j] = lo;
        self.upper[j] = hi;
    }

    pub fn row(mut self, sense: RowSense, coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        self.push_row(sense, coeffs, rhs);
        self
    }

    pub fn push_row(&mut self, sense: RowSense, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push((sense, rhs, coeffs));
    }

    /// Dense `<=` rows.
    pub fn dense_rows(mut self, a: &[Vec<f64>], b: &[f64]) -> Self {
        for (row, &rhs) in a.iter().zip(b) {
            let coeffs = row.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
            self.push_row(RowSense::Le, coeffs, rhs);
        }
        self
    }

    pub fn build(self) -> Result<MilpInstance, InstanceError> {
        let n = self.objective.len();
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(semantic("name", "must be a non-empty token without whitespace"));
        }
        if self.num_int > n {
            return Err(semantic("num_int", format!("{} exceeds variable count {n}", self.num_int)));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(semantic("bounds", format!("expected {n} entries")));
        }
        for (j, &c) in self.objective.iter().enumerate() {
            if !c.is_finite() {
                return Err(semantic(format!("objective[{j}]"), "must be finite"));
            }
        }
        for j in 0..n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(semantic(format!("bounds[{j}]"), format!("invalid bound pair [{lo}, {hi}]")));
            }
            if lo > hi {
                return Err(semantic(
                    format!("bounds[{j}]"),
                    format!("lower bound {lo} exceeds upper bound {hi} for variable {j}"),
                ));
            }
        }
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for (i, (sense, b, coeffs)) in self.rows.into_iter().enumerate() {
            if !b.is_finite() {
                return Err(semantic(format!("rows[{i}].rhs"), "must be finite"));
            }
            let mut seen = BTreeSet::new();
            let mut entries = Vec::with_capacity(coeffs.len());
            for (j, a) in coeffs {
                if j >= n {
                    return Err(semantic(format!("rows[{i}].col"), format!("column {j} out of range (n = {n})")));
                }
                if !a.is_finite() {
                    return Err(semantic(format!("rows[{i}][{j}]"), "coefficient must be finite"));
                }
                if !seen.insert(j) {
                    return Err(semantic(format!("rows[{i}][{j}]"), "duplicate (row, col) entry"));
                }
                if a != 0.0 {
                    entries.push((j, a));
                }
            }
            entries.sort_by_key(|&(j, _)| j);
            let negated = || SparseRow { entries: entries.iter().map(|&(j, a)| (j, -a)).collect() };
            match sense {
                RowSense::Le => {
                    rows.push(SparseRow { entries: entries.clone() });
                    rhs.push(b);
                }
                RowSense::Ge => {
                    rows.push(negated());
                    rhs.push(-b);
                }
                RowSense::Eq => {
                    rows.push(SparseRow { entries: entries.clone() });
                    rhs.push(b);
                    rows.push(negated());
                    rhs.push(-b);
                }
            }
        }
        Ok(MilpInstance {
            name: self.name,
            num_int: self.num_int,
            objective: self.objective,
            rows,
            rhs,
            lower: self.lower,
            upper: self.upper,
        })
    }
}

/// Parses the line-oriented instance format.
///
/// ```text
/// MILP v1 <name> <n> <m> <p>
/// OBJ c_0 .. c_{n-1}
/// ROW i [<=|>=|=] rhs nnz (col val)*      one per constraint, i = 0..m-1
/// BND j l u                               optional per variable, default [0, inf)
/// ```
///
/// Blank lines and lines starting with `#` are ignored. Rows without a sense
/// token are `<=`.
pub fn parse_instance(text: &str) -> Result<MilpInstance, InstanceError> {
    let syntax = |line: usize, msg: String| InstanceError::Syntax { line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| syntax(1, "empty input".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 6 || h[0] != FORMAT_TAG {
        return Err(syntax(hline, format!("expected `{FORMAT_TAG} {FORMAT_VERSION} <name> <n> <m> <p>`")));
    }
    if h[1] != FORMAT_VERSION {
        return Err(syntax(hline, format!("unsupported format version `{}`", h[1])));
    }
    let n: usize = parse_tok(h[3], hline, "n")?;
    let m: usize = parse_tok(h[4], hline, "m")?;
    let p: usize = parse_tok(h[5], hline, "p")?;
    let mut builder = MilpBuilder::new(h[2], n, p);
    let mut objective = None;
    let mut next_row = 0usize;
    let mut bound_seen = vec![false; n];

    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "OBJ" => {
                if objective.is_some() {
                    return Err(syntax(ln, "duplicate OBJ line".into()));
                }
                if toks.len() != n + 1 {
                    return Err(syntax(ln, format!("OBJ expects {n} values, found {}", toks.len() - 1)));
                }
                let c = toks[1..].iter().map(|t| parse_real(t, ln)).collect::<Result<Vec<_>, _>>()?;
                objective = Some(c);
            }
            "ROW" => {
                if toks.len() < 4 {
                    return Err(syntax(ln, "ROW expects `ROW i [sense] rhs nnz pairs`".into()));
                }
                let i: usize = parse_tok(toks[1], ln, "row index")?;
                if i != next_row {
                    return Err(syntax(ln, format!("row index {i} out of order (expected {next_row})")));
                }
                let (sense, rest) = match toks[2] {
                    "<=" => (RowSense::Le, &toks[3..]),
                    ">=" => (RowSense::Ge, &toks[3..]),
                    "=" => (RowSense::Eq, &toks[3..]),
                    _ => (RowSense::Le, &toks[2..]),
                };
                if rest.len() < 2 {
                    return Err(syntax(ln, "ROW missing rhs or nnz".into()));
                }
                let rhs = parse_real(rest[0], ln)?;
                let nnz: usize = parse_tok(rest[1], ln, "nnz")?;
                if rest.len() != 2 + 2 * nnz {
                    return Err(syntax(ln, format!("ROW declares {nnz} entries but has {} trailing tokens", rest.len() - 2)));
                }
                let mut coeffs = Vec::with_capacity(nnz);
                for pair in rest[2..].chunks(2) {
                    coeffs.push((parse_tok::<usize>(pair[0], ln, "column")?, parse_real(pair[1], ln)?));
                }
                builder.push_row(sense, coeffs, rhs);
                next_row += 1;
            }
            "BND" => {
                if toks.len() != 4 {
                    return Err(syntax(ln, "BND expects `BND j l u`".into()));
                }
                let j: usize = parse_tok(toks[1], ln, "variable index")?;
                if j >= n {
                    return Err(semantic(format!("bounds[{j}]"), format!("variable index out of range (n = {n})")));
                }
                if std::mem::replace(&mut bound_seen[j], true) {
                    return Err(syntax(ln, format!("duplicate BND for variable {j}")));
                }
                builder.set_bounds(j, parse_real(toks[2], ln)?, parse_real(toks[3], ln)?);
            }
            other => return Err(syntax(ln, format!("unknown record `{other}`"))),
        }
    }
    if next_row != m {
        return Err(syntax(hline, format!("header declares {m} rows, found {next_row}")));
    }
    let objective = objective.ok_or_else(|| syntax(hline, "missing OBJ line".into()))?;
    builder.objective(objective).build()
}

fn parse_tok<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T, InstanceError> {
    tok.parse()
        .map_err(|_| InstanceError::Syntax { line, msg: format!("invalid {what} `{tok}`") })
}

fn parse_real(tok: &str, line: usize) -> Result<f64, InstanceError> {
    match tok.parse::<f64>() {
        Ok(v) if !v.is_nan() => Ok(v),
        _ => Err(InstanceError::Syntax { line, msg: format!("invalid real `{tok}`") }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    MultiKnapsack,
    SetCover,
    ItemPlacementLike,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::MultiKnapsack => "multi-knapsack",
            Family::SetCover => "set-cover",
            Family::ItemPlacementLike => "item-placement-like",
        }
    }
}

impl FromStr for Family {
    type Err = InstanceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi-knapsack" => Ok(Family::MultiKnapsack),
            "set-cover" => Ok(Family::SetCover),
            "item-placement-like" => Ok(Family::ItemPlacementLike),
            other => Err(InstanceError::UnsupportedFamily(other.to_string())),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of a synthetic instance family.
///
/// For `item-placement-like`, `num_vars` is the item count and `num_cons`
/// the bin count; the generated instance has `items * bins` binary placement
/// variables followed by one continuous "unplaced" variable per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFamilySpec {
    pub family: Family,
    pub num_vars: usize,
    pub num_cons: usize,
    pub density: f64,
    pub seed: u64,
}

impl InstanceFamilySpec {
    pub fn new(family: Family, num_vars: usize, num_cons: usize, density: f64, seed: u64) -> Self {
        InstanceFamilySpec { family, num_vars, num_cons, density, seed }
    }

    pub fn instance_name(&self) -> String {
        format!("{}-n{}-m{}-s{}", self.family, self.num_vars, self.num_cons, self.seed)
    }
}

/// A generated instance together with the integer point it was built around.
#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub instance: MilpInstance,
    pub planted: Vec<f64>,
}

pub fn generate_instance(spec: &InstanceFamilySpec) -> Result<MilpInstance, InstanceError> {
    generate_with_planted(spec).map(|g| g.instance)
}

pub fn generate_with_planted(spec: &InstanceFamilySpec) -> Result<GeneratedInstance, InstanceError> {
    if spec.num_vars == 0 || spec.num_cons == 0 {
        return Err(InstanceError::InvalidSpec("sizes must be positive".into()));
    }
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(InstanceError::InvalidSpec(format!("density {} not in (0, 1]", spec.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let name = spec.instance_name();
    match spec.family {
        Family::MultiKnapsack => multi_knapsack(&name, spec, &mut rng),
        Family::SetCover => set_cover(&name, spec, &mut rng),
        Family::ItemPlacementLike => item_placement(&name, spec, &mut rng),
    }
}

/// Row pattern with the requested density and at least `min_nnz` entries.
fn sparse_pattern(rng: &mut ChaCha8Rng, n: usize, density: f64, min_nnz: usize) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < density).collect();
    while cols.len() < min_nnz.min(n) {
        let j = rng.random_range(0..n);
        if !cols.contains(&j) {
            cols.push(j);
        }
    }
    cols.sort_unstable();
    cols
}

fn multi_knapsack(name: &str, spec: &InstanceFamilySpec, rng: &mut ChaCha8Rng) -> Result<GeneratedInstance, InstanceError> {
    let (n, m) = (spec.num_vars, spec.num_cons);
    let planted: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut builder = MilpBuilder::new(name, n, n).bounds(vec![0.0; n], vec![1.0; n]);
    let mut weight_sum = vec![0.0; n];
    for _ in 0..m {
        let cols = sparse_pattern(rng, n, spec.density, 1);
        let coeffs: Vec<(usize, f64)> = cols.iter().map(|&j| (j, rng.random_range(1..=30) as f64)).collect();
        let total: f64 = coeffs.iter().map(|&(_, w)| w).sum();
        let load: f64 = coeffs.iter().map(|&(j, w)| w * planted[j]).sum();
        for &(j, w) in &coeffs {
            weight_sum[j] += w;
        }
        let cap = (0.5 * total).floor().max(load);
        builder.push_row(RowSense::Le, coeffs, cap);
    }
    // Profits loosely correlated with weight make the relaxation harder to round.
    let objective = (0..n)
        .map(|j| -((weight_sum[j] / m as f64).round() + rng.random_range(1..=10) as f64))
        .collect();
    Ok(GeneratedInstance { instance: builder.objective(objective).build()?, planted })
}

fn set_cover(name: &str, spec: &InstanceFamilySpec, rng: &mut ChaCha8Rng) -> Result<GeneratedInstance, InstanceError> {
    let (n, m) = (spec.num_vars, spec.num_cons);
    let objective = (0..n).map(|_| rng.random_range(1..=100) as f64).collect();
    let mut builder = MilpBuilder::new(name, n, n).objective(objective).bounds(vec![0.0; n], vec![1.0; n]);
    for _ in 0..m {
        let cols = sparse_pattern(rng, n, spec.density, 2);
        builder.push_row(RowSense::Ge, cols.into_iter().map(|j| (j, 1.0)).collect(), 1.0);
    }
    Ok(GeneratedInstance { instance: builder.build()?, planted: vec![1.0; n] })
}

fn item_placement(name: &str, spec: &InstanceFamilySpec, rng: &mut ChaCha8Rng) -> Result<GeneratedInstance, InstanceError> {
    const RESOURCES: usize = 2;
    const UNPLACED_PENALTY: f64 = 40.0;
    let (items, bins) = (spec.num_vars, spec.num_cons);
    let nx = items * bins;
    let n = nx + items;
    let var = |i: usize, b: usize| i * bins + b;

    let sizes: Vec<[f64; RESOURCES]> = (0..items)
        .map(|_| std::array::from_fn(|_| rng.random_range(1..=10) as f64))
        .collect();
    let mut objective = vec![0.0; n];
    let mut upper = vec![1.0; n];
    let mut allowed = vec![Vec::new(); items];
    for i in 0..items {
        for b in 0..bins {
            objective[var(i, b)] = rng.random_range(1..=20) as f64;
            if rng.random::<f64>() < spec.density {
                allowed[i].push(b);
            } else {
                upper[var(i, b)] = 0.0;
            }
        }
        objective[nx + i] = UNPLACED_PENALTY;
    }

    let mut planted = vec![0.0; n];
    let mut load = vec![[0.0; RESOURCES]; bins];
    for i in 0..items {
        if !allowed[i].is_empty() && rng.random_bool(0.7) {
            let b = allowed[i][rng.random_range(0..allowed[i].len())];
            planted[var(i, b)] = 1.0;
            for k in 0..RESOURCES {
                load[b][k] += sizes[i][k];
            }
        } else {
            planted[nx + i] = 1.0;
        }
    }

    let mut builder = MilpBuilder::new(name, n, nx).objective(objective).bounds(vec![0.0; n], upper);
    for i in 0..items {
        let mut cover: Vec<(usize, f64)> = (0..bins).map(|b| (var(i, b), 1.0)).collect();
        builder.push_row(RowSense::Le, cover.clone(), 1.0);
        cover.push((nx + i, 1.0));
        builder.push_row(RowSense::Ge, cover, 1.0);
    }
    for b in 0..bins {
        for k in 0..RESOURCES {
            let total: f64 = sizes.iter().map(|s| s[k]).sum();
            let cap = (0.6 * total / bins as f64).floor().max(load[b][k]);
            builder.push_row(RowSense::Le, (0..items).map(|i| (var(i, b), sizes[i][k])).collect(), cap);
        }
    }
    Ok(GeneratedInstance { instance: builder.build()?, planted })
}
