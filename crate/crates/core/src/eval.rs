//! Policy evaluation over instance sets, checkpoint selection by reward and
//! policy comparison.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bnb::{dual_integral, solve, BnbConfig, Budget, ClockMode, DualTrace, SolveStatus};
use crate::branching::{
    ActiveConstraint, BranchingPolicy, Hybrid, HybridConfig, MostInfeasible, Pseudocost, RandomBranching, StrongBranching,
};
use crate::gcnn::{GcnnParams, GcnnPolicy};
use crate::milp::MilpInstance;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error("no checkpoints to choose from")]
    NoCheckpoints,
    #[error("every checkpoint failed on the validation set")]
    AllCheckpointsFailed,
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A recipe for building one fresh policy per instance.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    MostInfeasible,
    Pseudocost { epsilon: f64 },
    StrongBranching,
    ActiveConstraint,
    Hybrid(HybridConfig),
    Random { seed: u64 },
    Gcnn { label: String, params: Arc<GcnnParams> },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::MostInfeasible => "most-infeasible".into(),
            PolicySpec::Pseudocost { .. } => "pseudocost".into(),
            PolicySpec::StrongBranching => "strong-branching".into(),
            PolicySpec::ActiveConstraint => "active-constraint".into(),
            PolicySpec::Hybrid(_) => "hybrid".into(),
            PolicySpec::Random { .. } => "random".into(),
            PolicySpec::Gcnn { label, .. } => label.clone(),
        }
    }

    /// Builds the policy for `instance`; seeded rules get a stream derived
    /// from their seed and the instance name.
    pub fn build(&self, instance: &str) -> Box<dyn BranchingPolicy + Send> {
        match self {
            PolicySpec::MostInfeasible => Box::new(MostInfeasible),
            PolicySpec::Pseudocost { epsilon } => Box::new(Pseudocost { epsilon: *epsilon }),
            PolicySpec::StrongBranching => Box::new(StrongBranching::default()),
            PolicySpec::ActiveConstraint => Box::new(ActiveConstraint::default()),
            PolicySpec::Hybrid(cfg) => {
                let cfg = HybridConfig { seed: stream_seed(cfg.seed, instance), ..*cfg };
                Box::new(Hybrid::new(cfg).expect("validated hybrid configuration"))
            }
            PolicySpec::Random { seed } => Box::new(RandomBranching::new(stream_seed(*seed, instance))),
            PolicySpec::Gcnn { label, params } => Box::new(GcnnPolicy::named(params.clone(), label.clone())),
        }
    }
}

/// Parses the built-in rule names. Learned policies are constructed
/// directly.
impl FromStr for PolicySpec {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Ok(match s {
            "most-infeasible" => PolicySpec::MostInfeasible,
            "pseudocost" => PolicySpec::Pseudocost { epsilon: crate::branching::SCORE_EPSILON },
            "strong-branching" => PolicySpec::StrongBranching,
            "active-constraint" => PolicySpec::ActiveConstraint,
            "hybrid" => PolicySpec::Hybrid(HybridConfig::default()),
            "random" => PolicySpec::Random { seed: 0 },
            other => return Err(EvalError::UnknownPolicy(other.to_string())),
        })
    }
}

/// Seed for the rng stream of one engine.
pub fn stream_seed(seed: u64, instance: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(instance.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance: String,
    pub status: String,
    pub dual_integral: Option<f64>,
    pub reward: Option<f64>,
    /// `T * opt`; `reward + dual_integral == constant`.
    pub constant: Option<f64>,
    pub nodes: Option<usize>,
    pub clock: Option<f64>,
    pub incumbent_value: Option<f64>,
    pub error: Option<String>,
}

impl EvalRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub instances: usize,
    pub failures: usize,
    pub mean_reward: Option<f64>,
    pub median_reward: Option<f64>,
    pub mean_integral: Option<f64>,
    pub mean_nodes: Option<f64>,
}

impl Aggregate {
    pub fn from_rows(rows: &[EvalRow]) -> Aggregate {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.is_ok()).collect();
        let mean = |f: &dyn Fn(&EvalRow) -> f64| {
            if ok.is_empty() { None } else { Some(ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64) }
        };
        let mut rewards: Vec<f64> = ok.iter().filter_map(|r| r.reward).collect();
        rewards.sort_by(f64::total_cmp);
        let median = match rewards.len() {
            0 => None,
            k if k % 2 == 1 => Some(rewards[k / 2]),
            k => Some(0.5 * (rewards[k / 2 - 1] + rewards[k / 2])),
        };
        Aggregate {
            instances: rows.len(),
            failures: rows.len() - ok.len(),
            mean_reward: mean(&|r| r.reward.unwrap_or(0.0)),
            median_reward: median,
            mean_integral: mean(&|r| r.dual_integral.unwrap_or(0.0)),
            mean_nodes: mean(&|r| r.nodes.unwrap_or(0) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub budget: Budget,
    pub clock_mode: ClockMode,
    /// False in wall-clock mode.
    pub reproducible: bool,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
    pub fingerprint: Fingerprint,
    /// Dual-bound traces aligned with `rows` (`None` for failures).
    #[serde(skip)]
    pub traces: Vec<Option<DualTrace>>,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub budget: Budget,
    pub clock_mode: ClockMode,
    pub workers: usize,
    pub seed: u64,
    pub config_hash: Option<String>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { budget: Budget::clock(50_000.0), clock_mode: ClockMode::Pseudo, workers: 1, seed: 0, config_hash: None }
    }
}

fn run_one(spec: &PolicySpec, inst: &MilpInstance, settings: &EvalSettings) -> (EvalRow, Option<DualTrace>) {
    let mut policy = spec.build(inst.name());
    let config = BnbConfig { budget: settings.budget, clock_mode: settings.clock_mode, ..Default::default() };
    let outcome = solve(inst, policy.as_mut(), &config)
        .map_err(|e| e.to_string())
        .and_then(|res| dual_integral(&res.trace).map(|di| (res, di)).map_err(|e| e.to_string()));
    match outcome {
        Ok((res, di)) => {
            let reward = res.trace.reward_constant() - di;
            let status = match res.status {
                SolveStatus::Optimal => "optimal",
                SolveStatus::BudgetExhausted => "budget-exhausted",
                SolveStatus::Infeasible => "infeasible",
            };
            let row = EvalRow {
                instance: inst.name().to_string(),
                status: status.into(),
                dual_integral: Some(di),
                reward: Some(reward),
                // Stored as the sum so the identity holds bit for bit; it is
                // within an ulp of `T * opt`.
                constant: Some(reward + di),
                nodes: Some(res.nodes_processed),
                clock: Some(res.clock),
                incumbent_value: res.incumbent_value,
                error: None,
            };
            (row, Some(res.trace))
        }
        Err(e) => (
            EvalRow {
                instance: inst.name().to_string(),
                status: "error".into(),
                dual_integral: None,
                reward: None,
                constant: None,
                nodes: None,
                clock: None,
                incumbent_value: None,
                error: Some(e),
            },
            None,
        ),
    }
}

/// Runs `f` over `items` on `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>, EvalError> {
    if workers == 0 {
        return Err(EvalError::NoWorkers);
    }
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| EvalError::Pool(e.to_string()))?;
            return Ok(pool.install(|| items.par_iter().map(&f).collect()));
        }
    }
    Ok(items.iter().map(f).collect())
}

/// Solves every instance with a fresh policy. Rows are sorted by instance
/// name; failures become error rows.
pub fn evaluate_policy(spec: &PolicySpec, instances: &[MilpInstance], settings: &EvalSettings) -> Result<EvalReport, EvalError> {
    let mut results = parallel_map(instances, settings.workers, |inst| run_one(spec, inst, settings))?;
    results.sort_by(|a, b| a.0.instance.cmp(&b.0.instance));
    let (rows, traces): (Vec<EvalRow>, Vec<Option<DualTrace>>) = results.into_iter().unzip();
    Ok(EvalReport {
        policy: spec.name(),
        aggregate: Aggregate::from_rows(&rows),
        rows,
        fingerprint: Fingerprint {
            seed: settings.seed,
            budget: settings.budget,
            clock_mode: settings.clock_mode,
            reproducible: settings.clock_mode == ClockMode::Pseudo,
            config_hash: settings.config_hash.clone(),
        },
        traces,
    })
}

fn opt_csv(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() }
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "instance,status,dual_integral,reward,constant,nodes,clock,incumbent_value,error")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.instance),
                r.status,
                opt_csv(r.dual_integral),
                opt_csv(r.reward),
                opt_csv(r.constant),
                r.nodes.map(|n| n.to_string()).unwrap_or_default(),
                opt_csv(r.clock),
                opt_csv(r.incumbent_value),
                csv_field(r.error.as_deref().unwrap_or(""))
            )?;
        }
        Ok(())
    }

    /// `(instance, clock, z*)` series, one row per trace event plus the
    /// horizon.
    pub fn write_plot_data<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "instance,clock,dual_bound")?;
        for (row, trace) in self.rows.iter().zip(&self.traces) {
            let Some(trace) = trace else { continue };
            for &(c, z) in &trace.events {
                writeln!(out, "{},{c:?},{z:?}", csv_field(&row.instance))?;
            }
            if let Some(&(c, z)) = trace.events.last() {
                if trace.horizon > c {
                    writeln!(out, "{},{:?},{z:?}", csv_field(&row.instance), trace.horizon)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub id: String,
    pub valid_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub mean_integral: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSelection {
    pub best: String,
    pub table: Vec<CheckpointRow>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

/// A trained network offered for selection.
#[derive(Debug, Clone)]
pub struct CandidateCheckpoint {
    pub id: String,
    pub params: Arc<GcnnParams>,
    pub valid_loss: Option<f64>,
}

/// Picks the checkpoint with the highest mean reward on `instances`; equal
/// rewards go to the later checkpoint. Validation loss is reported, not
/// used.
pub fn select_best_checkpoint(
    checkpoints: &[CandidateCheckpoint],
    instances: &[MilpInstance],
    settings: &EvalSettings,
) -> Result<CheckpointSelection, EvalError> {
    if checkpoints.is_empty() {
        return Err(EvalError::NoCheckpoints);
    }
    let mut table = Vec::new();
    let mut reports = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for (k, ck) in checkpoints.iter().enumerate() {
        let spec = PolicySpec::Gcnn { label: ck.id.clone(), params: ck.params.clone() };
        let report = evaluate_policy(&spec, instances, settings)?;
        let agg = &report.aggregate;
        let usable = agg.failures < agg.instances || agg.instances == 0;
        let reward = if usable { agg.mean_reward } else { None };
        if let Some(r) = reward {
            if best.is_none_or(|(_, b)| r >= b) {
                best = Some((k, r));
            }
        }
        table.push(CheckpointRow {
            id: ck.id.clone(),
            valid_loss: ck.valid_loss,
            mean_reward: reward,
            mean_integral: agg.mean_integral,
            failures: agg.failures,
        });
        reports.push(report);
    }
    let (k, _) = best.ok_or(EvalError::AllCheckpointsFailed)?;
    Ok(CheckpointSelection { best: checkpoints[k].id.clone(), table, reports })
}

impl CheckpointSelection {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "checkpoint,valid_loss,mean_reward,mean_integral,failures,selected")?;
        for r in &self.table {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&r.id),
                opt_csv(r.valid_loss),
                opt_csv(r.mean_reward),
                opt_csv(r.mean_integral),
                r.failures,
                u8::from(r.id == self.best)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderRow {
    pub rank: usize,
    pub policy: String,
    pub mean_reward: Option<f64>,
    pub median_reward: Option<f64>,
    pub mean_integral: Option<f64>,
    pub mean_nodes: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub rows: Vec<LeaderRow>,
    pub reports: Vec<EvalReport>,
}

/// Evaluates each policy on the same instances and ranks them by mean
/// reward (failing policies last, input order among equals).
pub fn compare_policies(specs: &[PolicySpec], instances: &[MilpInstance], settings: &EvalSettings) -> Result<Leaderboard, EvalError> {
    let reports = specs.iter().map(|s| evaluate_policy(s, instances, settings)).collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (reports[a].aggregate.mean_reward, reports[b].aggregate.mean_reward);
        match (ra, rb) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
    });
    let rows = order
        .iter()
        .enumerate()
        .map(|(rank, &k)| {
            let a = &reports[k].aggregate;
            LeaderRow {
                rank: rank + 1,
                policy: reports[k].policy.clone(),
                mean_reward: a.mean_reward,
                median_reward: a.median_reward,
                mean_integral: a.mean_integral,
                mean_nodes: a.mean_nodes,
                failures: a.failures,
            }
        })
        .collect();
    Ok(Leaderboard { rows, reports })
}

impl Leaderboard {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "rank,policy,mean_reward,median_reward,mean_integral,mean_nodes,failures")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.rank,
                csv_field(&r.policy),
                opt_csv(r.mean_reward),
                opt_csv(r.median_reward),
                opt_csv(r.mean_integral),
                opt_csv(r.mean_nodes),
                r.failures
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for Leaderboard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        writeln!(f, "{:<5} {:<24} {:>18} {:>18} {:>12}", "rank", "policy", "mean reward", "mean integral", "mean nodes")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<5} {:<24} {:>18} {:>18} {:>12}",
                r.rank,
                r.policy,
                show(r.mean_reward),
                show(r.mean_integral),
                show(r.mean_nodes)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

/// Paired sign test of `a > b`. Pairs equal to within `1e-12` relative are
/// ties and dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        if (x - y).abs() <= 1e-12 * x.abs().max(y.abs()) {
            ties += 1;
        } else if x > y {
            wins += 1;
        } else {
            losses += 1;
        }
    }
    let n = wins + losses;
    // Sum of binomial probabilities in log space.
    let ln_choose = |n: usize, k: usize| -> f64 { (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum() };
    let p_value = (wins..=n).map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp()).sum::<f64>().min(1.0);
    SignTest { wins, losses, ties, p_value }
}

/// Rewards of two reports paired by instance (only rows both solved).
pub fn paired_rewards(a: &EvalReport, b: &EvalReport) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![];
    let mut ys = vec![];
    for ra in &a.rows {
        if let (Some(x), Some(y)) = (ra.reward, b.rows.iter().find(|rb| rb.instance == ra.instance).and_then(|rb| rb.reward)) {
            xs.push(x);
            ys.push(y);
        }
    }
    (xs, ys)
}
