//! On-disk orchestration: generate, collect, select, train, evaluate,
//! compare and report, all under one run directory.
//!
//! ```text
//! <run>/config.txt              effective configuration
//! <run>/instances/{train,valid,test}/*.milp, manifest.json
//! <run>/episodes/*.jsonl, manifest.json
//! <run>/selected/returns.jsonl, dataset.jsonl, observations.jsonl, manifest.json
//! <run>/checkpoints/epoch-NNNN.ckpt, loss.csv, manifest.json
//! <run>/reports/...
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bail::{
    compute_returns, read_episode, select_top, train_envelope, write_episode, ArtifactTag, BailError, EnvelopeConfig, EnvelopeReport,
    Episode,
};
use crate::bnb::{solve, BnbConfig, Budget, ClockMode};
use crate::branching::{Db0Mode, Hybrid, HybridConfig};
use crate::eval::{
    compare_policies, evaluate_policy, paired_rewards, parallel_map, select_best_checkpoint, sign_test, stream_seed, CandidateCheckpoint,
    EvalError, EvalSettings, PolicySpec, SignTest,
};
use crate::gcnn::{
    read_checkpoint, read_loss_csv, train_policy, write_checkpoint, write_loss_csv, GcnnError, Sample, TrainConfig,
};
use crate::milp::{generate_instance, parse_instance, Family, InstanceError, InstanceFamilySpec, MilpInstance};
use crate::observation::{BipartiteObservation, StateDigest, CATALOG_VERSION, DIGEST_ALGORITHM};

/// Share of failed collections above which `collect` reports partial failure.
pub const FAILURE_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{failed} of {total} instances failed, above the {pct}% threshold", pct = FAILURE_THRESHOLD * 100.0)]
    PartialFailure { failed: usize, total: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Bail(#[from] BailError),
    #[error(transparent)]
    Model(#[from] GcnnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Process exit code: 1 usage, 2 data, 3 partial failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::PartialFailure { .. } => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Keys that do not affect results and are left out of the config hash.
const UNHASHED: &[&str] = &["workers"];

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("family", "multi-knapsack"),
    ("family.num_vars", "20"),
    ("family.num_cons", "5"),
    ("family.density", "0.8"),
    ("split.train", "200"),
    ("split.valid", "20"),
    ("split.test", "50"),
    ("collect.max_nodes", "25"),
    ("collect.max_clock", "none"),
    ("hybrid.db0_mode", "auto"),
    ("hybrid.db0_value", "0"),
    ("hybrid.r0", "0.5"),
    ("pc.epsilon", "1e-6"),
    ("envelope.gamma", "1"),
    ("envelope.lambda", "1e-4"),
    ("envelope.k", "1000"),
    ("envelope.p", "15"),
    ("envelope.epochs", "20"),
    ("envelope.lr", "0.01"),
    ("envelope.batch_size", "32"),
    ("envelope.hidden", "32"),
    ("train.lr", "0.01"),
    ("train.batch_size", "32"),
    ("train.epochs", "30"),
    ("train.checkpoint_every", "5"),
    ("train.hidden", "32"),
    ("train.valid_fraction", "0.1"),
    ("eval.max_clock", "50000"),
    ("eval.max_nodes", "none"),
    ("eval.clock_mode", "pseudo"),
    ("eval.baselines", "random,most-infeasible,pseudocost"),
    ("workers", "1"),
];

/// Flat `key = value` configuration with `#` comments.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl PipelineConfig {
    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::default();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", k + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(PipelineError::Config(format!("unknown key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T, PipelineError> {
        self.get(key).parse().map_err(|_| PipelineError::Config(format!("{key} = '{}' is not valid", self.get(key))))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, PipelineError> {
        if self.get(key) == "none" { Ok(None) } else { self.parse_value(key).map(Some) }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.family_template()?;
        self.hybrid()?.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.envelope()?.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train_config()?.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let gamma: f64 = self.parse_value("envelope.gamma")?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(PipelineError::Config(format!("envelope.gamma = {gamma} must lie in [0, 1]")));
        }
        let vf: f64 = self.parse_value("train.valid_fraction")?;
        if !(0.0..1.0).contains(&vf) {
            return Err(PipelineError::Config(format!("train.valid_fraction = {vf} must lie in [0, 1)")));
        }
        self.collect_budget()?.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.eval_settings()?.budget.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.workers()? == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        self.baselines()?;
        for split in ["split.train", "split.valid", "split.test"] {
            self.parse_value::<usize>(split)?;
        }
        Ok(())
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of SHA-256 over the result-affecting keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64, PipelineError> {
        self.parse_value("seed")
    }

    pub fn workers(&self) -> Result<usize, PipelineError> {
        self.parse_value("workers")
    }

    fn family_template(&self) -> Result<InstanceFamilySpec, PipelineError> {
        let family: Family = self.get("family").parse().map_err(|e: InstanceError| PipelineError::Config(e.to_string()))?;
        Ok(InstanceFamilySpec::new(
            family,
            self.parse_value("family.num_vars")?,
            self.parse_value("family.num_cons")?,
            self.parse_value("family.density")?,
            0,
        ))
    }

    pub fn hybrid(&self) -> Result<HybridConfig, PipelineError> {
        let db0 = match self.get("hybrid.db0_mode") {
            "auto" => Db0Mode::Auto,
            "fixed" => Db0Mode::Fixed(self.parse_value("hybrid.db0_value")?),
            other => return Err(PipelineError::Config(format!("hybrid.db0_mode = '{other}' (expected auto or fixed)"))),
        };
        Ok(HybridConfig { db0, r0: self.parse_value("hybrid.r0")?, seed: self.seed()?, epsilon: self.parse_value("pc.epsilon")? })
    }

    pub fn envelope(&self) -> Result<EnvelopeConfig, PipelineError> {
        Ok(EnvelopeConfig {
            lambda: self.parse_value("envelope.lambda")?,
            k: self.parse_value("envelope.k")?,
            epochs: self.parse_value("envelope.epochs")?,
            learning_rate: self.parse_value("envelope.lr")?,
            batch_size: self.parse_value("envelope.batch_size")?,
            p: self.parse_value("envelope.p")?,
            seed: self.seed()?,
            hidden: self.parse_value("envelope.hidden")?,
            bias_only: false,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, PipelineError> {
        Ok(TrainConfig {
            learning_rate: self.parse_value("train.lr")?,
            batch_size: self.parse_value("train.batch_size")?,
            epochs: self.parse_value("train.epochs")?,
            seed: self.seed()?,
            checkpoint_every: self.parse_value("train.checkpoint_every")?,
            hidden: self.parse_value("train.hidden")?,
        })
    }

    pub fn collect_budget(&self) -> Result<Budget, PipelineError> {
        Ok(Budget { max_nodes: self.optional("collect.max_nodes")?, max_clock: self.optional("collect.max_clock")? })
    }

    pub fn eval_settings(&self) -> Result<EvalSettings, PipelineError> {
        let clock_mode = match self.get("eval.clock_mode") {
            "pseudo" => ClockMode::Pseudo,
            "wall" => ClockMode::Wall,
            other => return Err(PipelineError::Config(format!("eval.clock_mode = '{other}' (expected pseudo or wall)"))),
        };
        Ok(EvalSettings {
            budget: Budget { max_nodes: self.optional("eval.max_nodes")?, max_clock: self.optional("eval.max_clock")? },
            clock_mode,
            workers: self.workers()?,
            seed: self.seed()?,
            config_hash: Some(self.hash()),
        })
    }

    pub fn baselines(&self) -> Result<Vec<PolicySpec>, PipelineError> {
        let seed = self.seed()?;
        self.get("eval.baselines")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                let spec: PolicySpec = name.parse().map_err(|e: EvalError| PipelineError::Config(e.to_string()))?;
                Ok(match spec {
                    PolicySpec::Random { .. } => PolicySpec::Random { seed },
                    PolicySpec::Hybrid(_) => PolicySpec::Hybrid(self.hybrid()?),
                    PolicySpec::Pseudocost { .. } => PolicySpec::Pseudocost { epsilon: self.parse_value("pc.epsilon")? },
                    other => other,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub tag: ArtifactTag,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub instance: String,
    pub transitions: usize,
    pub nodes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub instance: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub tag: ArtifactTag,
    pub episodes: Vec<EpisodeEntry>,
    pub failures: Vec<Failure>,
    pub total_transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub instance: String,
    pub position: usize,
    pub digest: StateDigest,
    pub candidates: Vec<usize>,
    pub action: usize,
    pub reward: f64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub value: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    digest: StateDigest,
    obs: BipartiteObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub tag: ArtifactTag,
    pub digest_algorithm: String,
    pub gamma: f64,
    pub p: f64,
    pub entries: usize,
    pub selected: usize,
    pub threshold: f64,
    pub scale: f64,
    pub shift: f64,
    pub envelope: EnvelopeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub id: String,
    pub epoch: usize,
    pub file: String,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub tag: ArtifactTag,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub checkpoints: Vec<CheckpointEntry>,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateManifest {
    pub tag: ArtifactTag,
    pub best_checkpoint: String,
    pub test_mean_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareManifest {
    pub tag: ArtifactTag,
    pub leaderboard: Vec<crate::eval::LeaderRow>,
    /// Learned policy against random branching, when both were run.
    pub sign_test_vs_random: Option<SignTest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A run directory bound to one configuration.
pub struct Run {
    pub root: PathBuf,
    pub config: PipelineConfig,
    pub tag: ArtifactTag,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let tag = ArtifactTag { config_hash: config.hash(), seed: config.seed()?, catalog_version: CATALOG_VERSION };
        let run = Run { root: root.into(), config, tag };
        run.write_text(&run.root.join("config.txt"), &run.config.to_text())?;
        Ok(run)
    }

    /// `<config hash>:<seed>`; the catalog version is in the checkpoint header.
    pub fn checkpoint_tag(&self) -> String {
        format!("{}:{}", self.tag.config_hash, self.tag.seed)
    }

    fn dir(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        Ok(d)
    }

    fn write_text(&self, path: &Path, text: &str) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, text).map_err(io_err(path))
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Data(e.to_string()))?;
        self.write_text(path, &(text + "\n"))
    }

    fn write_with<F>(&self, path: &Path, f: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }

    fn check_tag(&self, tag: &ArtifactTag, what: &str) -> Result<(), PipelineError> {
        if tag != &self.tag {
            return Err(PipelineError::Data(format!(
                "{what} was produced with config {} (seed {}, catalog v{}), current run is {} (seed {}, catalog v{}); rerun the stage",
                tag.config_hash, tag.seed, tag.catalog_version, self.tag.config_hash, self.tag.seed, self.tag.catalog_version
            )));
        }
        Ok(())
    }

    fn load_instance_manifest(&self) -> Result<InstanceManifest, PipelineError> {
        let m: InstanceManifest = self.read_json(&self.root.join("instances/manifest.json"))?;
        self.check_tag(&m.tag, "instances")?;
        Ok(m)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<MilpInstance>, PipelineError> {
        let m = self.load_instance_manifest()?;
        let names = match split {
            "train" => &m.train,
            "valid" => &m.valid,
            "test" => &m.test,
            other => return Err(PipelineError::Config(format!("unknown split '{other}'"))),
        };
        names
            .iter()
            .map(|name| {
                let path = self.root.join("instances").join(split).join(format!("{name}.milp"));
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                parse_instance(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    /// Writes train/valid/test instances of the configured family.
    pub fn generate(&self) -> Result<InstanceManifest, PipelineError> {
        let template = self.config.family_template()?;
        let seed = self.config.seed()?;
        let mut manifest = InstanceManifest { tag: self.tag.clone(), train: vec![], valid: vec![], test: vec![] };
        for (k, split) in ["train", "valid", "test"].into_iter().enumerate() {
            let count: usize = self.config.parse_value(&format!("split.{split}"))?;
            let dir = self.dir(&format!("instances/{split}"))?;
            let names = match split {
                "train" => &mut manifest.train,
                "valid" => &mut manifest.valid,
                _ => &mut manifest.test,
            };
            for i in 0..count {
                let spec = InstanceFamilySpec { seed: seed.wrapping_mul(1_000_000).wrapping_add(k as u64 * 100_000 + i as u64), ..template.clone() };
                let inst = generate_instance(&spec)?;
                self.write_text(&dir.join(format!("{}.milp", inst.name())), &inst.to_text())?;
                names.push(inst.name().to_string());
            }
        }
        self.write_json(&self.root.join("instances/manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Records one hybrid-expert episode per training instance.
    pub fn collect(&self) -> Result<EpisodeManifest, PipelineError> {
        let instances = self.load_split("train")?;
        let hybrid = self.config.hybrid()?;
        let bnb = BnbConfig { budget: self.config.collect_budget()?, record_episode: true, ..Default::default() };
        let dir = self.dir("episodes")?;
        let results = parallel_map(&instances, self.config.workers()?, |inst| -> Result<EpisodeEntry, String> {
            let mut policy = Hybrid::new(HybridConfig { seed: stream_seed(hybrid.seed, inst.name()), ..hybrid }).map_err(|e| e.to_string())?;
            let res = solve(inst, &mut policy, &bnb).map_err(|e| e.to_string())?;
            let episode = res.episode.expect("recording enabled");
            let mut buf = Vec::new();
            write_episode(&mut buf, &episode, Some(&self.tag)).map_err(|e| e.to_string())?;
            let path = dir.join(format!("{}.jsonl", inst.name()));
            fs::write(&path, &buf).map_err(|e| format!("{}: {e}", path.display()))?;
            Ok(EpisodeEntry { instance: inst.name().to_string(), transitions: episode.transitions.len(), nodes: res.nodes_processed, sha256: sha256_hex(&buf) })
        })?;
        let mut manifest = EpisodeManifest { tag: self.tag.clone(), episodes: vec![], failures: vec![], total_transitions: 0 };
        for (inst, r) in instances.iter().zip(results) {
            match r {
                Ok(entry) => {
                    manifest.total_transitions += entry.transitions;
                    manifest.episodes.push(entry);
                }
                Err(error) => manifest.failures.push(Failure { instance: inst.name().to_string(), error }),
            }
        }
        manifest.episodes.sort_by(|a, b| a.instance.cmp(&b.instance));
        manifest.failures.sort_by(|a, b| a.instance.cmp(&b.instance));
        self.write_json(&dir.join("manifest.json"), &manifest)?;
        let (failed, total) = (manifest.failures.len(), instances.len());
        if failed as f64 > FAILURE_THRESHOLD * total as f64 {
            return Err(PipelineError::PartialFailure { failed, total });
        }
        Ok(manifest)
    }

    pub fn load_episodes(&self) -> Result<Vec<Episode>, PipelineError> {
        let dir = self.root.join("episodes");
        let manifest: EpisodeManifest = self.read_json(&dir.join("manifest.json"))?;
        self.check_tag(&manifest.tag, "episodes")?;
        manifest
            .episodes
            .iter()
            .map(|e| {
                let path = dir.join(format!("{}.jsonl", e.instance));
                let file = File::open(&path).map_err(io_err(&path))?;
                let (episode, tag) = read_episode(BufReader::new(file)).map_err(|err| PipelineError::Data(format!("{}: {err}", path.display())))?;
                match tag {
                    Some(t) => self.check_tag(&t, &path.display().to_string())?,
                    None => return Err(PipelineError::Data(format!("{}: missing artifact tag", path.display()))),
                }
                Ok(episode)
            })
            .collect()
    }

    /// Returns, envelope fit and top-p selection.
    pub fn select(&self) -> Result<SelectionManifest, PipelineError> {
        let episodes = self.load_episodes()?;
        let gamma: f64 = self.config.parse_value("envelope.gamma")?;
        let envelope_cfg = self.config.envelope()?;
        let set = compute_returns(&episodes, gamma)?;
        let (model, report) = train_envelope(&set, &envelope_cfg)?;
        let values = set
            .entries
            .iter()
            .map(|e| model.value(e.obs.as_ref().expect("episode observation"), &e.candidates))
            .collect::<Result<Vec<f64>, _>>()?;
        let returns = set.returns();
        let selection = select_top(&returns, &values, envelope_cfg.p)?;
        let dir = self.dir("selected")?;
        let record = |i: usize| {
            let e = &set.entries[i];
            DatasetRecord {
                instance: e.instance.clone(),
                position: e.position,
                digest: e.digest,
                candidates: e.candidates.clone(),
                action: e.action,
                reward: e.reward,
                ret: e.ret,
                value: values[i],
                ratio: selection.ranking[i].ratio,
            }
        };
        let jsonl = |w: &mut BufWriter<File>, items: &mut dyn Iterator<Item = DatasetRecord>| -> std::io::Result<()> {
            for r in items {
                serde_json::to_writer(&mut *w, &r)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        };
        self.write_with(&dir.join("returns.jsonl"), |w| jsonl(w, &mut (0..set.entries.len()).map(record)))?;
        self.write_with(&dir.join("dataset.jsonl"), |w| jsonl(w, &mut selection.selected.iter().map(|&i| record(i))))?;
        self.write_with(&dir.join("observations.jsonl"), |w| {
            let mut seen = HashSet::new();
            for e in &set.entries {
                if seen.insert(e.digest) {
                    let blob = Blob { digest: e.digest, obs: (**e.obs.as_ref().expect("episode observation")).clone() };
                    serde_json::to_writer(&mut *w, &blob)?;
                    w.write_all(b"\n")?;
                }
            }
            Ok(())
        })?;
        let manifest = SelectionManifest {
            tag: self.tag.clone(),
            digest_algorithm: DIGEST_ALGORITHM.into(),
            gamma,
            p: envelope_cfg.p,
            entries: set.entries.len(),
            selected: selection.selected.len(),
            threshold: selection.threshold,
            scale: selection.scale,
            shift: selection.shift,
            envelope: report,
        };
        self.write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    fn read_jsonl<T: DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>, PipelineError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut out = Vec::new();
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), k + 1)))?);
        }
        Ok(out)
    }

    /// The selected dataset with observations resolved from the blob store.
    pub fn load_dataset(&self) -> Result<Vec<Sample>, PipelineError> {
        let dir = self.root.join("selected");
        let manifest: SelectionManifest = self.read_json(&dir.join("manifest.json"))?;
        self.check_tag(&manifest.tag, "selected dataset")?;
        let blobs: Vec<Blob> = self.read_jsonl(&dir.join("observations.jsonl"))?;
        let store: BTreeMap<StateDigest, Arc<BipartiteObservation>> = blobs.into_iter().map(|b| (b.digest, Arc::new(b.obs))).collect();
        let records: Vec<DatasetRecord> = self.read_jsonl(&dir.join("dataset.jsonl"))?;
        records
            .into_iter()
            .map(|r| {
                let obs = store
                    .get(&r.digest)
                    .cloned()
                    .ok_or_else(|| PipelineError::Data(format!("observation {} missing from the blob store", r.digest)))?;
                Ok(Sample { obs, candidates: r.candidates, action: r.action, target: r.ret })
            })
            .collect()
    }

    /// Imitation training on the selected dataset.
    pub fn train(&self) -> Result<TrainManifest, PipelineError> {
        let samples = self.load_dataset()?;
        if samples.is_empty() {
            return Err(PipelineError::Data("selected dataset is empty".into()));
        }
        let cfg = self.config.train_config()?;
        let vf: f64 = self.config.parse_value("train.valid_fraction")?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7f4a_7c15);
        let order = crate::gcnn::shuffled(samples.len(), &mut rng);
        let n_valid = if samples.len() >= 2 { ((samples.len() as f64 * vf).round() as usize).min(samples.len() - 1) } else { 0 };
        let valid: Vec<Sample> = order[..n_valid].iter().map(|&i| samples[i].clone()).collect();
        let train: Vec<Sample> = order[n_valid..].iter().map(|&i| samples[i].clone()).collect();
        let outcome = train_policy(&train, &valid, &cfg)?;
        let dir = self.dir("checkpoints")?;
        self.write_with(&dir.join("loss.csv"), |w| write_loss_csv(w, &outcome.curve))?;
        let mut entries = vec![];
        for ck in &outcome.checkpoints {
            let id = format!("epoch-{:04}", ck.epoch);
            let file = format!("{id}.ckpt");
            self.write_with(&dir.join(&file), |w| write_checkpoint(w, &ck.params, ck.epoch, &self.checkpoint_tag()))?;
            let valid_loss = outcome.curve.iter().find(|e| e.epoch == ck.epoch).and_then(|e| e.valid_loss);
            entries.push(CheckpointEntry { id, epoch: ck.epoch, file, valid_loss });
        }
        let manifest = TrainManifest {
            tag: self.tag.clone(),
            train_samples: train.len(),
            valid_samples: valid.len(),
            checkpoints: entries,
            diverged_at: outcome.diverged_at,
        };
        self.write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    fn load_checkpoints(&self) -> Result<Vec<CandidateCheckpoint>, PipelineError> {
        let dir = self.root.join("checkpoints");
        let manifest: TrainManifest = self.read_json(&dir.join("manifest.json"))?;
        self.check_tag(&manifest.tag, "checkpoints")?;
        let mut out = vec![];
        let mut errors = vec![];
        for e in &manifest.checkpoints {
            let path = dir.join(&e.file);
            let loaded = File::open(&path)
                .map_err(GcnnError::from)
                .and_then(|f| read_checkpoint(BufReader::new(f)))
                .map_err(|err| format!("{}: {err}", path.display()))
                .and_then(|ck| {
                    if ck.tag == self.checkpoint_tag() { Ok(ck) } else { Err(format!("{}: tag {} differs from {}", path.display(), ck.tag, self.checkpoint_tag())) }
                });
            match loaded {
                Ok(ck) => out.push(CandidateCheckpoint { id: e.id.clone(), params: Arc::new(ck.params), valid_loss: e.valid_loss }),
                Err(msg) => errors.push(msg),
            }
        }
        if out.is_empty() {
            return Err(PipelineError::Data(format!("no checkpoint could be loaded: {}", errors.join("; "))));
        }
        Ok(out)
    }

    fn best_policy(&self) -> Result<PolicySpec, PipelineError> {
        let m: EvaluateManifest = self.read_json(&self.root.join("reports/evaluate.json"))?;
        self.check_tag(&m.tag, "evaluation")?;
        let path = self.root.join("checkpoints").join(format!("{}.ckpt", m.best_checkpoint));
        let ck = read_checkpoint(BufReader::new(File::open(&path).map_err(io_err(&path))?))?;
        if ck.tag != self.checkpoint_tag() {
            return Err(PipelineError::Data(format!("{}: tag {} differs from {}", path.display(), ck.tag, self.checkpoint_tag())));
        }
        Ok(PolicySpec::Gcnn { label: "gcnn".into(), params: Arc::new(ck.params) })
    }

    fn write_report(&self, stem: &str, report: &crate::eval::EvalReport) -> Result<(), PipelineError> {
        let dir = self.dir("reports")?;
        self.write_json(&dir.join(format!("{stem}.json")), report)?;
        self.write_with(&dir.join(format!("{stem}.csv")), |w| report.write_csv(w))?;
        self.write_with(&dir.join(format!("plot-{stem}.csv")), |w| report.write_plot_data(w))
    }

    /// Chooses the checkpoint by validation reward, then scores it on the
    /// test split.
    pub fn evaluate(&self) -> Result<EvaluateManifest, PipelineError> {
        let checkpoints = self.load_checkpoints()?;
        let valid = self.load_split("valid")?;
        let test = self.load_split("test")?;
        let settings = self.config.eval_settings()?;
        let selection = select_best_checkpoint(&checkpoints, &valid, &settings)?;
        let dir = self.dir("reports")?;
        self.write_json(&dir.join("checkpoint_selection.json"), &selection)?;
        self.write_with(&dir.join("checkpoint_selection.csv"), |w| selection.write_csv(w))?;
        let best = checkpoints.iter().find(|c| c.id == selection.best).expect("selected from the list");
        let spec = PolicySpec::Gcnn { label: "gcnn".into(), params: best.params.clone() };
        let report = evaluate_policy(&spec, &test, &settings)?;
        self.write_report("eval-gcnn", &report)?;
        let manifest = EvaluateManifest { tag: self.tag.clone(), best_checkpoint: selection.best, test_mean_reward: report.aggregate.mean_reward };
        self.write_json(&dir.join("evaluate.json"), &manifest)?;
        Ok(manifest)
    }

    /// Leaderboard of the learned policy and the configured baselines on
    /// the test split.
    pub fn compare(&self) -> Result<CompareManifest, PipelineError> {
        let test = self.load_split("test")?;
        let mut specs = vec![self.best_policy()?];
        specs.extend(self.config.baselines()?);
        let board = compare_policies(&specs, &test, &self.config.eval_settings()?)?;
        for r in &board.reports {
            self.write_report(&format!("compare-{}", r.policy), r)?;
        }
        let dir = self.dir("reports")?;
        self.write_with(&dir.join("compare.csv"), |w| board.write_csv(w))?;
        let find = |name: &str| board.reports.iter().find(|r| r.policy == name);
        let sign = match (find("gcnn"), find("random")) {
            (Some(g), Some(r)) => {
                let (a, b) = paired_rewards(g, r);
                Some(sign_test(&a, &b))
            }
            _ => None,
        };
        let manifest = CompareManifest { tag: self.tag.clone(), leaderboard: board.rows.clone(), sign_test_vs_random: sign };
        self.write_json(&dir.join("compare.json"), &manifest)?;
        Ok(manifest)
    }

    /// Human-readable summary. Refuses artifacts from another configuration.
    pub fn report(&self) -> Result<String, PipelineError> {
        let instances = self.load_instance_manifest()?;
        let episodes: EpisodeManifest = self.read_json(&self.root.join("episodes/manifest.json"))?;
        self.check_tag(&episodes.tag, "episodes")?;
        let selection: SelectionManifest = self.read_json(&self.root.join("selected/manifest.json"))?;
        self.check_tag(&selection.tag, "selected dataset")?;
        let train: TrainManifest = self.read_json(&self.root.join("checkpoints/manifest.json"))?;
        self.check_tag(&train.tag, "checkpoints")?;
        let evaluation: EvaluateManifest = self.read_json(&self.root.join("reports/evaluate.json"))?;
        self.check_tag(&evaluation.tag, "evaluation")?;
        let compare: Option<CompareManifest> = match self.read_json(&self.root.join("reports/compare.json")) {
            Ok(c) => Some(c),
            Err(PipelineError::Io { .. }) => None,
            Err(e) => return Err(e),
        };
        if let Some(c) = &compare {
            self.check_tag(&c.tag, "comparison")?;
        }
        let checkpoint_table: crate::eval::CheckpointSelection = self.read_json(&self.root.join("reports/checkpoint_selection.json"))?;
        let loss_path = self.root.join("checkpoints/loss.csv");
        let loss_text = fs::read_to_string(&loss_path).map_err(io_err(&loss_path))?;
        let curve = read_loss_csv(&loss_text)?;
        self.write_text(&self.root.join("reports/loss_curve.csv"), &loss_text)?;

        let show = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        let mut line = |t: String| {
            s.push_str(&t);
            s.push('\n');
        };
        line(format!("config {}  seed {}  feature catalog v{}", self.tag.config_hash, self.tag.seed, self.tag.catalog_version));
        line(format!(
            "instances: {} train, {} valid, {} test ({})",
            instances.train.len(),
            instances.valid.len(),
            instances.test.len(),
            self.config.get("family")
        ));
        line(format!(
            "collection: {} episodes, {} transitions, {} failures",
            episodes.episodes.len(),
            episodes.total_transitions,
            episodes.failures.len()
        ));
        line(format!(
            "selection: kept {} of {} (p = {}), ratio threshold {:.6}, envelope violation fraction {:.4}",
            selection.selected, selection.entries, selection.p, selection.threshold, selection.envelope.violation_fraction
        ));
        line(format!("training: {} train / {} valid samples", train.train_samples, train.valid_samples));
        line("epoch  train_loss  valid_loss".into());
        for e in &curve {
            line(format!("{:>5}  {:>10.6}  {:>10}", e.epoch, e.train_loss, show(e.valid_loss)));
        }
        line("checkpoint     valid_loss     mean_reward".into());
        for r in &checkpoint_table.table {
            let mark = if r.id == checkpoint_table.best { " *" } else { "" };
            line(format!("{:<12} {:>12} {:>18}{mark}", r.id, show(r.valid_loss), show(r.mean_reward)));
        }
        line(format!("best checkpoint: {} (selected by validation reward)", evaluation.best_checkpoint));
        line(format!("test mean reward: {}", show(evaluation.test_mean_reward)));
        if let Some(c) = &compare {
            line("leaderboard:".into());
            for r in &c.leaderboard {
                line(format!("  {}. {:<20} reward {:>18}  integral {:>14}  nodes {:>8}", r.rank, r.policy, show(r.mean_reward), show(r.mean_integral), show(r.mean_nodes)));
            }
            if let Some(t) = c.sign_test_vs_random {
                line(format!("sign test gcnn > random: {} wins, {} losses, {} ties, p = {:.3e}", t.wins, t.losses, t.ties, t.p_value));
            }
        }
        self.write_text(&self.root.join("reports/summary.txt"), &s)?;
        Ok(s)
    }

    pub fn run_all(&self) -> Result<String, PipelineError> {
        self.generate()?;
        self.collect()?;
        self.select()?;
        self.train()?;
        self.evaluate()?;
        self.compare()?;
        self.report()
    }
}
