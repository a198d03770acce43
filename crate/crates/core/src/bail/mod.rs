//! Recorded branching episodes and the return-based data selection that
//! filters them before imitation.

mod envelope;
mod returns;
mod select;

pub use envelope::{train_envelope, EnvelopeConfig, EnvelopeModel, EnvelopeReport};
pub use returns::{compute_returns, LabeledEntry, ReturnLabeledSet};
pub use select::{select_top, SelectedEntry, Selection};

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnb::{DualTrace, SolveStatus};
use crate::observation::{f_dim, BipartiteObservation, StateDigest, CATALOG_VERSION, DIGEST_ALGORITHM};

pub const EPISODE_FORMAT: &str = "branchlab-episode";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BailError {
    #[error("episode {episode}: transition {position}: {msg}")]
    Chain { episode: String, position: usize, msg: String },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("empty dataset")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("envelope training diverged at epoch {epoch} (loss {loss}); lower envelope.lr")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] crate::gcnn::GcnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identifies the run that produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactTag {
    pub config_hash: String,
    pub seed: u64,
    pub catalog_version: u32,
}

/// One branching decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub node: usize,
    /// Clock after the children of this decision were solved.
    pub clock: f64,
    pub digest: StateDigest,
    pub obs: Arc<BipartiteObservation>,
    pub candidates: Vec<usize>,
    pub action: usize,
    pub reward: f64,
    /// Digest of the next decision's state; `None` when `done`.
    pub next_digest: Option<StateDigest>,
    pub next_candidates: Option<Vec<usize>>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub instance: String,
    pub policy: String,
    pub status: SolveStatus,
    pub transitions: Vec<Transition>,
    pub trace: DualTrace,
    /// Area under the dual bound after the last decision.
    pub tail_reward: f64,
}

impl Episode {
    /// Observation reached after transition `t`.
    pub fn next_obs(&self, t: usize) -> Option<&Arc<BipartiteObservation>> {
        if self.transitions.get(t)?.done { None } else { self.transitions.get(t + 1).map(|n| &n.obs) }
    }

    pub fn validate(&self) -> Result<(), BailError> {
        let err = |position: usize, msg: String| BailError::Chain { episode: self.instance.clone(), position, msg };
        let last = self.transitions.len().saturating_sub(1);
        for (t, tr) in self.transitions.iter().enumerate() {
            if !tr.candidates.contains(&tr.action) {
                return Err(err(t, format!("action {} not among candidates", tr.action)));
            }
            if !tr.reward.is_finite() {
                return Err(err(t, format!("non-finite reward {}", tr.reward)));
            }
            if tr.done != (t == last) {
                return Err(err(t, "done flag must be set exactly on the last transition".into()));
            }
            if let Some(next) = self.transitions.get(t + 1) {
                if tr.next_digest != Some(next.digest) || tr.next_candidates.as_ref() != Some(&next.candidates) {
                    return Err(err(t, "next state does not match the following transition".into()));
                }
            } else if tr.next_digest.is_some() || tr.next_candidates.is_some() {
                return Err(err(t, "terminal transition carries a next state".into()));
            }
        }
        Ok(())
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum::<f64>() + self.tail_reward
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeHeader {
    format: String,
    version: u32,
    catalog_version: u32,
    digest_algorithm: String,
    instance: String,
    policy: String,
    status: SolveStatus,
    transitions: usize,
    tail_reward: f64,
    trace: DualTrace,
    tag: Option<ArtifactTag>,
}

/// JSON-lines: a header line, then one transition per line.
pub fn write_episode<W: Write>(mut out: W, episode: &Episode, tag: Option<&ArtifactTag>) -> std::io::Result<()> {
    let header = EpisodeHeader {
        format: EPISODE_FORMAT.into(),
        version: EPISODE_VERSION,
        catalog_version: CATALOG_VERSION,
        digest_algorithm: DIGEST_ALGORITHM.into(),
        instance: episode.instance.clone(),
        policy: episode.policy.clone(),
        status: episode.status,
        transitions: episode.transitions.len(),
        tail_reward: episode.tail_reward,
        trace: episode.trace.clone(),
        tag: tag.cloned(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for t in &episode.transitions {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_episode<R: BufRead>(input: R) -> Result<(Episode, Option<ArtifactTag>), BailError> {
    let mut lines = input.lines();
    let fmt_err = |line: usize, msg: String| BailError::Format { line, msg };
    let first = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))??;
    let header: EpisodeHeader = serde_json::from_str(&first).map_err(|e| fmt_err(1, e.to_string()))?;
    if header.format != EPISODE_FORMAT || header.version != EPISODE_VERSION {
        return Err(fmt_err(1, format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.catalog_version != CATALOG_VERSION || header.digest_algorithm != DIGEST_ALGORITHM {
        return Err(fmt_err(
            1,
            format!(
                "feature catalog v{} / digest {} does not match this build (v{CATALOG_VERSION} / {DIGEST_ALGORITHM})",
                header.catalog_version, header.digest_algorithm
            ),
        ));
    }
    let mut transitions = Vec::with_capacity(header.transitions);
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transition = serde_json::from_str(&line).map_err(|e| fmt_err(k + 2, e.to_string()))?;
        if f_dim(&t.obs, &t.candidates) != t.digest {
            return Err(fmt_err(k + 2, "stored digest does not match the observation".into()));
        }
        transitions.push(t);
    }
    if transitions.len() != header.transitions {
        return Err(fmt_err(1, format!("header announces {} transitions, found {}", header.transitions, transitions.len())));
    }
    let episode = Episode {
        instance: header.instance,
        policy: header.policy,
        status: header.status,
        transitions,
        trace: header.trace,
        tail_reward: header.tail_reward,
    };
    episode.validate()?;
    Ok((episode, header.tag))
}
