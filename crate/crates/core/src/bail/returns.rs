use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BailError, Episode};
use crate::observation::{BipartiteObservation, StateDigest};

/// A recorded decision labeled with its return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub instance: String,
    pub position: usize,
    pub digest: StateDigest,
    #[serde(skip)]
    pub obs: Option<Arc<BipartiteObservation>>,
    pub candidates: Vec<usize>,
    pub action: usize,
    pub reward: f64,
    #[serde(rename = "return")]
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnLabeledSet {
    pub gamma: f64,
    pub entries: Vec<LabeledEntry>,
}

impl ReturnLabeledSet {
    pub fn returns(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ret).collect()
    }
}

fn label(episode: &Episode, gamma: f64) -> Result<Vec<LabeledEntry>, BailError> {
    episode.validate()?;
    let mut out = Vec::with_capacity(episode.transitions.len());
    let mut next: Option<f64> = None;
    for (t, tr) in episode.transitions.iter().enumerate().rev() {
        let ret = match next {
            None => tr.reward,
            Some(g) => tr.reward + gamma * g,
        };
        next = Some(ret);
        out.push(LabeledEntry {
            instance: episode.instance.clone(),
            position: t,
            digest: tr.digest,
            obs: Some(tr.obs.clone()),
            candidates: tr.candidates.clone(),
            action: tr.action,
            reward: tr.reward,
            ret,
        });
    }
    out.reverse();
    Ok(out)
}

/// Discounted returns `G_i = r_i + gamma G_{i+1}`, `G_T = r_T`, per episode,
/// in episode then transition order.
pub fn compute_returns(episodes: &[Episode], gamma: f64) -> Result<ReturnLabeledSet, BailError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(BailError::Config(format!("gamma = {gamma} must lie in [0, 1]")));
    }
    #[cfg(feature = "parallel")]
    let labeled: Vec<Result<Vec<LabeledEntry>, BailError>> = {
        use rayon::prelude::*;
        episodes.par_iter().map(|e| label(e, gamma)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let labeled: Vec<Result<Vec<LabeledEntry>, BailError>> = episodes.iter().map(|e| label(e, gamma)).collect();
    let mut entries = Vec::new();
    for l in labeled {
        entries.extend(l?);
    }
    Ok(ReturnLabeledSet { gamma, entries })
}
