use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BailError, ReturnLabeledSet};
use crate::gcnn::{gcnn_forward, gd_epoch, shuffled, GcnnError, GcnnParams, Head, Sample, HIDDEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    /// Ridge weight on network weights (biases are not penalized).
    pub lambda: f64,
    /// Penalty multiplier for points the envelope falls below.
    pub k: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Percentage kept by the selection.
    pub p: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Fit only the output bias, giving a constant envelope.
    pub bias_only: bool,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        EnvelopeConfig {
            lambda: 1e-4,
            k: 1000.0,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 32,
            p: 15.0,
            seed: 0,
            hidden: HIDDEN,
            bias_only: false,
        }
    }
}

impl EnvelopeConfig {
    pub fn validate(&self) -> Result<(), BailError> {
        let bad = |m: String| Err(BailError::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("envelope.lambda = {} must be >= 0", self.lambda));
        }
        if !(self.k >= 1.0) {
            return bad(format!("envelope.k = {} must be >= 1", self.k));
        }
        if !(self.p > 0.0 && self.p <= 100.0) {
            return bad(format!("envelope.p = {} must lie in (0, 100]", self.p));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("envelope learning rate, epochs, batch size and width must be positive".into());
        }
        Ok(())
    }
}

/// Upper-envelope regressor. Trained on returns divided by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeModel {
    pub params: GcnnParams,
    pub scale: f64,
}

impl EnvelopeModel {
    pub fn value(&self, obs: &crate::observation::BipartiteObservation, candidates: &[usize]) -> Result<f64, GcnnError> {
        Ok(gcnn_forward(&self.params, obs, candidates)?.1 * self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    /// Penalized loss on normalized returns after each epoch; entry 0 is
    /// the initialization.
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    /// Fraction of entries with `V < G` after training.
    pub violation_fraction: f64,
    pub scale: f64,
}

fn penalized_loss(params: &GcnnParams, data: &[Sample], k: f64, lambda: f64) -> Result<(f64, Vec<f64>), GcnnError> {
    let mut loss = 0.0;
    let mut values = Vec::with_capacity(data.len());
    for s in data {
        let v = gcnn_forward(params, &s.obs, &s.candidates)?.1;
        let d = v - s.target;
        loss += d * d * if v >= s.target { 1.0 } else { k };
        values.push(v);
    }
    let mask = params.weight_mask();
    loss += lambda * params.values.iter().zip(&mask).filter(|(_, &w)| w).map(|(v, _)| v * v).sum::<f64>();
    Ok((loss, values))
}

/// Fits the envelope by gradient descent on the penalized loss. Steps use
/// the loss divided by the dataset size.
pub fn train_envelope(set: &ReturnLabeledSet, config: &EnvelopeConfig) -> Result<(EnvelopeModel, EnvelopeReport), BailError> {
    config.validate()?;
    if set.entries.is_empty() {
        return Err(BailError::Empty);
    }
    let max_abs = set.entries.iter().fold(0.0f64, |a, e| a.max(e.ret.abs()));
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let data: Vec<Sample> = set
        .entries
        .iter()
        .map(|e| {
            let obs = e.obs.clone().ok_or_else(|| BailError::Config(format!("entry {}:{} has no observation", e.instance, e.position)))?;
            Ok(Sample { obs, candidates: e.candidates.clone(), action: e.action, target: e.ret / scale })
        })
        .collect::<Result<_, BailError>>()?;
    let mut params = GcnnParams::init(config.hidden, config.seed);
    let mask = if config.bias_only {
        let slot = params.slot("value_head").expect("value head");
        params.values[slot.offset..slot.offset + slot.input].iter_mut().for_each(|w| *w = 0.0);
        let mut m = vec![false; params.len()];
        m[params.value_bias_index()] = true;
        Some(m)
    } else {
        None
    };
    let head = Head::Value { k: config.k, lambda: config.lambda };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let (first, _) = penalized_loss(&params, &data, config.k, config.lambda)?;
    let mut loss_curve = vec![first];
    let mut values = vec![];
    for epoch in 1..=config.epochs {
        let order = shuffled(data.len(), &mut rng);
        let step = gd_epoch(&mut params, &data, &order, config.batch_size, config.learning_rate, head, mask.as_deref());
        let result = step.and_then(|_| penalized_loss(&params, &data, config.k, config.lambda));
        match result {
            Ok((loss, v)) if loss.is_finite() => {
                loss_curve.push(loss);
                values = v;
            }
            Ok((loss, _)) => return Err(BailError::Divergence { epoch, loss }),
            Err(GcnnError::NonFinite(_)) => return Err(BailError::Divergence { epoch, loss: f64::NAN }),
            Err(e) => return Err(e.into()),
        }
    }
    let violations = values.iter().zip(&data).filter(|(v, s)| **v < s.target).count();
    let report = EnvelopeReport {
        final_loss: *loss_curve.last().expect("nonempty"),
        loss_curve,
        violation_fraction: violations as f64 / data.len() as f64,
        scale,
    };
    Ok((EnvelopeModel { params, scale }, report))
}
