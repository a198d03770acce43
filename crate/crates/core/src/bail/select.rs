use serde::{Deserialize, Serialize};

use super::BailError;

/// One row of the ranking: return, envelope value, and the ratio used to
/// order them after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub index: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub value: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// The boundary ratio `x`: every selected entry has ratio `>= x`.
    pub threshold: f64,
    /// Selected indices, best ratio first.
    pub selected: Vec<usize>,
    /// Common scale dividing returns and values.
    pub scale: f64,
    /// Amount subtracted from every normalized value before adding 1.
    pub shift: f64,
    /// All entries in input order.
    pub ranking: Vec<SelectedEntry>,
}

/// Keeps the `ceil(p m / 100)` entries with the largest `G / D`, where both
/// `G` and `V` are divided by `s = max(|G|, |V|)` and
/// `D = V - min(0, min V) + 1` so every denominator is at least 1. Equal
/// ratios keep input order.
pub fn select_top(returns: &[f64], values: &[f64], p: f64) -> Result<Selection, BailError> {
    if returns.is_empty() {
        return Err(BailError::Empty);
    }
    if returns.len() != values.len() {
        return Err(BailError::Config(format!("{} returns but {} values", returns.len(), values.len())));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(BailError::Config(format!("selection percentage {p} must lie in (0, 100]")));
    }
    if returns.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(BailError::Config("non-finite return or value".into()));
    }
    let m = returns.len();
    let max_abs = returns.iter().chain(values).fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let shift = values.iter().map(|v| v / scale).fold(0.0f64, f64::min);
    let ranking: Vec<SelectedEntry> = (0..m)
        .map(|i| {
            let d = values[i] / scale - shift + 1.0;
            SelectedEntry { index: i, ret: returns[i], value: values[i], ratio: (returns[i] / scale) / d }
        })
        .collect();
    let count = ((p * m as f64 / 100.0) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ranking[b].ratio.total_cmp(&ranking[a].ratio));
    order.truncate(count);
    let threshold = ranking[order[count - 1]].ratio;
    Ok(Selection { threshold, selected: order, scale, shift, ranking })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality() {
        let g: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let v = vec![1.0; 100];
        assert_eq!(select_top(&g, &v, 15.0).unwrap().selected.len(), 15);
        assert_eq!(select_top(&g, &v, 100.0).unwrap().selected.len(), 100);
        let g200: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert_eq!(select_top(&g200, &vec![1.0; 200], 15.0).unwrap().selected.len(), 30);
    }

    #[test]
    fn ties_keep_input_order() {
        let s = select_top(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 50.0).unwrap();
        assert_eq!(s.selected, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(select_top(&[], &[], 15.0), Err(BailError::Empty)));
        assert!(select_top(&[1.0], &[1.0], 0.0).is_err());
        assert!(select_top(&[1.0], &[1.0], 101.0).is_err());
    }
}
