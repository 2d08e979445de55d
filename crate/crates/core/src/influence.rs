//! Leave-one-out predictions and support influence.
//!
//! Removing support entry `s` from an NW prediction is a renormalization:
//! `f_- = (f - w_s * onehot(y_s)) / (1 - w_s)`. The influence of `s` on a
//! query with label `y` is the resulting change in cross-entropy,
//! `log((f^y - f^y w_s) / (f^y - w_s [y = y_s]))`. Both are computed from the
//! cached prediction alone, with no feature re-extraction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{nw_predict, LabeledExample, PredictionResult, SupportSet};

/// Entries of a leave-one-out prediction this far below zero are rounding dust.
const NEGATIVE_DUST: f64 = 1e-12;
const DEGENERATE_WEIGHT: f64 = 1.0 - 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub support_id: String,
    pub index: usize,
    pub label: usize,
    pub weight: f64,
    /// Change in the query's loss when this entry is removed; `+inf` when it is
    /// the only same-class mass.
    #[serde(with = "crate::report::extended_real")]
    pub influence: f64,
    pub same_class: bool,
}

fn check_removal(pred: &PredictionResult, support: &SupportSet, removed_index: usize) -> Result<f64> {
    if support.len() < 2 {
        return Err(Error::CannotRemoveLast);
    }
    if removed_index >= support.len() {
        return Err(Error::InvalidArgument(format!(
            "removed index {removed_index} outside support of size {}",
            support.len()
        )));
    }
    if pred.weights.weights.len() != support.len() || pred.probs.len() != support.class_count() {
        return Err(Error::InvalidArgument(
            "prediction was not computed on this support set".into(),
        ));
    }
    Ok(pred.weights.weights[removed_index])
}

/// Prediction on the support with entry `removed_index` dropped.
pub fn loo_predict(
    pred: &PredictionResult,
    support: &SupportSet,
    removed_index: usize,
) -> Result<Vec<f64>> {
    let w = check_removal(pred, support, removed_index)?;
    if w >= DEGENERATE_WEIGHT {
        return Err(Error::DegenerateWeight {
            index: removed_index,
            weight: w,
        });
    }
    if w == 0.0 {
        return Ok(pred.probs.clone());
    }
    let removed_label = support.entries()[removed_index].label;
    let scale = 1.0 - w;
    Ok(pred
        .probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let mass = if c == removed_label { p - w } else { p };
            let v = mass / scale;
            if v < 0.0 && v > -NEGATIVE_DUST {
                0.0
            } else {
                v
            }
        })
        .collect())
}

pub fn support_influence(
    pred: &PredictionResult,
    support: &SupportSet,
    removed_index: usize,
    true_label: usize,
) -> Result<InfluenceRecord> {
    let w = check_removal(pred, support, removed_index)?;
    let f_y = *pred.probs.get(true_label).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "label {true_label} outside [0, {})",
            pred.probs.len()
        ))
    })?;
    if f_y == 0.0 {
        return Err(Error::UndefinedLoss { label: true_label });
    }
    let entry = &support.entries()[removed_index];
    let same_class = entry.label == true_label;
    let numerator = f_y - f_y * w;
    let denominator = if same_class { f_y - w } else { f_y };
    let influence = if same_class && denominator <= 0.0 {
        f64::INFINITY
    } else if w == 0.0 {
        0.0
    } else {
        (numerator / denominator).ln()
    };
    Ok(InfluenceRecord {
        support_id: entry.id.clone(),
        index: removed_index,
        label: entry.label,
        weight: w,
        influence,
        same_class,
    })
}

/// Descending by influence, `+inf` first, ties by support order.
pub fn compare_influence(a: &InfluenceRecord, b: &InfluenceRecord) -> Ordering {
    b.influence
        .total_cmp(&a.influence)
        .then(a.index.cmp(&b.index))
}

/// Influence of every support entry on `query`, most helpful first.
pub fn rank_influence(
    query: &LabeledExample,
    support: &SupportSet,
    temperature: f64,
) -> Result<Vec<InfluenceRecord>> {
    let pred = nw_predict(&query.id, &query.features, support, temperature)?;
    rank_influence_for(&pred, support, query.label)
}

/// As [`rank_influence`], reusing an existing prediction on `support`.
pub fn rank_influence_for(
    pred: &PredictionResult,
    support: &SupportSet,
    true_label: usize,
) -> Result<Vec<InfluenceRecord>> {
    if pred.probs.get(true_label).copied() == Some(0.0) {
        return Err(Error::UndefinedLoss { label: true_label });
    }
    let mut records = (0..support.len())
        .map(|i| support_influence(pred, support, i, true_label))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(compare_influence);
    Ok(records)
}
