//! The Nadaraya-Watson head: a prediction is the weighted average of the
//! one-hot labels of a support set, with weights given by a softmax over
//! negative Euclidean distances in embedding space.
//!
//! Distances are plain Euclidean norms, never squared.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An id, a feature vector and an integer class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: usize) -> Self {
        Self {
            id: id.into(),
            features,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    pub class_count: usize,
    pub hot_index: usize,
}

impl OneHotLabel {
    pub fn new(class_count: usize, hot_index: usize) -> Result<Self> {
        if hot_index >= class_count {
            return Err(Error::InvalidArgument(format!(
                "label {hot_index} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            class_count,
            hot_index,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.class_count];
        v[self.hot_index] = 1.0;
        v
    }
}

/// Where a support entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    /// A real training example; the entry id is the example id.
    Example,
    /// A synthetic cluster centroid that matches no observed datapoint.
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
    pub source: EntrySource,
}

impl From<LabeledExample> for SupportEntry {
    fn from(ex: LabeledExample) -> Self {
        Self {
            id: ex.id,
            features: ex.features,
            label: ex.label,
            source: EntrySource::Example,
        }
    }
}

/// The labeled entries a prediction is computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    entries: Vec<SupportEntry>,
    class_index: BTreeMap<usize, Vec<usize>>,
    dim: usize,
    class_count: usize,
}

impl SupportSet {
    pub fn new(entries: Vec<SupportEntry>, class_count: usize) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptySupport)?;
        let dim = first.features.len();
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, e) in entries.iter().enumerate() {
            if e.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: e.features.len(),
                });
            }
            if e.label >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "support entry {:?} has label {} outside [0, {class_count})",
                    e.id, e.label
                )));
            }
            if e.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "support entry {:?} has non-finite features",
                    e.id
                )));
            }
            class_index.entry(e.label).or_default().push(pos);
        }
        Ok(Self {
            entries,
            class_index,
            dim,
            class_count,
        })
    }

    pub fn from_examples(examples: Vec<LabeledExample>, class_count: usize) -> Result<Self> {
        Self::new(examples.into_iter().map(Into::into).collect(), class_count)
    }

    pub fn entries(&self) -> &[SupportEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Entry positions for each class present in the set.
    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// A copy of this set with the entry at `index` dropped.
    pub fn without(&self, index: usize) -> Result<Self> {
        if index >= self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "index {index} outside support of size {}",
                self.entries.len()
            )));
        }
        let mut entries = self.entries.clone();
        entries.remove(index);
        Self::new(entries, self.class_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub query_id: String,
    pub probs: Vec<f64>,
    pub weights: WeightVector,
}

impl PredictionResult {
    /// Predicted class; ties go to the lowest class index.
    pub fn predicted_label(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted_label()]
    }
}

impl AsRef<[f64]> for PredictionResult {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn pairwise_distances(query: &[f64], support: &SupportSet) -> Result<Vec<f64>> {
    if query.len() != support.dim() {
        return Err(Error::DimensionMismatch {
            expected: support.dim(),
            found: query.len(),
        });
    }
    Ok(support
        .entries()
        .iter()
        .map(|e| euclidean(query, &e.features))
        .collect())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature))
    }
}

/// Softmax of `-distance / temperature`, shifted by the maximum logit.
pub fn nw_weights(distances: &[f64], temperature: f64) -> Result<WeightVector> {
    check_temperature(temperature)?;
    if distances.is_empty() {
        return Err(Error::EmptySupport);
    }
    if let Some(bad) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distances must be finite and non-negative, got {bad}"
        )));
    }
    let max_logit = distances
        .iter()
        .map(|d| -d / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = distances
        .iter()
        .map(|d| (-d / temperature - max_logit).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(WeightVector {
        weights,
        temperature,
    })
}

/// Accumulates weights into class probabilities in support order.
pub fn label_mixture(weights: &[f64], support: &SupportSet) -> Vec<f64> {
    let mut probs = vec![0.0; support.class_count()];
    for (w, e) in weights.iter().zip(support.entries()) {
        probs[e.label] += w;
    }
    probs
}

/// Prediction from precomputed distances; the distances must be aligned with `support`.
pub fn predict_from_distances(
    query_id: &str,
    distances: &[f64],
    support: &SupportSet,
    temperature: f64,
) -> Result<PredictionResult> {
    if distances.len() != support.len() {
        return Err(Error::DimensionMismatch {
            expected: support.len(),
            found: distances.len(),
        });
    }
    let weights = nw_weights(distances, temperature)?;
    let probs = label_mixture(&weights.weights, support);
    Ok(PredictionResult {
        query_id: query_id.to_string(),
        probs,
        weights,
    })
}

pub fn nw_predict(
    query_id: &str,
    query: &[f64],
    support: &SupportSet,
    temperature: f64,
) -> Result<PredictionResult> {
    let distances = pairwise_distances(query, support)?;
    predict_from_distances(query_id, &distances, support, temperature)
}

/// Predicts every query independently; order of results follows `queries`.
pub fn nw_predict_batch(
    queries: &[LabeledExample],
    support: &SupportSet,
    temperature: f64,
) -> Result<Vec<PredictionResult>> {
    use rayon::prelude::*;
    queries
        .par_iter()
        .map(|q| nw_predict(&q.id, &q.features, support, temperature))
        .collect()
}

/// `-log probs[true_label]`, `+inf` when that probability is exactly zero.
pub fn cross_entropy(probs: &[f64], true_label: usize) -> Result<f64> {
    let p = *probs.get(true_label).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "label {true_label} outside [0, {})",
            probs.len()
        ))
    })?;
    if p == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-p.ln())
}

/// Fraction of the `top_n` nearest support entries sharing the query's label.
/// Ranking is by ascending distance (descending weight), ties by entry order.
pub fn top_label_match_rate(
    query: &LabeledExample,
    support: &SupportSet,
    top_n: usize,
) -> Result<f64> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    if top_n > support.len() {
        return Err(Error::InvalidArgument(format!(
            "top_n {top_n} exceeds support size {}",
            support.len()
        )));
    }
    let distances = pairwise_distances(&query.features, support)?;
    let order = rank_by_distance(&distances);
    let hits = order[..top_n]
        .iter()
        .filter(|&&i| support.entries()[i].label == query.label)
        .count();
    Ok(hits as f64 / top_n as f64)
}

/// Entry positions sorted by ascending distance, stable on ties.
pub fn rank_by_distance(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    order
}
