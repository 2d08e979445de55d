//! Expected calibration error, label smoothing and temperature scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{argmax, cross_entropy, pairwise_distances, predict_from_distances, LabeledExample, OneHotLabel, SupportSet};

pub const DEFAULT_BIN_COUNT: usize = 15;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub bin_count: usize,
}

/// Bin `i` covers `(i/B, (i+1)/B]`; a confidence of exactly 0 goes to bin 0.
pub fn bin_index(confidence: f64, bin_count: usize) -> usize {
    let b = bin_count as f64;
    let mut idx = ((confidence * b).ceil() as isize - 1).clamp(0, bin_count as isize - 1) as usize;
    // Nudge against rounding in `confidence * b` so membership agrees with the
    // interval bounds `i / B` exactly.
    while idx > 0 && confidence <= idx as f64 / b {
        idx -= 1;
    }
    while idx + 1 < bin_count && confidence > (idx + 1) as f64 / b {
        idx += 1;
    }
    idx
}

/// Reliability bins and ECE over any collection of probability vectors.
pub fn expected_calibration_error<P: AsRef<[f64]>>(
    predictions: &[P],
    true_labels: &[usize],
    bin_count: usize,
) -> Result<ReliabilityReport> {
    if bin_count == 0 {
        return Err(Error::InvalidArgument("bin_count must be at least 1".into()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    if predictions.len() != true_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} labels",
            predictions.len(),
            true_labels.len()
        )));
    }
    let mut conf_sum = vec![0.0; bin_count];
    let mut correct = vec![0usize; bin_count];
    let mut counts = vec![0usize; bin_count];
    for (p, &y) in predictions.iter().zip(true_labels) {
        let probs = p.as_ref();
        let pred = argmax(probs);
        let conf = probs[pred];
        let b = bin_index(conf, bin_count);
        counts[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = predictions.len() as f64;
    let mut ece = 0.0;
    let bins = (0..bin_count)
        .map(|i| {
            let count = counts[i];
            let (mean_confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[i] / count as f64, correct[i] as f64 / count as f64)
            };
            ece += count as f64 / n * (accuracy - mean_confidence).abs();
            ReliabilityBin {
                lower: i as f64 / bin_count as f64,
                upper: (i + 1) as f64 / bin_count as f64,
                count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityReport {
        bins,
        ece,
        bin_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedLabel {
    pub class_count: usize,
    pub epsilon: f64,
    pub hot_index: usize,
}

impl SmoothedLabel {
    pub fn to_vec(&self) -> Vec<f64> {
        let floor = self.epsilon / self.class_count as f64;
        let mut v = vec![floor; self.class_count];
        v[self.hot_index] = 1.0 - self.epsilon + floor;
        v
    }
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "label smoothing epsilon must lie in [0, 1), got {epsilon}"
        )))
    }
}

pub fn smooth_labels(labels: &[OneHotLabel], epsilon: f64) -> Result<Vec<SmoothedLabel>> {
    check_epsilon(epsilon)?;
    Ok(labels
        .iter()
        .map(|l| SmoothedLabel {
            class_count: l.class_count,
            epsilon,
            hot_index: l.hot_index,
        })
        .collect())
}

/// `sum_c target[c] * -log(probs[c])`, skipping classes with zero target mass.
pub fn soft_cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    probs
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| if p == 0.0 { f64::INFINITY } else { -t * p.ln() })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Default for TemperatureGrid {
    fn default() -> Self {
        Self {
            lo: 0.5,
            hi: 3.0,
            steps: 100,
        }
    }
}

impl TemperatureGrid {
    /// `steps` values linearly spaced on `[lo, hi]`, endpoints included.
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::InvalidGrid("steps must be at least 1".into()));
        }
        if !(self.lo > 0.0 && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "bounds must be positive and finite, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.steps == 1 {
            if self.lo != self.hi {
                return Err(Error::InvalidGrid("a single-step grid needs lo == hi".into()));
            }
            return Ok(vec![self.lo]);
        }
        if self.lo >= self.hi {
            return Err(Error::InvalidGrid(format!(
                "lo {} must be below hi {}",
                self.lo, self.hi
            )));
        }
        let span = self.hi - self.lo;
        let last = (self.steps - 1) as f64;
        Ok((0..self.steps)
            .map(|i| self.lo + span * i as f64 / last)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScan {
    pub best_tau: f64,
    pub best_nll: f64,
    pub taus: Vec<f64>,
    pub nll: Vec<f64>,
}

/// Mean NLL of `queries` against `support` at each temperature, using one
/// distance matrix for the whole sweep.
pub fn nll_sweep(queries: &[LabeledExample], support: &SupportSet, taus: &[f64]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("no validation queries".into()));
    }
    let distances = queries
        .iter()
        .map(|q| pairwise_distances(&q.features, support))
        .collect::<Result<Vec<_>>>()?;
    taus.iter()
        .map(|&tau| {
            let mut total = 0.0;
            for (q, d) in queries.iter().zip(&distances) {
                let pred = predict_from_distances(&q.id, d, support, tau)?;
                total += cross_entropy(&pred.probs, q.label)?;
            }
            Ok(total / queries.len() as f64)
        })
        .collect()
}

/// Picks the grid temperature minimizing mean validation NLL; ties go to the
/// smaller temperature.
pub fn temperature_scale(
    val_queries: &[LabeledExample],
    support: &SupportSet,
    grid: &TemperatureGrid,
) -> Result<TemperatureScan> {
    let taus = grid.values()?;
    let nll = nll_sweep(val_queries, support, &taus)?;
    let mut best = 0;
    for i in 1..taus.len() {
        if nll[i] < nll[best] {
            best = i;
        }
    }
    Ok(TemperatureScan {
        best_tau: taus[best],
        best_nll: nll[best],
        taus,
        nll,
    })
}
