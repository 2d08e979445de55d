//! JSON report types shared by the command line and the inspector service, and
//! the library calls that build them. Both surfaces go through these builders
//! so their numbers agree byte for byte.

use serde::{Deserialize, Serialize};

use crate::calibration::{expected_calibration_error, nll_sweep, temperature_scale, ReliabilityReport, TemperatureGrid};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::head::{argmax, cross_entropy, nw_predict, nw_predict_batch, pairwise_distances, rank_by_distance, LabeledExample, SupportSet};
use crate::influence::{rank_influence_for, InfluenceRecord};
use crate::model::embed_examples;
use crate::support::{build_support, InferenceMode};
use crate::trainer::TrainedModel;

/// Serializes `+inf` as the string `"inf"` (and `-inf`/NaN likewise); finite
/// values stay JSON numbers.
pub mod extended_real {
    use serde::de::{self, Deserializer};
    use serde::{Deserialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("invalid extended real {other:?}"))),
            },
        }
    }
}

/// A dataset alongside the embeddings of all its examples under a model.
#[derive(Debug, Clone)]
pub struct EmbeddedDataset {
    pub raw: Dataset,
    /// Aligned with `raw.examples`.
    pub embedded: Vec<LabeledExample>,
}

impl EmbeddedDataset {
    pub fn new(model: &TrainedModel, raw: Dataset) -> Result<Self> {
        if raw.dim != model.extractor.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.extractor.input_dim(),
                found: raw.dim,
            });
        }
        let embedded = embed_examples(&model.extractor, &raw.examples)?;
        Ok(Self { raw, embedded })
    }

    pub fn class_count(&self) -> usize {
        self.raw.class_count
    }

    /// Embedded examples of `split`, in dataset order.
    pub fn split(&self, split: Split) -> Vec<LabeledExample> {
        self.embedded
            .iter()
            .enumerate()
            .filter(|(i, _)| self.raw.split_of(*i) == split)
            .map(|(_, e)| e.clone())
            .collect()
    }

    pub fn require(&self, split: Split) -> Result<Vec<LabeledExample>> {
        let s = self.split(split);
        if s.is_empty() {
            Err(Error::MissingSplit(split.to_string()))
        } else {
            Ok(s)
        }
    }

    pub fn find(&self, id: &str) -> Result<(Split, &LabeledExample)> {
        self.raw
            .find(id)
            .map(|(i, _)| (self.raw.split_of(i), &self.embedded[i]))
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn support(&self, mode: &InferenceMode) -> Result<SupportSet> {
        build_support(&self.require(Split::Train)?, self.class_count(), mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: String,
    pub mode: String,
    pub k: Option<usize>,
    pub tau: f64,
    pub split: Split,
    pub n_queries: usize,
    pub support_size: usize,
    pub error_rate: f64,
    pub ece: f64,
    #[serde(with = "extended_real")]
    pub nll: f64,
    /// Mean fraction of the 10 nearest support entries sharing the query label.
    pub top_label_match_at_10: Option<f64>,
    pub reliability: ReliabilityReport,
}

fn summarize(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<(f64, f64, ReliabilityReport)> {
    let reliability = expected_calibration_error(probs, labels, bins)?;
    let wrong = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) != y).count();
    let nll = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| cross_entropy(p, y))
        .sum::<Result<f64>>()?
        / labels.len() as f64;
    Ok((wrong as f64 / labels.len() as f64, nll, reliability))
}

/// NW evaluation of `queries` against a prepared support set.
pub fn evaluate_nw(
    queries: &[LabeledExample],
    support: &SupportSet,
    mode: &InferenceMode,
    tau: f64,
    bins: usize,
    split: Split,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate".into()));
    }
    let preds = nw_predict_batch(queries, support, tau)?;
    let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs).collect();
    let labels: Vec<usize> = queries.iter().map(|q| q.label).collect();
    let (error_rate, nll, reliability) = summarize(&probs, &labels, bins)?;
    let top_n = 10.min(support.len());
    let mut matched = 0.0;
    for q in queries {
        matched += crate::head::top_label_match_rate(q, support, top_n)?;
    }
    Ok(EvalReport {
        head: "nw".into(),
        mode: mode.name().into(),
        k: mode.k(),
        tau,
        split,
        n_queries: queries.len(),
        support_size: support.len(),
        error_rate,
        ece: reliability.ece,
        nll,
        top_label_match_at_10: Some(matched / queries.len() as f64),
        reliability,
    })
}

/// Evaluates `split`: NW predictions against a support built by `mode`, or
/// the linear classifier when the model has one.
pub fn evaluate(
    model: &TrainedModel,
    data: &EmbeddedDataset,
    split: Split,
    mode: &InferenceMode,
    tau: f64,
    bins: usize,
) -> Result<EvalReport> {
    if model.classifier.is_some() {
        let raw = data.raw.require(split)?;
        let probs: Vec<Vec<f64>> = raw
            .iter()
            .map(|q| Ok(model.fc_predict(&q.features)?.expect("classifier")))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = raw.iter().map(|q| q.label).collect();
        let (error_rate, nll, reliability) = summarize(&probs, &labels, bins)?;
        return Ok(EvalReport {
            head: "fc".into(),
            mode: "fc".into(),
            k: None,
            tau,
            split,
            n_queries: raw.len(),
            support_size: 0,
            error_rate,
            ece: reliability.ece,
            nll,
            top_label_match_at_10: None,
            reliability,
        });
    }
    let queries = data.require(split)?;
    let support = data.support(mode)?;
    evaluate_nw(&queries, &support, mode, tau, bins, split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Full-mode result, constant across k.
    pub reference: EvalReport,
    pub rows: Vec<EvalReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_k(
    model: &TrainedModel,
    data: &EmbeddedDataset,
    split: Split,
    modes: &[&str],
    ks: &[usize],
    seed: u64,
    tau: f64,
    bins: usize,
) -> Result<SweepReport> {
    let reference = evaluate(model, data, split, &InferenceMode::Full, tau, bins)?;
    let mut rows = Vec::new();
    for name in modes {
        for &k in ks {
            let mode = InferenceMode::parse(name, k, seed)?;
            rows.push(evaluate(model, data, split, &mode, tau, bins)?);
        }
    }
    Ok(SweepReport { reference, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub query_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub probs: Vec<f64>,
    pub tau: f64,
    pub support_size: usize,
    pub top: usize,
    /// Same-class entries, most helpful (largest influence) first.
    pub helpful: Vec<InfluenceRecord>,
    /// Different-class entries, most harmful (most negative) first.
    pub harmful: Vec<InfluenceRecord>,
    pub warnings: Vec<String>,
}

pub fn influence_report(query: &LabeledExample, support: &SupportSet, tau: f64, top: usize) -> Result<InfluenceReport> {
    let mut warnings = Vec::new();
    let mut top_eff = top;
    if top > support.len() {
        warnings.push(format!("top {top} exceeds support size {}; clamped", support.len()));
        top_eff = support.len();
    }
    let pred = nw_predict(&query.id, &query.features, support, tau)?;
    let ranked = rank_influence_for(&pred, support, query.label)?;
    let helpful: Vec<InfluenceRecord> = ranked.iter().filter(|r| r.same_class).take(top_eff).cloned().collect();
    let harmful: Vec<InfluenceRecord> = ranked
        .iter()
        .rev()
        .filter(|r| !r.same_class)
        .take(top_eff)
        .cloned()
        .collect();
    // `ranked` is descending with index tie-breaks; walking it backwards
    // reverses the tie order too, so restore support order among equal values.
    let mut harmful = harmful;
    harmful.sort_by(|a, b| a.influence.total_cmp(&b.influence).then(a.index.cmp(&b.index)));
    Ok(InfluenceReport {
        query_id: query.id.clone(),
        true_label: query.label,
        predicted_label: pred.predicted_label(),
        probs: pred.probs.clone(),
        tau,
        support_size: support.len(),
        top: top_eff,
        helpful,
        harmful,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEntry {
    pub id: String,
    pub index: usize,
    pub label: usize,
    pub weight: f64,
    pub distance: f64,
    pub same_class: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictView {
    pub query_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
    pub tau: f64,
    pub support_size: usize,
    /// Highest-weight support entries, nearest first.
    pub top_support: Vec<WeightedEntry>,
    pub warnings: Vec<String>,
}

pub fn predict_view(query: &LabeledExample, support: &SupportSet, tau: f64, top: usize) -> Result<PredictView> {
    let mut warnings = Vec::new();
    let top_eff = if top > support.len() {
        warnings.push(format!("top {top} exceeds support size {}; clamped", support.len()));
        support.len()
    } else {
        top
    };
    let distances = pairwise_distances(&query.features, support)?;
    let pred = crate::head::predict_from_distances(&query.id, &distances, support, tau)?;
    let top_support = rank_by_distance(&distances)
        .into_iter()
        .take(top_eff)
        .map(|i| {
            let e = &support.entries()[i];
            WeightedEntry {
                id: e.id.clone(),
                index: i,
                label: e.label,
                weight: pred.weights.weights[i],
                distance: distances[i],
                same_class: e.label == query.label,
            }
        })
        .collect();
    Ok(PredictView {
        query_id: query.id.clone(),
        true_label: query.label,
        predicted_label: pred.predicted_label(),
        confidence: pred.confidence(),
        probs: pred.probs,
        tau,
        support_size: support.len(),
        top_support,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub grid: TemperatureGrid,
    pub taus: Vec<f64>,
    #[serde(with = "extended_real_vec")]
    pub val_nll: Vec<f64>,
    pub tau_star: f64,
    #[serde(with = "extended_real")]
    pub val_nll_at_tau_star: f64,
    #[serde(with = "extended_real")]
    pub val_nll_at_one: f64,
    pub test_before: EvalReport,
    pub test_after: EvalReport,
    /// Test queries whose predicted class differs between tau = 1 and tau*.
    pub argmax_changes: usize,
}

mod extended_real_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::extended_real")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| Wrap(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Wrap>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

/// Selects tau on the validation split, then re-evaluates the test split at
/// tau = 1 and at the selected tau.
pub fn calibrate(
    data: &EmbeddedDataset,
    mode: &InferenceMode,
    grid: &TemperatureGrid,
    bins: usize,
) -> Result<CalibrationReport> {
    let val = data.require(Split::Val)?;
    let test = data.require(Split::Test)?;
    let support = data.support(mode)?;
    let scan = temperature_scale(&val, &support, grid)?;
    let val_nll_at_one = nll_sweep(&val, &support, &[1.0])?[0];
    let test_before = evaluate_nw(&test, &support, mode, 1.0, bins, Split::Test)?;
    let test_after = evaluate_nw(&test, &support, mode, scan.best_tau, bins, Split::Test)?;
    let before = nw_predict_batch(&test, &support, 1.0)?;
    let after = nw_predict_batch(&test, &support, scan.best_tau)?;
    let argmax_changes = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a.predicted_label() != b.predicted_label())
        .count();
    Ok(CalibrationReport {
        grid: *grid,
        taus: scan.taus,
        val_nll: scan.nll,
        tau_star: scan.best_tau,
        val_nll_at_tau_star: scan.best_nll,
        val_nll_at_one,
        test_before,
        test_after,
        argmax_changes,
    })
}
