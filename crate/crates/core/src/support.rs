//! Inference-time support sets: the full training set, a random k-per-class
//! subsample, per-class k-means centroids, or the real examples closest to
//! those centroids.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::head::{euclidean, EntrySource, LabeledExample, SupportEntry, SupportSet};
use crate::kmeans::{distinct_count, kmeans, KMeansConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InferenceMode {
    Full,
    Random { k: usize, seed: u64 },
    Cluster { k: usize, seed: u64 },
    ClosestCluster { k: usize, seed: u64 },
}

impl InferenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::Full => "full",
            InferenceMode::Random { .. } => "random",
            InferenceMode::Cluster { .. } => "cluster",
            InferenceMode::ClosestCluster { .. } => "cc",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match *self {
            InferenceMode::Full => None,
            InferenceMode::Random { k, .. }
            | InferenceMode::Cluster { k, .. }
            | InferenceMode::ClosestCluster { k, .. } => Some(k),
        }
    }

    /// Parses `full`, `random`, `cluster` or `cc`; `k` is ignored for `full`.
    pub fn parse(name: &str, k: usize, seed: u64) -> Result<Self> {
        match name {
            "full" => Ok(InferenceMode::Full),
            "random" => Ok(InferenceMode::Random { k, seed }),
            "cluster" => Ok(InferenceMode::Cluster { k, seed }),
            "cc" | "closest-cluster" | "closest_cluster" => {
                Ok(InferenceMode::ClosestCluster { k, seed })
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown inference mode {other:?}"
            ))),
        }
    }
}

/// The marker stored in the `source` column for synthetic centroid entries.
pub const CENTROID_MARKER: &str = "centroid";

/// Each class gets its own random stream so one class never perturbs another.
fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    rng
}

fn members_by_class(train: &[LabeledExample], class_count: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); class_count];
    for (i, ex) in train.iter().enumerate() {
        let slot = members.get_mut(ex.label).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "example {:?} has label {} outside [0, {class_count})",
                ex.id, ex.label
            ))
        })?;
        slot.push(i);
    }
    Ok(members)
}

fn require(class: usize, have: usize, need: usize) -> Result<()> {
    if have < need {
        Err(Error::InsufficientClass { class, have, need })
    } else {
        Ok(())
    }
}

/// Centroids of one class's features; fewer than `k` when the class has fewer
/// distinct points.
pub fn class_centroids(points: &[Vec<f64>], k: usize, seed: u64, class: usize) -> Result<Vec<Vec<f64>>> {
    let distinct = distinct_count(points);
    let k_eff = if distinct < k {
        warn!(class, distinct, k, "class has fewer distinct points than k; emitting one centroid per point");
        distinct
    } else {
        k
    };
    let result = kmeans(points, k_eff, &KMeansConfig::default(), &mut class_rng(seed, class))?;
    Ok(result.centroids)
}

pub fn build_support(
    train: &[LabeledExample],
    class_count: usize,
    mode: &InferenceMode,
) -> Result<SupportSet> {
    if train.is_empty() {
        return Err(Error::EmptySupport);
    }
    if matches!(mode, InferenceMode::Full) {
        return SupportSet::from_examples(train.to_vec(), class_count);
    }
    let k = mode.k().unwrap_or(0);
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let members = members_by_class(train, class_count)?;
    let mut entries = Vec::new();
    for (class, idx) in members.iter().enumerate() {
        match *mode {
            InferenceMode::Full => unreachable!(),
            InferenceMode::Random { seed, .. } => {
                require(class, idx.len(), k)?;
                let picks = index::sample(&mut class_rng(seed, class), idx.len(), k);
                entries.extend(picks.iter().map(|p| SupportEntry::from(train[idx[p]].clone())));
            }
            InferenceMode::Cluster { seed, .. } => {
                require(class, idx.len(), 1)?;
                let points: Vec<Vec<f64>> = idx.iter().map(|&i| train[i].features.clone()).collect();
                let centroids = class_centroids(&points, k, seed, class)?;
                entries.extend(centroids.into_iter().enumerate().map(|(j, features)| {
                    SupportEntry {
                        id: format!("{CENTROID_MARKER}-{class}-{j}"),
                        features,
                        label: class,
                        source: EntrySource::Centroid,
                    }
                }));
            }
            InferenceMode::ClosestCluster { seed, .. } => {
                require(class, idx.len(), k)?;
                let points: Vec<Vec<f64>> = idx.iter().map(|&i| train[i].features.clone()).collect();
                let centroids = class_centroids(&points, k, seed, class)?;
                let mut used = vec![false; idx.len()];
                for c in &centroids {
                    // Nearest unused member; ties resolve to dataset order.
                    let pick = (0..idx.len())
                        .filter(|&j| !used[j])
                        .min_by(|&a, &b| {
                            euclidean(&points[a], c)
                                .total_cmp(&euclidean(&points[b], c))
                                .then(a.cmp(&b))
                        })
                        .expect("at least k members");
                    used[pick] = true;
                    entries.push(SupportEntry::from(train[idx[pick]].clone()));
                }
            }
        }
    }
    SupportSet::new(entries, class_count)
}
