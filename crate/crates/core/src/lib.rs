//! Nadaraya-Watson prediction head.
//!
//! A query is classified by a softmax-weighted average of the one-hot labels
//! of a support set, with weights from negative Euclidean distances between
//! embeddings. Around that head this crate provides:
//!
//! - [`influence`]: closed-form leave-one-out predictions and support influence
//! - [`support`]: Full / Random / Cluster / Closest-Cluster support sets
//! - [`calibration`]: ECE, reliability bins, label smoothing, temperature scaling
//! - [`trainer`]: episodic training of a small MLP feature extractor
//! - [`data`] and [`checkpoint`]: datasets, generators and persistence
//! - [`report`]: JSON reports shared by the CLI and the inspector service

pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod head;
pub mod influence;
pub mod kmeans;
pub mod model;
pub mod report;
pub mod support;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{
    cross_entropy, nw_predict, nw_weights, pairwise_distances, top_label_match_rate, EntrySource,
    LabeledExample, OneHotLabel, PredictionResult, SupportEntry, SupportSet, WeightVector,
};
pub use influence::{loo_predict, rank_influence, support_influence, InfluenceRecord};
pub use support::{build_support, InferenceMode};
