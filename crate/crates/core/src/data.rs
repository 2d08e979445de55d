//! Datasets: CSV persistence, synthetic generators and stratified splits.
//!
//! Dataset CSV header: `id,label[,split],f0,...,f{n-1}`. Support-set CSV
//! header: `id,label,source,f0,...` where `source` is the originating example
//! id or `centroid`. Floats are written in their shortest round-trip form.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{EntrySource, LabeledExample, SupportEntry, SupportSet};
use crate::support::CENTROID_MARKER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    /// Split tag per example; `None` when the dataset is unsplit.
    pub splits: Option<Vec<Split>>,
    pub dim: usize,
    pub class_count: usize,
}

impl Dataset {
    /// Checks the invariants: unique ids, consistent dimension, finite
    /// features and labels forming exactly `0..C`.
    pub fn new(examples: Vec<LabeledExample>, splits: Option<Vec<Split>>) -> Result<Self> {
        let dim = examples
            .first()
            .ok_or_else(|| Error::EmptyInput("dataset has no examples".into()))?
            .features
            .len();
        if let Some(s) = &splits {
            if s.len() != examples.len() {
                return Err(Error::InvalidArgument("split tags misaligned with examples".into()));
            }
        }
        let mut ids = HashSet::new();
        for (i, ex) in examples.iter().enumerate() {
            let line = i as u64 + 2;
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate id {:?}", ex.id),
                });
            }
            if ex.features.len() != dim {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {dim} features, found {}", ex.features.len()),
                });
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite feature in {:?}", ex.id),
                });
            }
        }
        let class_count = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
        let mut seen = vec![false; class_count];
        for ex in &examples {
            seen[ex.label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let (row, top) = examples
                .iter()
                .enumerate()
                .find(|(_, e)| e.label == class_count - 1)
                .expect("max label present");
            return Err(Error::Parse {
                line: row as u64 + 2,
                message: format!(
                    "labels are not contiguous: class {missing} never appears but label {} does",
                    top.label
                ),
            });
        }
        Ok(Self {
            examples,
            splits,
            dim,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples tagged `split`, in dataset order. An unsplit dataset is all train.
    pub fn subset(&self, split: Split) -> Vec<LabeledExample> {
        match &self.splits {
            None if split == Split::Train => self.examples.clone(),
            None => Vec::new(),
            Some(tags) => self
                .examples
                .iter()
                .zip(tags)
                .filter(|(_, t)| **t == split)
                .map(|(e, _)| e.clone())
                .collect(),
        }
    }

    /// Like [`Dataset::subset`] but fails on an empty split.
    pub fn require(&self, split: Split) -> Result<Vec<LabeledExample>> {
        let s = self.subset(split);
        if s.is_empty() {
            Err(Error::MissingSplit(split.to_string()))
        } else {
            Ok(s)
        }
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        Split::ALL.iter().map(|&s| (s, self.subset(s).len())).collect()
    }

    pub fn find(&self, id: &str) -> Option<(usize, &LabeledExample)> {
        self.examples.iter().enumerate().find(|(_, e)| e.id == id)
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits.as_ref().map(|s| s[index]).unwrap_or(Split::Train)
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io.to_string()),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            line,
            message: format!("ragged row: expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_field<T: FromStr>(value: &str, what: &str, line: u64) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} {value:?}"),
    })
}

/// Column layout recognised in a header.
struct Header {
    leading: Vec<&'static str>,
    features: usize,
}

fn parse_header(record: &csv::StringRecord, options: &[&[&'static str]]) -> Result<Header> {
    let fields: Vec<&str> = record.iter().map(str::trim).collect();
    for leading in options {
        if fields.len() >= leading.len() && fields[..leading.len()] == **leading {
            let rest = &fields[leading.len()..];
            for (i, f) in rest.iter().enumerate() {
                if *f != format!("f{i}") {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("expected feature column f{i}, found {f:?}"),
                    });
                }
            }
            if rest.is_empty() {
                return Err(Error::Parse {
                    line: 1,
                    message: "header declares no feature columns".into(),
                });
            }
            return Ok(Header {
                leading: leading.to_vec(),
                features: rest.len(),
            });
        }
    }
    Err(Error::Parse {
        line: 1,
        message: format!("malformed header {:?}", fields.join(",")),
    })
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(input)
}

pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut rdr = reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => parse_header(&r.map_err(csv_error)?, &[&["id", "label", "split"], &["id", "label"]])?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    let with_split = header.leading.len() == 3;
    let mut examples = Vec::new();
    let mut splits = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse { line, message: "empty id".into() });
        }
        let label: usize = parse_field(&rec[1], "label", line)?;
        if with_split {
            splits.push(parse_field::<Split>(&rec[2], "split", line)?);
        }
        let features = rec
            .iter()
            .skip(header.leading.len())
            .map(|v| parse_field::<f64>(v, "feature", line))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(features.len(), header.features);
        examples.push(LabeledExample { id, features, label });
    }
    Dataset::new(examples, with_split.then_some(splits))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(std::io::BufReader::new(file))
}

fn feature_header(dim: usize) -> impl Iterator<Item = String> {
    (0..dim).map(|i| format!("f{i}"))
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    if dataset.splits.is_some() {
        header.push("split".into());
    }
    header.extend(feature_header(dataset.dim));
    w.write_record(&header).map_err(csv_error)?;
    for (i, ex) in dataset.examples.iter().enumerate() {
        let mut row = vec![ex.id.clone(), ex.label.to_string()];
        if let Some(s) = &dataset.splits {
            row.push(s[i].to_string());
        }
        row.extend(ex.features.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

pub fn write_support_csv<W: Write>(support: &SupportSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string(), "source".to_string()];
    header.extend(feature_header(support.dim()));
    w.write_record(&header).map_err(csv_error)?;
    for e in support.entries() {
        let source = match e.source {
            EntrySource::Example => e.id.clone(),
            EntrySource::Centroid => CENTROID_MARKER.to_string(),
        };
        let mut row = vec![e.id.clone(), e.label.to_string(), source];
        row.extend(e.features.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_support_csv<R: Read>(input: R, class_count: usize) -> Result<SupportSet> {
    let mut rdr = reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => parse_header(&r.map_err(csv_error)?, &[&["id", "label", "source"]])?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[0].trim().to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::Parse { line, message: format!("duplicate id {id:?}") });
        }
        let label = parse_field(&rec[1], "label", line)?;
        let source = match rec[2].trim() {
            CENTROID_MARKER => EntrySource::Centroid,
            s if s == id => EntrySource::Example,
            s => {
                return Err(Error::Parse {
                    line,
                    message: format!("source {s:?} is neither {CENTROID_MARKER:?} nor the entry id"),
                })
            }
        };
        let features = rec
            .iter()
            .skip(3)
            .map(|v| parse_field::<f64>(v, "feature", line))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(features.len(), header.features);
        entries.push(SupportEntry { id, features, label, source });
    }
    SupportSet::new(entries, class_count)
}

/// Isotropic Gaussian blobs, one per class, centers at least `separation`
/// apart. Examples are ordered class by class.
pub fn generate_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Generation("class count, per-class count and dim must be at least 1".into()));
    }
    if !(separation >= 0.0 && noise_sd >= 0.0) {
        return Err(Error::Generation("separation and noise must be non-negative".into()));
    }
    const MAX_TRIES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A box wide enough that random placement rarely collides.
    let half_width = separation.max(1.0) * class_count as f64;
    if !half_width.is_finite() {
        return Err(Error::Generation(format!("separation {separation} is too large")));
    }
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    for c in 0..class_count {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect();
            if centers.iter().all(|o| crate::head::euclidean(o, &cand) >= separation) {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {c} at separation {separation} after {MAX_TRIES} tries"
            )));
        }
    }
    let mut examples = Vec::with_capacity(class_count * per_class);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let features = center
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + noise_sd * z
                })
                .collect();
            examples.push(LabeledExample::new(format!("c{c}-{i:05}"), features, c));
        }
    }
    Dataset::new(examples, None)
}

/// Class centers of a blob dataset, recovered from the generator seed.
pub fn blob_centers(class_count: usize, dim: usize, separation: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let ds = generate_blobs(class_count, 1, dim, separation, 0.0, seed)?;
    Ok(ds.examples.into_iter().map(|e| e.features).collect())
}

/// Two concentric noisy rings in the plane: class 0 at `inner` radius,
/// class 1 at `outer`.
pub fn generate_rings(per_class: usize, inner: f64, outer: f64, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Generation("per-class count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Generation(e.to_string()))?;
    let mut examples = Vec::with_capacity(2 * per_class);
    for (c, radius) in [inner, outer].into_iter().enumerate() {
        for i in 0..per_class {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let r = radius + noise.sample(&mut rng);
            examples.push(LabeledExample::new(
                format!("r{c}-{i:05}"),
                vec![r * theta.cos(), r * theta.sin()],
                c,
            ));
        }
    }
    Dataset::new(examples, None)
}

/// Stratified train/val/test assignment. Within each class the examples are
/// shuffled with a per-class stream of `seed`, then cut at the rounded
/// cumulative fractions.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut tags = vec![Split::Train; dataset.len()];
    for class in 0..dataset.class_count {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.examples[i].label == class)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let cut1 = (n * fractions[0]).round() as usize;
        let cut2 = ((n * (fractions[0] + fractions[1])).round() as usize).max(cut1);
        let bounds = [(0, cut1), (cut1, cut2), (cut2, members.len())];
        for (split, &(lo, hi)) in Split::ALL.iter().zip(&bounds) {
            let f = fractions[*split as usize];
            if f > 0.0 && hi <= lo {
                return Err(Error::Stratification(format!(
                    "class {class} with {} examples gets none in {split}",
                    members.len()
                )));
            }
            for &i in &members[lo..hi] {
                tags[i] = *split;
            }
        }
    }
    Ok(Dataset {
        splits: Some(tags),
        ..dataset.clone()
    })
}
