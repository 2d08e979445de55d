//! Model checkpoints: a JSON manifest whose `params` field is the base64 of
//! every parameter as a little-endian f64, layer by layer, weights row-major
//! then bias, classifier last.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenseLayer, ExtractorModel};
use crate::trainer::{Head, TrainConfig, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub head: Head,
    /// `[input, hidden..., embedding]`.
    pub dims: Vec<usize>,
    pub class_count: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub params: String,
}

pub fn encode_params(params: &[f64]) -> String {
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_params(blob: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(blob)
        .map_err(|e| Error::Checkpoint(format!("bad parameter blob: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "parameter blob of {} bytes is not a whole number of f64s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn from_model(model: &TrainedModel, class_count: usize, config: &TrainConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            head: model.head(),
            dims: model.extractor.dims(),
            class_count,
            seed: config.seed,
            config: config.clone(),
            params: encode_params(&model.params()),
        }
    }

    pub fn to_model(&self) -> Result<TrainedModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Checkpoint(format!("invalid dims {:?}", self.dims)));
        }
        let mut shapes: Vec<(usize, usize)> = self.dims.windows(2).map(|w| (w[0], w[1])).collect();
        if self.head == Head::Fc {
            shapes.push((*self.dims.last().expect("dims"), self.class_count));
        }
        let params = decode_params(&self.params)?;
        let expected: usize = shapes.iter().map(|(i, o)| i * o + o).sum();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters for dims {:?}, found {}",
                self.dims,
                params.len()
            )));
        }
        let mut rest = params.as_slice();
        let mut layers: Vec<DenseLayer> = shapes
            .into_iter()
            .map(|(input, output)| {
                let (w, r) = rest.split_at(input * output);
                let (b, r) = r.split_at(output);
                rest = r;
                DenseLayer {
                    input,
                    output,
                    weights: w.to_vec(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        let classifier = (self.head == Head::Fc).then(|| layers.pop().expect("classifier layer"));
        Ok(TrainedModel {
            extractor: ExtractorModel::from_layers(layers)?,
            classifier,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()? + "\n")
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}
