//! Signal representations: the magnitude spectrogram and the feature-encoder
//! and output-layer representations of pretrained self-supervised models.

mod backend;
pub mod checkpoint;
pub mod diff;
mod encoder;
pub mod matrix_io;
mod stft;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use backend::{extract_fe, extract_ol, load_backend, load_backend_shared, BackendMetadata, BackendOptions, SsrBackend};
pub use stft::{istft_overlap_add, stft, Spectrogram, StftParams, WindowKind};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Hubert,
    Xlsr,
}

impl ModelId {
    pub const ALL: [ModelId; 2] = [ModelId::Hubert, ModelId::Xlsr];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Hubert => "hubert",
            ModelId::Xlsr => "xlsr",
        }
    }

    pub fn fe_dim(&self) -> usize {
        512
    }

    pub fn ol_dim(&self) -> usize {
        match self {
            ModelId::Hubert => 768,
            ModelId::Xlsr => 1024,
        }
    }

    /// HuBERT base checkpoints consume raw waveforms; XLS-R expects
    /// zero-mean, unit-variance input.
    pub fn normalizes_input(&self) -> bool {
        matches!(self, ModelId::Xlsr)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hubert" => Ok(ModelId::Hubert),
            "xlsr" => Ok(ModelId::Xlsr),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Fe,
    Ol,
}

impl Layer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Layer::Fe => "fe",
            Layer::Ol => "ol",
        }
    }
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fe" => Ok(Layer::Fe),
            "ol" => Ok(Layer::Ol),
            other => Err(Error::Config(format!("unknown layer '{other}'"))),
        }
    }
}

/// A `T x F` representation tagged with its source model and layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SSSRRepresentation {
    pub values: Array2<f64>,
    pub model_id: ModelId,
    pub layer: Layer,
}

impl SSSRRepresentation {
    pub fn new(values: Array2<f64>, model_id: ModelId, layer: Layer) -> Result<Self> {
        let expected = match layer {
            Layer::Fe => model_id.fe_dim(),
            Layer::Ol => model_id.ol_dim(),
        };
        if values.ncols() != expected {
            return Err(Error::ShapeMismatch(values.shape().to_vec(), vec![values.nrows(), expected]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} {} representation", model_id, layer.as_str())));
        }
        Ok(Self { values, model_id, layer })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}
