//! Checkpoint discovery and weight loading for wav2vec2-family encoders.
//!
//! A checkpoint is a directory holding a Hugging Face style `config.json`
//! next to `model.safetensors` or `pytorch_model.bin`. Tensor names follow the
//! Hugging Face `HubertModel` / `Wav2Vec2Model` layout, optionally under a
//! `hubert.` or `wav2vec2.` prefix.
//!
//! `synthetic[:seed[:layers]]` references build a seeded random checkpoint
//! with the real feature-encoder geometry and output widths but a shallow
//! transformer. They exist so the full pipeline can be exercised without
//! multi-gigabyte downloads; their representations carry no pretrained
//! knowledge.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelId;
use crate::{Error, Result};

/// Environment variable overriding the checkpoint cache directory.
pub const CHECKPOINT_DIR_ENV: &str = "SSSR_CHECKPOINT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatNorm {
    Group,
    Layer,
}

/// Architecture hyper-parameters, read from `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub conv_dim: Vec<usize>,
    pub conv_kernel: Vec<usize>,
    pub conv_stride: Vec<usize>,
    pub conv_bias: bool,
    pub feat_extract_norm: FeatNorm,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub num_conv_pos_embeddings: usize,
    pub num_conv_pos_embedding_groups: usize,
    pub do_stable_layer_norm: bool,
    pub layer_norm_eps: f64,
    pub feat_proj_layer_norm: bool,
}

impl ArchConfig {
    pub fn default_for(model: ModelId) -> Self {
        let base = Self {
            conv_dim: vec![512; 7],
            conv_kernel: vec![10, 3, 3, 3, 3, 2, 2],
            conv_stride: vec![5, 2, 2, 2, 2, 2, 2],
            conv_bias: false,
            feat_extract_norm: FeatNorm::Group,
            hidden_size: 768,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            intermediate_size: 3072,
            num_conv_pos_embeddings: 128,
            num_conv_pos_embedding_groups: 16,
            do_stable_layer_norm: false,
            layer_norm_eps: 1e-5,
            feat_proj_layer_norm: true,
        };
        match model {
            ModelId::Hubert => base,
            ModelId::Xlsr => Self {
                conv_bias: true,
                feat_extract_norm: FeatNorm::Layer,
                hidden_size: 1024,
                num_hidden_layers: 24,
                num_attention_heads: 16,
                intermediate_size: 4096,
                do_stable_layer_norm: true,
                ..base
            },
        }
    }

    /// Overlays the keys present in a `config.json` onto the model defaults.
    pub fn from_json(model: ModelId, text: &str) -> Result<Self> {
        let file: serde_json::Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(Self::default_for(model))?;
        if let (Some(dst), Some(src)) = (merged.as_object_mut(), file.as_object()) {
            for (k, v) in src {
                if dst.contains_key(k) && !v.is_null() {
                    dst.insert(k.clone(), v.clone());
                }
            }
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conv_dim.len();
        if n == 0 || self.conv_kernel.len() != n || self.conv_stride.len() != n {
            return Err(Error::Checkpoint("conv_dim/conv_kernel/conv_stride lengths differ".into()));
        }
        if self.num_attention_heads == 0 || self.hidden_size % self.num_attention_heads != 0 {
            return Err(Error::Checkpoint("hidden_size must be divisible by num_attention_heads".into()));
        }
        if self.hidden_size % self.num_conv_pos_embedding_groups != 0 {
            return Err(Error::Checkpoint("hidden_size must be divisible by the positional conv groups".into()));
        }
        Ok(())
    }

    /// Shortest input producing one encoder frame.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for (k, s) in self.conv_kernel.iter().zip(&self.conv_stride) {
            field += (k - 1) * jump;
            jump *= s;
        }
        field
    }

    /// Encoder frames for an input of `len` samples (0 if too short).
    pub fn frames_for(&self, len: usize) -> usize {
        let mut l = len;
        for (k, s) in self.conv_kernel.iter().zip(&self.conv_stride) {
            if l < *k {
                return 0;
            }
            l = (l - k) / s + 1;
        }
        l
    }
}

/// Parsed form of a checkpoint reference string.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointSource {
    Directory(PathBuf),
    Synthetic { seed: u64, layers: usize },
}

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CHECKPOINT_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("sssr").join("checkpoints")
}

/// Resolves `default`, `synthetic[:seed[:layers]]`, or a filesystem path.
pub fn resolve_reference(model: ModelId, reference: &str, cache_dir: &Path) -> Result<CheckpointSource> {
    if let Some(rest) = reference.strip_prefix("synthetic") {
        let mut parts = rest.split(':').filter(|s| !s.is_empty());
        let parse = |s: Option<&str>, default: u64| -> Result<u64> {
            s.map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad synthetic reference '{reference}'"))))
                .unwrap_or(Ok(default))
        };
        let seed = parse(parts.next(), 0)?;
        let layers = parse(parts.next(), 2)? as usize;
        return Ok(CheckpointSource::Synthetic { seed, layers });
    }
    let dir = if reference.is_empty() || reference == "default" {
        cache_dir.join(model.as_str())
    } else {
        let p = PathBuf::from(reference);
        if p.is_file() {
            p.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            p
        }
    };
    if !dir.is_dir() {
        return Err(Error::Checkpoint(format!(
            "checkpoint for {} not found at {} (place config.json and model.safetensors there, or set {})",
            model.as_str(),
            dir.display(),
            CHECKPOINT_DIR_ENV
        )));
    }
    Ok(CheckpointSource::Directory(dir))
}

/// Named tensors of one checkpoint, looked up under an optional prefix.
#[derive(Debug)]
pub struct WeightStore {
    tensors: HashMap<String, Tensor>,
    prefix: String,
}

impl WeightStore {
    pub fn new(tensors: HashMap<String, Tensor>) -> Self {
        let prefix = ["", "hubert.", "wav2vec2."]
            .into_iter()
            .find(|p| tensors.contains_key(&format!("{p}feature_extractor.conv_layers.0.conv.weight")))
            .unwrap_or("")
            .to_string();
        Self { tensors, prefix }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(&format!("{}{name}", self.prefix))
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}{name}'", self.prefix)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(&format!("{}{name}", self.prefix))
    }
}

pub fn load_directory(model: ModelId, dir: &Path) -> Result<(ArchConfig, WeightStore)> {
    let config_path = dir.join("config.json");
    let arch = if config_path.is_file() {
        ArchConfig::from_json(model, &std::fs::read_to_string(&config_path)?)?
    } else {
        ArchConfig::default_for(model)
    };
    let safetensors = dir.join("model.safetensors");
    let pickle = dir.join("pytorch_model.bin");
    let corrupt = |e: candle_core::Error| Error::Checkpoint(format!("cannot read weights in {}: {e}", dir.display()));
    let tensors: HashMap<String, Tensor> = if safetensors.is_file() {
        candle_core::safetensors::load(&safetensors, &Device::Cpu).map_err(corrupt)?
    } else if pickle.is_file() {
        candle_core::pickle::read_all(&pickle).map_err(corrupt)?.into_iter().collect()
    } else {
        return Err(Error::Checkpoint(format!("no model.safetensors or pytorch_model.bin in {}", dir.display())));
    };
    Ok((arch, WeightStore::new(tensors)))
}

struct SynthBuilder {
    rng: ChaCha8Rng,
    tensors: HashMap<String, Tensor>,
}

impl SynthBuilder {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<()> {
        let dist = Normal::new(0.0f64, std).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.tensors.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?);
        Ok(())
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) -> Result<()> {
        self.tensors.insert(name, Tensor::full(value, shape, &Device::Cpu)?);
        Ok(())
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<()> {
        self.normal(format!("{name}.weight"), vec![out, inp], (1.0 / inp as f64).sqrt())?;
        self.constant(format!("{name}.bias"), vec![out], 0.0)
    }

    fn norm(&mut self, name: &str, n: usize) -> Result<()> {
        self.constant(format!("{name}.weight"), vec![n], 1.0)?;
        self.constant(format!("{name}.bias"), vec![n], 0.0)
    }
}

/// Seeded random weights with the layout [`load_directory`] expects.
pub fn synthetic_weights(model: ModelId, seed: u64, layers: usize) -> Result<(ArchConfig, WeightStore)> {
    let mut arch = ArchConfig::default_for(model);
    arch.num_hidden_layers = layers;
    arch.intermediate_size = arch.hidden_size;
    let mut b = SynthBuilder {
        rng: ChaCha8Rng::seed_from_u64(seed ^ (model as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        tensors: HashMap::new(),
    };

    let mut in_ch = 1;
    for (i, (&out, &k)) in arch.conv_dim.iter().zip(&arch.conv_kernel).enumerate() {
        let p = format!("feature_extractor.conv_layers.{i}");
        b.normal(format!("{p}.conv.weight"), vec![out, in_ch, k], (2.0 / (in_ch * k) as f64).sqrt())?;
        if arch.conv_bias {
            b.constant(format!("{p}.conv.bias"), vec![out], 0.0)?;
        }
        let has_norm = match arch.feat_extract_norm {
            FeatNorm::Group => i == 0,
            FeatNorm::Layer => true,
        };
        if has_norm {
            b.norm(&format!("{p}.layer_norm"), out)?;
        }
        in_ch = out;
    }
    let h = arch.hidden_size;
    b.norm("feature_projection.layer_norm", in_ch)?;
    b.linear("feature_projection.projection", h, in_ch)?;
    let groups = arch.num_conv_pos_embedding_groups;
    let k = arch.num_conv_pos_embeddings;
    b.normal("encoder.pos_conv_embed.conv.weight_v".into(), vec![h, h / groups, k], 1.0)?;
    b.constant("encoder.pos_conv_embed.conv.weight_g".into(), vec![1, 1, k], 0.5)?;
    b.constant("encoder.pos_conv_embed.conv.bias".into(), vec![h], 0.0)?;
    b.norm("encoder.layer_norm", h)?;
    for l in 0..layers {
        let p = format!("encoder.layers.{l}");
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            b.linear(&format!("{p}.attention.{proj}"), h, h)?;
        }
        b.norm(&format!("{p}.layer_norm"), h)?;
        b.linear(&format!("{p}.feed_forward.intermediate_dense"), arch.intermediate_size, h)?;
        b.linear(&format!("{p}.feed_forward.output_dense"), h, arch.intermediate_size)?;
        b.norm(&format!("{p}.final_layer_norm"), h)?;
    }
    Ok((arch, WeightStore::new(b.tensors)))
}
