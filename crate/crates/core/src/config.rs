//! Run configuration: a TOML file with the sections `data`, `stft`,
//! `backends`, `distances`, `training`, `evaluation` and `output`. Unknown
//! keys are rejected, and every output records the hash of the resolved
//! configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::{CorpusLayout, ManifestOptions, Split, DEFAULT_VALID_SPEAKERS};
use crate::distances::{DistanceOptions, Reduction};
use crate::enhancement::{EnvelopeCorrelation, LossContext, Precision, StoiPlugin, TrainingConfig};
use crate::metrics::{ExternalEvaluator, MetricKind, MetricRegistry, DEFAULT_SI_SDR_CEILING};
use crate::representations::checkpoint::default_cache_dir;
use crate::representations::{load_backend_shared, BackendMetadata, BackendOptions, Layer, ModelId, SsrBackend, StftParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: CorpusLayout,
    pub split: Split,
    /// Prebuilt manifest CSVs; take precedence over `root`.
    pub manifest: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    /// Speakers held out of the training set for validation.
    pub valid_speakers: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: CorpusLayout::Voicebank,
            split: Split::Test,
            manifest: None,
            train_manifest: None,
            valid_manifest: None,
            valid_speakers: DEFAULT_VALID_SPEAKERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl DataConfig {
    pub fn manifest_options(&self) -> ManifestOptions {
        ManifestOptions { valid_speakers: self.valid_speakers.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub model: ModelId,
    /// `default` (cache directory), a checkpoint directory, or
    /// `synthetic[:seed[:layers]]`.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
}

fn default_checkpoint() -> String {
    "default".into()
}

/// An empty model list means spectrogram-only operation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub models: Vec<BackendSpec>,
    pub precision: Precision,
    /// Overrides the checkpoint cache directory.
    pub cache_dir: Option<PathBuf>,
}

impl BackendsConfig {
    pub fn options(&self) -> BackendOptions {
        BackendOptions { dtype: self.precision.dtype(), cache_dir: self.cache_dir.clone().unwrap_or_else(default_cache_dir) }
    }

    pub fn load(&self) -> Result<Vec<Arc<SsrBackend>>> {
        let opts = self.options();
        self.models.iter().map(|b| load_backend_shared(b.model, &b.checkpoint, &opts)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistancesConfig {
    pub reduction: Reduction,
    pub layers: Vec<Layer>,
}

impl Default for DistancesConfig {
    fn default() -> Self {
        Self { reduction: Reduction::Mean, layers: vec![Layer::Fe, Layer::Ol] }
    }
}

/// An external evaluator following the JSON-on-stdout protocol of
/// [`ExternalEvaluator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSpec {
    pub name: String,
    /// Program followed by its leading arguments.
    pub command: Vec<String>,
    pub metrics: Vec<MetricKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub evaluators: Vec<EvaluatorSpec>,
    pub si_sdr_ceiling: f64,
    /// Correlation targets: metric names or `mos`.
    pub targets: Vec<String>,
    /// Differentiable STOI plugin for the `stoi` loss; only
    /// `envelope-correlation` is built in.
    pub stoi_plugin: Option<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            evaluators: Vec::new(),
            si_sdr_ceiling: DEFAULT_SI_SDR_CEILING,
            targets: ["pesq", "stoi", "csig", "cbak", "covl", "si_sdr", "mos"].map(String::from).to_vec(),
            stoi_plugin: None,
        }
    }
}

impl EvaluationConfig {
    /// Registers every configured evaluator whose program launches; the
    /// others are skipped with a warning and their metrics become absent.
    pub fn registry(&self) -> MetricRegistry {
        let mut reg = MetricRegistry::new();
        for spec in &self.evaluators {
            let Some((program, args)) = spec.command.split_first() else {
                log::warn!("evaluator {} has an empty command; skipped", spec.name);
                continue;
            };
            let eval = ExternalEvaluator::new(spec.name.clone(), program, args.to_vec(), spec.metrics.clone());
            if eval.is_available() {
                reg.register(Arc::new(eval));
            } else {
                log::warn!("evaluator {} is not runnable; its metrics will be reported as absent", spec.name);
            }
        }
        reg
    }

    pub fn stoi_plugin(&self, stft: StftParams) -> Result<Option<Arc<dyn StoiPlugin>>> {
        match self.stoi_plugin.as_deref() {
            None => Ok(None),
            Some(EnvelopeCorrelation::NAME) => Ok(Some(Arc::new(EnvelopeCorrelation::new(stft)))),
            Some(other) => Err(Error::PluginMissing(format!("unknown STOI plugin '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub stft: StftParams,
    pub backends: BackendsConfig,
    pub distances: DistancesConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses TOML text, then applies `section.key=value` overrides. Values
    /// are read as TOML literals, falling back to plain strings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields at least one item");
            let mut node = &mut table;
            for p in parents {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
            }
            node.insert(last.to_string(), parse_override_value(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) if !p.is_file() => return Err(Error::MissingFile(p.to_path_buf())),
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.training.validate()?;
        if self.distances.layers.is_empty() && !self.backends.models.is_empty() {
            return Err(Error::Config("distances.layers is empty but backends are configured".into()));
        }
        let mut seen = Vec::new();
        for b in &self.backends.models {
            if seen.contains(&b.model) {
                return Err(Error::Config(format!("backend {} listed twice", b.model)));
            }
            seen.push(b.model);
        }
        if !(self.evaluation.si_sdr_ceiling > 0.0) {
            return Err(Error::Config("evaluation.si_sdr_ceiling must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn distance_options(&self, workers: Option<usize>) -> DistanceOptions {
        DistanceOptions { stft: self.stft, reduction: self.distances.reduction, workers }
    }

    pub fn loss_context(&self, backends: &[Arc<SsrBackend>]) -> Result<LossContext> {
        Ok(LossContext {
            stft: self.stft,
            backends: backends.iter().map(|b| (b.model_id(), b.clone())).collect(),
            stoi: self.evaluation.stoi_plugin(self.stft)?,
            si_sdr_ceiling: Some(self.evaluation.si_sdr_ceiling),
        })
    }
}

/// Sidecar written next to every command output. Carries no timestamps so
/// that repeated runs produce identical files.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub toolkit_version: &'static str,
    pub config_hash: String,
    pub config: RunConfig,
    pub backends: Vec<BackendMetadata>,
    pub evaluators: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunMetadata {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION"),
            config_hash: config.hash(),
            config: config.clone(),
            backends: Vec::new(),
            evaluators: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    /// Writes `<output>.meta.json` (or `<dir>/run.meta.json` for a directory)
    /// and returns its path.
    pub fn write_for(&self, output: &Path) -> Result<PathBuf> {
        let path = if output.is_dir() {
            output.join("run.meta.json")
        } else {
            let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            output.with_file_name(format!("{name}.meta.json"))
        };
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
