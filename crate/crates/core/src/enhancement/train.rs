//! Training loop, per-epoch checkpoints and checkpoint selection.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{Loss, LossContext, LossKind};
use super::masknet::{array_to_tensor, enhance, MaskNet, MaskNetConfig};
use crate::audio_io::{load_pair, DatasetManifest, UtterancePair};
use crate::distances::ABSENT;
use crate::metrics::{pesq_score, si_sdr_with_ceiling, MetricKind, MetricRegistry, DEFAULT_SI_SDR_CEILING};
use crate::representations::diff::SpectralPlan;
use crate::representations::stft;
use crate::{Error, Result, ANALYSIS_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    #[default]
    Pesq,
    SiSdr,
}

impl ValidationMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValidationMetric::Pesq => "pesq",
            ValidationMetric::SiSdr => "si_sdr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Utterances per optimizer step; losses are averaged across the batch.
    pub batch_size: usize,
    pub seed: u64,
    pub validation_metric: ValidationMetric,
    /// Global gradient-norm limit; off when unset.
    pub grad_clip: Option<f64>,
    /// Stop each epoch after this many steps (for quick checks).
    pub max_steps_per_epoch: Option<usize>,
    pub precision: Precision,
    pub model: MaskNetConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Sg,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 1,
            seed: 0,
            validation_metric: ValidationMetric::Pesq,
            grad_clip: None,
            max_steps_per_epoch: None,
            precision: Precision::F32,
            model: MaskNetConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_pesq: Option<f64>,
    pub valid_si_sdr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_metric: ValidationMetric,
    /// Mean validation score under `validation_metric`; negative infinity
    /// when nothing could be scored.
    pub validation_score: f64,
    pub valid_pesq: Option<f64>,
    pub valid_si_sdr: Option<f64>,
    pub loss: LossKind,
    pub config_hash: String,
    pub parameter_checksum: String,
    pub model: MaskNetConfig,
    pub history: Vec<EpochLog>,
    /// Parameter file, when checkpoints are written to disk.
    pub parameters_file: Option<PathBuf>,
    #[serde(skip)]
    pub snapshot: Option<HashMap<String, Tensor>>,
}

impl Checkpoint {
    pub fn write_metadata(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_metadata(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut cp: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if let (Some(file), Some(dir)) = (&cp.parameters_file, path.parent()) {
            if file.is_relative() {
                cp.parameters_file = Some(dir.join(file));
            }
        }
        Ok(cp)
    }

    /// Rebuilds the model from the in-memory snapshot or the parameter file.
    pub fn load_model(&self, dtype: DType) -> Result<MaskNet> {
        match (&self.snapshot, &self.parameters_file) {
            (Some(s), _) => MaskNet::from_tensors(self.model.clone(), s, 0, dtype),
            (None, Some(p)) => MaskNet::load(self.model.clone(), p, dtype),
            (None, None) => Err(Error::Checkpoint(format!("epoch {} has no parameters", self.epoch))),
        }
    }
}

/// Checkpoint metadata files (`epoch_*.json`) in a directory, by epoch.
pub fn load_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<Checkpoint>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("epoch_") && name.ends_with(".json") {
            out.push(Checkpoint::read_metadata(&p)?);
        }
    }
    out.sort_by_key(|c| c.epoch);
    Ok(out)
}

/// Highest validation score; ties go to the earliest epoch.
pub fn select_checkpoint(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for cp in checkpoints {
        let better = match best {
            None => true,
            Some(b) => cp.validation_score > b.validation_score || (cp.validation_score == b.validation_score && cp.epoch < b.epoch),
        };
        if better {
            best = Some(cp);
        }
    }
    best.ok_or_else(|| Error::EmptyResultSet("no checkpoints to select from".into()))
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "valid_pesq", "valid_si_sdr"])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| ABSENT.into());
    for e in log {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), opt(e.valid_pesq), opt(e.valid_si_sdr)])?;
    }
    w.flush()?;
    Ok(())
}

/// What happened in one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: usize,
    /// Batch-mean loss before the update.
    pub loss: f64,
    pub mask_min: f64,
    pub mask_max: f64,
}

/// Optimizer state plus the model it updates.
pub struct Trainer {
    model: MaskNet,
    optimizer: AdamW,
    loss: Loss,
    stft: crate::representations::StftParams,
    grad_clip: Option<f64>,
    plans: HashMap<usize, SpectralPlan>,
}

impl Trainer {
    pub fn new(cfg: &TrainingConfig, loss: Loss, stft: crate::representations::StftParams) -> Result<Self> {
        cfg.validate()?;
        let model = MaskNet::new(cfg.model.clone(), cfg.seed, cfg.precision.dtype())?;
        let params = ParamsAdamW { lr: cfg.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let optimizer = AdamW::new(model.vars(), params)?;
        Ok(Self { model, optimizer, loss, stft, grad_clip: cfg.grad_clip, plans: HashMap::new() })
    }

    pub fn model(&self) -> &MaskNet {
        &self.model
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    fn plan(&mut self, len: usize) -> Result<&SpectralPlan> {
        if !self.plans.contains_key(&len) {
            let plan = SpectralPlan::new(&self.stft, len, self.model.dtype(), &Device::Cpu)?;
            self.plans.insert(len, plan);
        }
        Ok(&self.plans[&len])
    }

    /// Loss tensor for one pair plus the mask's range.
    pub fn pair_loss(&mut self, pair: &UtterancePair) -> Result<(Tensor, f64, f64)> {
        let dtype = self.model.dtype();
        let spec = stft(&pair.noisy, &self.stft)?;
        let noisy_mag = array_to_tensor(&spec.magnitude, dtype)?;
        let mask = self.model.forward(&noisy_mag)?;
        let flat = mask.flatten_all()?;
        let mask_min = flat.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let mask_max = flat.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let estimate_mag = (mask * noisy_mag)?;
        let clean = Tensor::from_slice(pair.clean.samples(), pair.clean.len(), &Device::Cpu)?.to_dtype(dtype)?;
        let len = pair.noisy.len();
        let loss = self.loss.clone();
        let plan = self.plan(len)?;
        let estimate = plan.istft(&estimate_mag, &spec.phase)?;
        Ok((loss.compute(plan, &clean, &estimate)?, mask_min, mask_max))
    }

    /// One optimizer step on the batch mean of the pair losses.
    pub fn step(&mut self, batch: &[&UtterancePair], epoch: usize, step: usize) -> Result<StepReport> {
        let mut total: Option<Tensor> = None;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for pair in batch {
            let (l, mn, mx) = self.pair_loss(pair)?;
            lo = lo.min(mn);
            hi = hi.max(mx);
            total = Some(match total {
                None => l,
                Some(t) => (t + l)?,
            });
        }
        let total = total.ok_or_else(|| Error::EmptyResultSet("empty batch".into()))?;
        let mean = (total / batch.len() as f64)?;
        let value = mean.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence { epoch, detail: format!("loss {value} at step {step}") });
        }
        let mut grads = mean.backward()?;
        if let Some(limit) = self.grad_clip {
            let vars = self.model.vars();
            let mut sq = 0.0;
            for v in &vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                }
            }
            let norm = sq.sqrt();
            if norm > limit {
                let scale = limit / norm;
                for v in &vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.optimizer.step(&grads)?;
        Ok(StepReport { epoch, step, loss: value, mask_min: lo, mask_max: hi })
    }
}

/// Dependencies of a training run beyond its configuration.
#[derive(Clone, Default)]
pub struct TrainingContext {
    pub losses: LossContext,
    pub metrics: MetricRegistry,
    pub config_hash: String,
    /// Where to write checkpoints and the training log; in memory when unset.
    pub output_dir: Option<PathBuf>,
}

pub struct TrainingRun {
    pub model: MaskNet,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<EpochLog>,
    /// Metric actually used for selection (PESQ falls back to SI-SDR when no
    /// PESQ evaluator is registered).
    pub validation_metric: ValidationMetric,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn validate_model(
    model: &MaskNet,
    pairs: &[UtterancePair],
    ctx: &TrainingContext,
    use_pesq: bool,
    epoch: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let ceiling = ctx.losses.si_sdr_ceiling.unwrap_or(DEFAULT_SI_SDR_CEILING);
    let mut pesq = Vec::new();
    let mut sisdr = Vec::new();
    for pair in pairs {
        let est = enhance(model, &pair.noisy, &ctx.losses.stft).map_err(|e| match e {
            Error::NonFinite(detail) => Error::Divergence { epoch, detail: format!("validation output on {}: {detail}", pair.id) },
            other => other,
        })?;
        if let Ok(v) = si_sdr_with_ceiling(&pair.clean, &est, ceiling) {
            sisdr.push(v);
        }
        if use_pesq {
            if let Some(v) = pesq_score(&ctx.metrics, &pair.clean, &est)? {
                pesq.push(v);
            }
        }
    }
    Ok((mean(pesq.into_iter()), mean(sisdr.into_iter())))
}

/// Trains on in-memory pairs. `observer` sees every step.
pub fn train_pairs(
    train: &[UtterancePair],
    valid: &[UtterancePair],
    cfg: &TrainingConfig,
    ctx: &TrainingContext,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<TrainingRun> {
    if train.is_empty() {
        return Err(Error::EmptyResultSet("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::EmptyResultSet("validation set is empty".into()));
    }
    let loss = Loss::resolve(cfg.loss, &ctx.losses)?;
    let mut trainer = Trainer::new(cfg, loss, ctx.losses.stft)?;
    let metric = match cfg.validation_metric {
        ValidationMetric::Pesq if ctx.metrics.provider(MetricKind::Pesq).is_none() => {
            log::warn!("no PESQ evaluator registered; selecting checkpoints by validation SI-SDR");
            ValidationMetric::SiSdr
        }
        m => m,
    };
    if let Some(dir) = &ctx.output_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps_per_epoch.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&UtterancePair> = chunk.iter().map(|&i| &train[i]).collect();
            let report = trainer.step(&batch, epoch, step)?;
            observer(&report);
            losses.push(report.loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (valid_pesq, valid_si_sdr) = validate_model(trainer.model(), valid, ctx, metric == ValidationMetric::Pesq, epoch)?;
        let score = match metric {
            ValidationMetric::Pesq => valid_pesq,
            ValidationMetric::SiSdr => valid_si_sdr,
        };
        log.push(EpochLog { epoch, train_loss, valid_pesq, valid_si_sdr });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, valid {} {}",
            metric.as_str(),
            score.map(|v| format!("{v:.4}")).unwrap_or_else(|| ABSENT.into())
        );

        let mut cp = Checkpoint {
            epoch,
            train_loss,
            validation_metric: metric,
            validation_score: score.unwrap_or(f64::NEG_INFINITY),
            valid_pesq,
            valid_si_sdr,
            loss: cfg.loss,
            config_hash: ctx.config_hash.clone(),
            parameter_checksum: trainer.model().checksum()?,
            model: cfg.model.clone(),
            history: log.clone(),
            parameters_file: None,
            snapshot: None,
        };
        match &ctx.output_dir {
            Some(dir) => {
                let file = format!("epoch_{epoch:03}.safetensors");
                trainer.model().save(dir.join(&file))?;
                cp.parameters_file = Some(PathBuf::from(file));
                cp.write_metadata(dir.join(format!("epoch_{epoch:03}.json")))?;
                cp.parameters_file = Some(dir.join(format!("epoch_{epoch:03}.safetensors")));
                write_training_log(dir.join("training_log.csv"), &log)?;
            }
            None => cp.snapshot = Some(trainer.model().snapshot()),
        }
        checkpoints.push(cp);
    }
    Ok(TrainingRun { model: trainer.model, checkpoints, log, validation_metric: metric })
}

fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<UtterancePair>> {
    manifest.entries.iter().map(|e| load_pair(e, ANALYSIS_RATE)).collect()
}

/// Loads both manifests and trains.
pub fn train(train: &DatasetManifest, valid: &DatasetManifest, cfg: &TrainingConfig, ctx: &TrainingContext) -> Result<TrainingRun> {
    let train_pairs_ = load_pairs(train)?;
    let valid_pairs = load_pairs(valid)?;
    train_pairs(&train_pairs_, &valid_pairs, cfg, ctx, &mut |_| {})
}
