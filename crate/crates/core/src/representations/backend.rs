use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::checkpoint::{default_cache_dir, load_directory, resolve_reference, synthetic_weights, CheckpointSource};
use super::encoder::Wav2VecEncoder;
use super::{Layer, ModelId, SSSRRepresentation};
use crate::audio_io::TimeSignal;
use crate::{Error, Result, ANALYSIS_RATE};

#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub dtype: DType,
    pub cache_dir: PathBuf,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self { dtype: DType::F32, cache_dir: default_cache_dir() }
    }
}

/// Facts about a loaded backend recorded alongside every output.
#[derive(Debug, Clone, Serialize)]
pub struct BackendMetadata {
    pub model_id: &'static str,
    pub checkpoint_ref: String,
    /// Whether inputs are standardised to zero mean and unit variance, the
    /// preprocessing the published checkpoint expects.
    pub normalize_input: bool,
    pub receptive_field: usize,
    /// Input samples per encoder frame, measured with a probe signal.
    pub samples_per_frame: f64,
    pub fe_dim: usize,
    pub ol_dim: usize,
    pub dtype: String,
    pub parameter_checksum: String,
}

/// A frozen pretrained speech representation model exposing two hooks: the
/// convolutional feature encoder (FE) and the final transformer output (OL).
///
/// The model's tensors are never variables, so using it inside a loss lets
/// gradients reach the input waveform while the parameters stay fixed.
pub struct SsrBackend {
    model_id: ModelId,
    checkpoint_ref: String,
    encoder: Wav2VecEncoder,
    dtype: DType,
    normalize_input: bool,
    samples_per_frame: f64,
    checksum: String,
}

impl std::fmt::Debug for SsrBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SsrBackend")
            .field("model_id", &self.model_id)
            .field("checkpoint_ref", &self.checkpoint_ref)
            .field("dtype", &self.dtype)
            .finish()
    }
}

/// Loads a backend in frozen inference mode.
///
/// `checkpoint_ref` is `default` (the cache directory entry for the model),
/// a checkpoint directory, or `synthetic[:seed[:layers]]`.
pub fn load_backend(model_id: ModelId, checkpoint_ref: &str, options: &BackendOptions) -> Result<SsrBackend> {
    let (arch, weights) = match resolve_reference(model_id, checkpoint_ref, &options.cache_dir)? {
        CheckpointSource::Directory(dir) => load_directory(model_id, &dir)?,
        CheckpointSource::Synthetic { seed, layers } => synthetic_weights(model_id, seed, layers)?,
    };
    let encoder = Wav2VecEncoder::new(arch, &weights, options.dtype)?;
    let fe_dim = *encoder.arch().conv_dim.last().unwrap_or(&0);
    let ol_dim = encoder.arch().hidden_size;
    if fe_dim != model_id.fe_dim() || ol_dim != model_id.ol_dim() {
        return Err(Error::Checkpoint(format!(
            "{} checkpoint has widths FE={fe_dim}, OL={ol_dim}; expected {} and {}",
            model_id.as_str(),
            model_id.fe_dim(),
            model_id.ol_dim()
        )));
    }
    let mut backend = SsrBackend {
        model_id,
        checkpoint_ref: checkpoint_ref.to_string(),
        encoder,
        dtype: options.dtype,
        normalize_input: model_id.normalizes_input(),
        samples_per_frame: 0.0,
        checksum: String::new(),
    };
    backend.checksum = backend.compute_checksum()?;

    // The temporal downsampling factor is a property of the checkpoint:
    // measure it on a one-second probe and check it against the geometry.
    let probe_len = ANALYSIS_RATE as usize;
    let probe: Vec<f64> = (0..probe_len).map(|n| 0.5 * (n as f64 * 0.0731).sin() * (n as f64 * 0.0013).cos()).collect();
    let probe = TimeSignal::new(probe, ANALYSIS_RATE)?;
    let fe = backend.forward_fe(&backend.signal_tensor(&probe)?)?;
    let frames = fe.dim(0)?;
    if frames != backend.frames_for(probe_len) {
        return Err(Error::Checkpoint(format!("probe produced {frames} frames, geometry predicts {}", backend.frames_for(probe_len))));
    }
    backend.samples_per_frame = probe_len as f64 / frames as f64;
    Ok(backend)
}

fn load_lock() -> &'static Mutex<HashMap<String, Arc<SsrBackend>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<SsrBackend>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Process-wide shared backends. Loads are serialised; a backend is loaded
/// once per `(model, reference, dtype)` and then served read-only.
pub fn load_backend_shared(model_id: ModelId, checkpoint_ref: &str, options: &BackendOptions) -> Result<Arc<SsrBackend>> {
    let key = format!("{}|{checkpoint_ref}|{:?}|{}", model_id.as_str(), options.dtype, options.cache_dir.display());
    let mut cache = load_lock().lock().unwrap_or_else(|e| e.into_inner());
    if let Some(b) = cache.get(&key) {
        return Ok(b.clone());
    }
    let backend = Arc::new(load_backend(model_id, checkpoint_ref, options)?);
    cache.insert(key, backend.clone());
    Ok(backend)
}

impl SsrBackend {
    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn checkpoint_ref(&self) -> &str {
        &self.checkpoint_ref
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn fe_dim(&self) -> usize {
        self.model_id.fe_dim()
    }

    pub fn ol_dim(&self) -> usize {
        self.model_id.ol_dim()
    }

    pub fn dim(&self, layer: Layer) -> usize {
        match layer {
            Layer::Fe => self.fe_dim(),
            Layer::Ol => self.ol_dim(),
        }
    }

    /// Shortest input (in samples) yielding one frame.
    pub fn min_input_len(&self) -> usize {
        self.encoder.arch().receptive_field()
    }

    /// Frames `T` produced for an input of `len` samples, for both layers.
    pub fn frames_for(&self, len: usize) -> usize {
        self.encoder.arch().frames_for(len)
    }

    pub fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            model_id: self.model_id.as_str(),
            checkpoint_ref: self.checkpoint_ref.clone(),
            normalize_input: self.normalize_input,
            receptive_field: self.min_input_len(),
            samples_per_frame: self.samples_per_frame,
            fe_dim: self.fe_dim(),
            ol_dim: self.ol_dim(),
            dtype: format!("{:?}", self.dtype).to_lowercase(),
            parameter_checksum: self.checksum.clone(),
        }
    }

    /// SHA-256 over every parameter tensor, recomputed from the live tensors.
    pub fn parameter_checksum(&self) -> Result<String> {
        self.compute_checksum()
    }

    fn compute_checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.encoder.parameters() {
            h.update(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Converts a 16 kHz signal to a 1-D input tensor of the backend dtype.
    pub fn signal_tensor(&self, sig: &TimeSignal) -> Result<Tensor> {
        sig.require_rate(ANALYSIS_RATE)?;
        Ok(Tensor::from_slice(sig.samples(), sig.len(), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn preprocess(&self, wav: &Tensor) -> Result<Tensor> {
        let len = wav.dim(0)?;
        if len < self.min_input_len() {
            return Err(Error::SignalTooShort { len, required: self.min_input_len() });
        }
        let wav = wav.to_dtype(self.dtype)?;
        if !self.normalize_input {
            return Ok(wav);
        }
        let centred = wav.broadcast_sub(&wav.mean_keepdim(0)?)?;
        let var = centred.sqr()?.mean_keepdim(0)?;
        Ok(centred.broadcast_div(&(var + 1e-7)?.sqrt()?)?)
    }

    /// Feature-encoder representation `T x 512` of a 1-D waveform tensor.
    pub fn forward_fe(&self, wav: &Tensor) -> Result<Tensor> {
        self.encoder.feature_encoder(&self.preprocess(wav)?)
    }

    /// Output-layer representation `T x hidden` of a 1-D waveform tensor.
    pub fn forward_ol(&self, wav: &Tensor) -> Result<Tensor> {
        self.encoder.context(&self.forward_fe(wav)?)
    }

    pub fn forward(&self, wav: &Tensor, layer: Layer) -> Result<Tensor> {
        match layer {
            Layer::Fe => self.forward_fe(wav),
            Layer::Ol => self.forward_ol(wav),
        }
    }

    pub fn extract(&self, sig: &TimeSignal, layer: Layer) -> Result<SSSRRepresentation> {
        let out = self.forward(&self.signal_tensor(sig)?, layer)?.to_dtype(DType::F64)?;
        let (t, f) = out.dims2()?;
        let values = Array2::from_shape_vec((t, f), out.flatten_all()?.to_vec1::<f64>()?)
            .map_err(|e| Error::InvalidSignal(e.to_string()))?;
        SSSRRepresentation::new(values, self.model_id, layer)
    }
}

/// `S_FE = G_FE(s)`.
pub fn extract_fe(backend: &SsrBackend, sig: &TimeSignal) -> Result<SSSRRepresentation> {
    backend.extract(sig, Layer::Fe)
}

/// `S_OL = G_OL(G_FE(s))`.
pub fn extract_ol(backend: &SsrBackend, sig: &TimeSignal) -> Result<SSSRRepresentation> {
    backend.extract(sig, Layer::Ol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(model: ModelId) -> SsrBackend {
        load_backend(model, "synthetic:3:1", &BackendOptions::default()).unwrap()
    }

    fn tone(len: usize) -> TimeSignal {
        TimeSignal::new((0..len).map(|n| 0.3 * (n as f64 * 0.05).sin()).collect(), 16000).unwrap()
    }

    #[test]
    fn widths_and_alignment() {
        for model in [ModelId::Hubert, ModelId::Xlsr] {
            let b = synthetic(model);
            let sig = tone(8000);
            let fe = extract_fe(&b, &sig).unwrap();
            let ol = extract_ol(&b, &sig).unwrap();
            assert_eq!(fe.dim(), 512);
            assert_eq!(ol.dim(), model.ol_dim());
            assert_eq!(fe.frames(), ol.frames());
            assert_eq!(fe.frames(), b.frames_for(8000));
            assert!((b.metadata().samples_per_frame - 16000.0 / 49.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_extraction_and_loading() {
        let sig = tone(4000);
        let a = synthetic(ModelId::Hubert);
        let b = synthetic(ModelId::Hubert);
        assert_eq!(a.parameter_checksum().unwrap(), b.parameter_checksum().unwrap());
        let r1 = extract_fe(&a, &sig).unwrap();
        let r2 = extract_fe(&a, &sig).unwrap();
        let r3 = extract_fe(&b, &sig).unwrap();
        assert_eq!(r1.values, r2.values);
        assert_eq!(r1.values, r3.values);
    }

    #[test]
    fn too_short_input() {
        let b = synthetic(ModelId::Hubert);
        assert!(matches!(extract_fe(&b, &tone(399)), Err(Error::SignalTooShort { .. })));
        assert!(extract_fe(&b, &tone(400)).is_ok());
    }

    #[test]
    fn missing_checkpoint() {
        let opts = BackendOptions { cache_dir: PathBuf::from("/nonexistent"), ..Default::default() };
        assert!(matches!(load_backend(ModelId::Hubert, "default", &opts), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn gradients_reach_input_weights_stay_constant() {
        let opts = BackendOptions { dtype: DType::F64, ..Default::default() };
        let b = load_backend(ModelId::Hubert, "synthetic:1:1", &opts).unwrap();
        let sig = tone(1200);
        let var = candle_core::Var::from_tensor(&b.signal_tensor(&sig).unwrap()).unwrap();
        let out = b.forward_ol(var.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(g > 0.0 && g.is_finite());
        // Weights are constants: an optimizer built from variables can never
        // reach them.
        for (name, p) in b.encoder.parameters() {
            assert!(!p.is_variable(), "{name} is trainable");
        }
    }
}
