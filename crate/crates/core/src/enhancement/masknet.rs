//! BLSTM mask estimator: two bidirectional LSTM layers, then two affine
//! layers with LeakyReLU and Sigmoid activations.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::TimeSignal;
use crate::representations::{istft_overlap_add, stft, StftParams};
use crate::{Error, Result};

/// How the magnitude is compressed before entering the network. The mask is
/// always applied to the raw magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputCompression {
    None,
    #[default]
    Log1p,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNetConfig {
    pub input_dim: usize,
    pub recurrent_layers: usize,
    /// Hidden units per direction.
    pub recurrent_hidden_size: usize,
    pub affine_hidden_size: usize,
    pub leaky_relu_slope: f64,
    pub input_compression: InputCompression,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 257,
            recurrent_layers: 2,
            recurrent_hidden_size: 256,
            affine_hidden_size: 512,
            leaky_relu_slope: 0.3,
            input_compression: InputCompression::Log1p,
        }
    }
}

impl MaskNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.recurrent_layers == 0 || self.recurrent_hidden_size == 0 || self.affine_hidden_size == 0 {
            return Err(Error::Config("mask network sizes must be positive".into()));
        }
        if !(self.leaky_relu_slope.is_finite() && self.leaky_relu_slope >= 0.0) {
            return Err(Error::Config(format!("invalid LeakyReLU slope {}", self.leaky_relu_slope)));
        }
        Ok(())
    }

    /// Parameter names and shapes in PyTorch layout.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.recurrent_hidden_size;
        let mut out = Vec::new();
        for layer in 0..self.recurrent_layers {
            let input = if layer == 0 { self.input_dim } else { 2 * h };
            for suffix in ["", "_reverse"] {
                out.push((format!("lstm.weight_ih_l{layer}{suffix}"), vec![4 * h, input]));
                out.push((format!("lstm.weight_hh_l{layer}{suffix}"), vec![4 * h, h]));
                out.push((format!("lstm.bias_ih_l{layer}{suffix}"), vec![4 * h]));
                out.push((format!("lstm.bias_hh_l{layer}{suffix}"), vec![4 * h]));
            }
        }
        out.push(("fc1.weight".into(), vec![self.affine_hidden_size, 2 * h]));
        out.push(("fc1.bias".into(), vec![self.affine_hidden_size]));
        out.push(("fc2.weight".into(), vec![self.input_dim, self.affine_hidden_size]));
        out.push(("fc2.bias".into(), vec![self.input_dim]));
        out
    }
}

#[derive(Debug, Clone)]
pub struct MaskNet {
    config: MaskNetConfig,
    params: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
}

pub(crate) fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

impl MaskNet {
    /// Fresh weights drawn like PyTorch's defaults: LSTM weights and biases
    /// uniform in ±1/√H, affine layers uniform in ±1/√fan_in.
    pub fn new(config: MaskNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let fan_in = if name.starts_with("lstm.") { config.recurrent_hidden_size } else { *shape.last().unwrap_or(&1) };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self { config, params, dtype, seed })
    }

    /// Restores a model from named tensors; every expected parameter must be
    /// present with the expected shape.
    pub fn from_tensors(config: MaskNetConfig, tensors: &HashMap<String, Tensor>, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing mask parameter {name}")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: expected shape {shape:?}, found {:?}", t.dims())));
            }
            params.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self { config, params, dtype, seed })
    }

    pub fn load(config: MaskNetConfig, path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::from_tensors(config, &tensors, 0, dtype)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.snapshot(), path)?;
        Ok(())
    }

    pub fn config(&self) -> &MaskNetConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Deep copy of every parameter; variables are updated in place, so a
    /// shared-storage view would follow later training steps.
    pub fn snapshot(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach().copy().expect("cpu tensor copy")))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = snapshot.get(name).ok_or_else(|| Error::Checkpoint(format!("snapshot lacks {name}")))?;
            var.set(&t.to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over parameter names and their values as f64.
    pub fn checksum(&self) -> Result<String> {
        parameter_checksum(self.params.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params[name].as_tensor()
    }

    fn lstm_direction(&self, x: &Tensor, layer: usize, reverse: bool) -> Result<Tensor> {
        let suffix = if reverse { "_reverse" } else { "" };
        let h_size = self.config.recurrent_hidden_size;
        let w_ih = self.p(&format!("lstm.weight_ih_l{layer}{suffix}"));
        let w_hh_t = self.p(&format!("lstm.weight_hh_l{layer}{suffix}")).t()?;
        let bias = (self.p(&format!("lstm.bias_ih_l{layer}{suffix}")) + self.p(&format!("lstm.bias_hh_l{layer}{suffix}")))?;
        let xw = x.matmul(&w_ih.t()?)?.broadcast_add(&bias.unsqueeze(0)?)?;
        let steps = x.dim(0)?;
        let mut h = Tensor::zeros((1, h_size), self.dtype, x.device())?;
        let mut c = h.clone();
        let mut outputs: Vec<Tensor> = vec![h.clone(); steps];
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
        for t in order {
            let gates = (xw.narrow(0, t, 1)? + h.matmul(&w_hh_t)?)?;
            let i = sigmoid(&gates.narrow(1, 0, h_size)?)?;
            let f = sigmoid(&gates.narrow(1, h_size, h_size)?)?;
            let g = gates.narrow(1, 2 * h_size, h_size)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * h_size, h_size)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outputs[t] = h.clone();
        }
        Ok(Tensor::cat(&outputs, 0)?)
    }

    /// `T x F` magnitude tensor to a `T x F` mask in (0, 1).
    pub fn forward(&self, magnitude: &Tensor) -> Result<Tensor> {
        let (_, f) = magnitude.dims2()?;
        if f != self.config.input_dim {
            return Err(Error::ShapeMismatch(magnitude.dims().to_vec(), vec![magnitude.dim(0)?, self.config.input_dim]));
        }
        let magnitude = magnitude.to_dtype(self.dtype)?;
        let mut x = match self.config.input_compression {
            InputCompression::None => magnitude,
            InputCompression::Log1p => (magnitude + 1.0)?.log()?,
        };
        for layer in 0..self.config.recurrent_layers {
            let fwd = self.lstm_direction(&x, layer, false)?;
            let bwd = self.lstm_direction(&x, layer, true)?;
            x = Tensor::cat(&[fwd, bwd], 1)?;
        }
        let h = x.matmul(&self.p("fc1.weight").t()?)?.broadcast_add(&self.p("fc1.bias").unsqueeze(0)?)?;
        let slope = self.config.leaky_relu_slope;
        let h = (h.relu()? - (h.neg()?.relu()? * slope)?)?;
        let logits = h.matmul(&self.p("fc2.weight").t()?)?.broadcast_add(&self.p("fc2.bias").unsqueeze(0)?)?;
        Ok(sigmoid(&logits)?)
    }
}

pub(crate) fn parameter_checksum<'a>(params: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub(crate) fn array_to_tensor(a: &Array2<f64>, dtype: DType) -> Result<Tensor> {
    let (r, c) = a.dim();
    Ok(Tensor::from_iter(a.iter().copied(), &Device::Cpu)?.reshape((r, c))?.to_dtype(dtype)?)
}

pub(crate) fn tensor_to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((r, c), v).map_err(|e| Error::InvalidSignal(e.to_string()))
}

/// Mask for a noisy magnitude spectrogram.
pub fn forward_mask(model: &MaskNet, noisy_magnitude: &Array2<f64>) -> Result<Array2<f64>> {
    if noisy_magnitude.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask network input".into()));
    }
    tensor_to_array(&model.forward(&array_to_tensor(noisy_magnitude, model.dtype())?)?)
}

/// `ŝ = istft(mask ⊙ |X|, ∠X)` with the output trimmed to the input length.
pub fn enhance(model: &MaskNet, noisy: &TimeSignal, params: &StftParams) -> Result<TimeSignal> {
    let spec = stft(noisy, params)?;
    let mask = forward_mask(model, &spec.magnitude)?;
    istft_overlap_add(&(&mask * &spec.magnitude), &spec.phase, params, noisy.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MaskNetConfig {
        MaskNetConfig { recurrent_hidden_size: 8, affine_hidden_size: 16, ..Default::default() }
    }

    fn magnitude(t: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, 257), |(i, j)| ((i * 31 + j * 7) % 13) as f64 * 0.3)
    }

    #[test]
    fn mask_shape_and_range() {
        let net = MaskNet::new(small(), 1, DType::F64).unwrap();
        for t in [1, 5] {
            let m = forward_mask(&net, &magnitude(t)).unwrap();
            assert_eq!(m.dim(), (t, 257));
            assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = MaskNet::new(small(), 7, DType::F32).unwrap();
        let b = MaskNet::new(small(), 7, DType::F32).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_eq!(forward_mask(&a, &magnitude(4)).unwrap(), forward_mask(&b, &magnitude(4)).unwrap());
        assert_ne!(a.checksum().unwrap(), MaskNet::new(small(), 8, DType::F32).unwrap().checksum().unwrap());
    }

    #[test]
    fn default_parameter_count() {
        let net = MaskNet::new(MaskNetConfig::default(), 0, DType::F32).unwrap();
        let h = 256;
        let lstm0 = 2 * (4 * h * 257 + 4 * h * h + 8 * h);
        let lstm1 = 2 * (4 * h * 2 * h + 4 * h * h + 8 * h);
        let fc = 512 * 512 + 512 + 257 * 512 + 257;
        assert_eq!(net.parameter_count(), lstm0 + lstm1 + fc);
    }

    #[test]
    fn bidirectional_context() {
        // Changing the last frame must influence the first frame's mask.
        let net = MaskNet::new(small(), 2, DType::F64).unwrap();
        let a = magnitude(6);
        let mut b = a.clone();
        b.row_mut(5).fill(3.0);
        let (ma, mb) = (forward_mask(&net, &a).unwrap(), forward_mask(&net, &b).unwrap());
        assert!((ma[[0, 0]] - mb[[0, 0]]).abs() > 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = MaskNet::new(small(), 3, DType::F32).unwrap();
        let p = dir.path().join("m.safetensors");
        net.save(&p).unwrap();
        let back = MaskNet::load(small(), &p, DType::F32).unwrap();
        assert_eq!(net.checksum().unwrap(), back.checksum().unwrap());
        assert!(MaskNet::load(MaskNetConfig::default(), &p, DType::F32).is_err());
        assert!(matches!(MaskNet::load(small(), dir.path().join("x"), DType::F32), Err(Error::MissingFile(_))));
    }

    fn constant_mask_net(bias: f64) -> MaskNet {
        let cfg = small();
        let mut net = MaskNet::new(cfg, 0, DType::F64).unwrap();
        let mut snap = net.snapshot();
        snap.insert("fc2.weight".into(), Tensor::zeros((257, 16), DType::F64, &Device::Cpu).unwrap());
        snap.insert("fc2.bias".into(), Tensor::full(bias, 257, &Device::Cpu).unwrap());
        net.restore(&snap).unwrap();
        net
    }

    #[test]
    fn identity_and_zero_masks() {
        let x = crate::synth::speech_like(0.5, 16000, 1);
        let params = StftParams::default();
        let near_one = enhance(&constant_mask_net(40.0), &x, &params).unwrap();
        assert_eq!(near_one.len(), x.len());
        let err = near_one.mix(&x.scaled(-1.0)).unwrap().energy() / x.energy();
        assert!(err < 1e-6, "{err}");
        let near_zero = enhance(&constant_mask_net(-40.0), &x, &params).unwrap();
        assert!(near_zero.energy() / x.energy() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let net = MaskNet::new(small(), 1, DType::F64).unwrap();
        let mut m = magnitude(2);
        m[[0, 0]] = f64::NAN;
        assert!(matches!(forward_mask(&net, &m), Err(Error::NonFinite(_))));
        assert!(forward_mask(&net, &Array2::zeros((2, 10))).is_err());
    }
}
