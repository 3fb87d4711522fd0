//! Differentiable STFT, magnitude, and overlap-add resynthesis on candle
//! tensors. The transforms are expressed as gathers and DFT matrix products so
//! that gradients flow from any loss back to the waveform or mask.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use super::stft::StftParams;
use crate::{Error, Result, ANALYSIS_RATE};

/// Floor added under the square root of the magnitude so its gradient is
/// finite at zero.
pub const MAGNITUDE_EPS: f64 = 1e-12;

/// Precomputed bases for one STFT configuration and signal length.
#[derive(Debug, Clone)]
pub struct SpectralPlan {
    params: StftParams,
    len: usize,
    n_frames: usize,
    /// Gather indices from the signal into the flattened `T x N` frame matrix.
    frame_gather: Tensor,
    /// Scatter indices from the flattened frame matrix into the padded buffer.
    ola_scatter: Tensor,
    /// `N x F` windowed forward DFT bases (real and imaginary parts).
    fwd_cos: Tensor,
    fwd_sin: Tensor,
    /// `F x N` inverse real-DFT bases with the synthesis window folded in.
    inv_cos: Tensor,
    inv_sin: Tensor,
    /// Reciprocal squared-window envelope over the padded buffer.
    inv_envelope: Tensor,
    dtype: DType,
}

impl SpectralPlan {
    pub fn new(params: &StftParams, len: usize, dtype: DType, device: &Device) -> Result<Self> {
        params.validate()?;
        let n_fft = params.fft_size;
        let hop = params.hop(ANALYSIS_RATE);
        let required = params.window_length(ANALYSIS_RATE).max(n_fft / 2 + 1);
        if len < required {
            return Err(Error::SignalTooShort { len, required });
        }
        let n_frames = params.n_frames(len);
        let n_bins = params.n_bins();
        let reflect = params.reflect_indices(len);
        let mut gather = Vec::with_capacity(n_frames * n_fft);
        let mut scatter = Vec::with_capacity(n_frames * n_fft);
        for t in 0..n_frames {
            for i in 0..n_fft {
                gather.push(reflect[t * hop + i] as u32);
                scatter.push((t * hop + i) as u32);
            }
        }
        let window = params.window_samples();
        let mut fwd_cos = vec![0.0; n_fft * n_bins];
        let mut fwd_sin = vec![0.0; n_fft * n_bins];
        let mut inv_cos = vec![0.0; n_bins * n_fft];
        let mut inv_sin = vec![0.0; n_bins * n_fft];
        for n in 0..n_fft {
            for k in 0..n_bins {
                let a = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                fwd_cos[n * n_bins + k] = window[n] * a.cos();
                fwd_sin[n * n_bins + k] = -window[n] * a.sin();
                let weight = if k == 0 || 2 * k == n_fft { 1.0 } else { 2.0 };
                inv_cos[k * n_fft + n] = weight * a.cos() * window[n] / n_fft as f64;
                inv_sin[k * n_fft + n] = -weight * a.sin() * window[n] / n_fft as f64;
            }
        }
        let inv_envelope: Vec<f64> = params
            .squared_window_envelope(n_frames)
            .into_iter()
            .map(|e| if e > 1e-10 { 1.0 / e } else { 0.0 })
            .collect();
        let mat = |v: Vec<f64>, r: usize, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (r, c), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            params: *params,
            len,
            n_frames,
            frame_gather: Tensor::from_vec(gather, n_frames * n_fft, device)?,
            ola_scatter: Tensor::from_vec(scatter, n_frames * n_fft, device)?,
            fwd_cos: mat(fwd_cos, n_fft, n_bins)?,
            fwd_sin: mat(fwd_sin, n_fft, n_bins)?,
            inv_cos: mat(inv_cos, n_bins, n_fft)?,
            inv_sin: mat(inv_sin, n_bins, n_fft)?,
            inv_envelope: Tensor::from_vec(inv_envelope.clone(), inv_envelope.len(), device)?.to_dtype(dtype)?,
            dtype,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Real and imaginary STFT parts (`T x F` each) of a 1-D signal tensor.
    pub fn stft(&self, signal: &Tensor) -> Result<(Tensor, Tensor)> {
        if signal.dims() != [self.len] {
            return Err(Error::ShapeMismatch(signal.dims().to_vec(), vec![self.len]));
        }
        let frames = signal
            .index_select(&self.frame_gather, 0)?
            .reshape((self.n_frames, self.params.fft_size))?;
        Ok((frames.matmul(&self.fwd_cos)?, frames.matmul(&self.fwd_sin)?))
    }

    /// Magnitude spectrogram `sqrt(re^2 + im^2 + eps)`.
    pub fn magnitude(&self, signal: &Tensor) -> Result<Tensor> {
        let (re, im) = self.stft(signal)?;
        Ok(((re.sqr()? + im.sqr()?)? + MAGNITUDE_EPS)?.sqrt()?)
    }

    /// Overlap-add resynthesis of `magnitude` with a fixed phase, returning a
    /// 1-D tensor of the plan's signal length.
    pub fn istft(&self, magnitude: &Tensor, phase: &Array2<f64>) -> Result<Tensor> {
        let shape = [self.n_frames, self.params.n_bins()];
        if magnitude.dims() != shape {
            return Err(Error::ShapeMismatch(magnitude.dims().to_vec(), shape.to_vec()));
        }
        if phase.shape() != shape {
            return Err(Error::ShapeMismatch(phase.shape().to_vec(), shape.to_vec()));
        }
        let device = magnitude.device();
        let cos = Tensor::from_iter(phase.iter().map(|p| p.cos()), device)?.reshape((shape[0], shape[1]))?.to_dtype(self.dtype)?;
        let sin = Tensor::from_iter(phase.iter().map(|p| p.sin()), device)?.reshape((shape[0], shape[1]))?.to_dtype(self.dtype)?;
        let re = (magnitude * cos)?;
        let im = (magnitude * sin)?;
        let frames = (re.matmul(&self.inv_cos)? + im.matmul(&self.inv_sin)?)?;
        let padded_len = self.inv_envelope.dim(0)?;
        let acc = Tensor::zeros(padded_len, self.dtype, device)?.index_add(
            &self.ola_scatter,
            &frames.flatten_all()?,
            0,
        )?;
        let out = (acc * &self.inv_envelope)?;
        Ok(out.narrow(0, self.params.fft_size / 2, self.len)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::TimeSignal;
    use crate::representations::stft::{istft_overlap_add, stft};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn matches_fft_path() {
        let x = signal(3000, 1);
        let p = StftParams::default();
        let plan = SpectralPlan::new(&p, x.len(), DType::F64, &Device::Cpu).unwrap();
        let t = Tensor::from_vec(x.clone(), x.len(), &Device::Cpu).unwrap();
        let mag = plan.magnitude(&t).unwrap().to_vec2::<f64>().unwrap();
        let spec = stft(&TimeSignal::new(x.clone(), 16000).unwrap(), &p).unwrap();
        for (row, ref_row) in mag.iter().zip(spec.magnitude.rows()) {
            for (a, b) in row.iter().zip(ref_row) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let mag_t = Tensor::from_iter(spec.magnitude.iter().copied(), &Device::Cpu)
            .unwrap()
            .reshape(spec.magnitude.dim())
            .unwrap();
        let y = plan.istft(&mag_t, &spec.phase).unwrap().to_vec1::<f64>().unwrap();
        let y_ref = istft_overlap_add(&spec.magnitude, &spec.phase, &p, x.len()).unwrap();
        for ((a, b), c) in y.iter().zip(y_ref.samples()).zip(&x) {
            assert!((a - b).abs() < 1e-9);
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_wrong_lengths() {
        let p = StftParams::default();
        assert!(SpectralPlan::new(&p, 100, DType::F64, &Device::Cpu).is_err());
        let plan = SpectralPlan::new(&p, 1000, DType::F64, &Device::Cpu).unwrap();
        let t = Tensor::zeros(999, DType::F64, &Device::Cpu).unwrap();
        assert!(plan.stft(&t).is_err());
    }
}
