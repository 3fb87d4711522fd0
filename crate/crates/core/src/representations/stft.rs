//! Short-time Fourier analysis and weighted overlap-add resynthesis.
//!
//! Framing is centred: the signal is reflect-padded by `fft_size / 2` on both
//! sides, so a signal of `n` samples yields `1 + n / hop` frames and equal
//! length signals always give equal frame counts.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio_io::TimeSignal;
use crate::{Error, Result, ANALYSIS_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftParams {
    pub fft_size: usize,
    pub window_length_ms: f64,
    pub hop_ms: f64,
    pub window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { fft_size: 512, window_length_ms: 32.0, hop_ms: 16.0, window: WindowKind::Hamming }
    }
}

impl StftParams {
    pub fn window_length(&self, rate: u32) -> usize {
        (self.window_length_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, rate: u32) -> usize {
        (self.hop_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a signal of `len` samples under centred framing.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop(ANALYSIS_RATE)
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.window_length(ANALYSIS_RATE);
        let hop = self.hop(ANALYSIS_RATE);
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!("fft_size must be even, got {}", self.fft_size)));
        }
        if win == 0 || win > self.fft_size {
            return Err(Error::Config(format!("window of {win} samples does not fit fft_size {}", self.fft_size)));
        }
        if hop == 0 || hop > win {
            return Err(Error::Config(format!("hop of {hop} samples must be in 1..={win}")));
        }
        Ok(())
    }

    /// Analysis window of `fft_size` samples: the periodic window of the
    /// configured length, zero-padded symmetrically.
    pub fn window_samples(&self) -> Vec<f64> {
        let win = self.window_length(ANALYSIS_RATE);
        let (a0, a1) = match self.window {
            WindowKind::Hamming => (0.54, 0.46),
            WindowKind::Hann => (0.5, 0.5),
        };
        let offset = (self.fft_size - win) / 2;
        let mut out = vec![0.0; self.fft_size];
        for n in 0..win {
            out[offset + n] = a0 - a1 * (2.0 * PI * n as f64 / win as f64).cos();
        }
        out
    }

    /// Sum of squared windows at each position of the padded overlap-add
    /// buffer for `n_frames` frames.
    pub fn squared_window_envelope(&self, n_frames: usize) -> Vec<f64> {
        let hop = self.hop(ANALYSIS_RATE);
        let w = self.window_samples();
        let mut env = vec![0.0; (n_frames - 1) * hop + self.fft_size];
        for t in 0..n_frames {
            for (i, wi) in w.iter().enumerate() {
                env[t * hop + i] += wi * wi;
            }
        }
        env
    }

    /// Source index in the unpadded signal for each reflect-padded position.
    pub fn reflect_indices(&self, len: usize) -> Vec<usize> {
        let pad = self.fft_size / 2;
        (0..len + 2 * pad)
            .map(|i| {
                let j = i as isize - pad as isize;
                let n = len as isize;
                if j < 0 {
                    (-j) as usize
                } else if j >= n {
                    (2 * (n - 1) - j) as usize
                } else {
                    j as usize
                }
            })
            .collect()
    }

    fn check_signal(&self, sig: &TimeSignal) -> Result<()> {
        sig.require_rate(ANALYSIS_RATE)?;
        let required = self.window_length(ANALYSIS_RATE).max(self.fft_size / 2 + 1);
        if sig.len() < required {
            return Err(Error::SignalTooShort { len: sig.len(), required });
        }
        Ok(())
    }
}

/// Magnitude/phase decomposition of a complex STFT, `T x F_Hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub params: StftParams,
    pub origin_length: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.magnitude.ncols()
    }
}

pub fn stft(sig: &TimeSignal, params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    params.check_signal(sig)?;
    let x = sig.samples();
    let n_fft = params.fft_size;
    let hop = params.hop(ANALYSIS_RATE);
    let padded: Vec<f64> = params.reflect_indices(x.len()).into_iter().map(|i| x[i]).collect();
    let n_frames = params.n_frames(x.len());
    let n_bins = params.n_bins();
    let window = params.window_samples();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let mut magnitude = Array2::zeros((n_frames, n_bins));
    let mut phase = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let frame = &padded[t * hop..t * hop + n_fft];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            magnitude[[t, k]] = buf[k].norm();
            phase[[t, k]] = buf[k].arg();
        }
    }
    Ok(Spectrogram { magnitude, phase, params: *params, origin_length: x.len() })
}

/// Inverse STFT by weighted overlap-add: each inverse-transformed frame is
/// multiplied by the analysis window, summed, and divided by the summed
/// squared-window envelope.
pub fn istft_overlap_add(
    magnitude: &Array2<f64>,
    phase: &Array2<f64>,
    params: &StftParams,
    out_length: usize,
) -> Result<TimeSignal> {
    params.validate()?;
    if magnitude.shape() != phase.shape() {
        return Err(Error::ShapeMismatch(magnitude.shape().to_vec(), phase.shape().to_vec()));
    }
    let n_bins = params.n_bins();
    if magnitude.ncols() != n_bins || magnitude.nrows() == 0 {
        return Err(Error::ShapeMismatch(magnitude.shape().to_vec(), vec![magnitude.nrows().max(1), n_bins]));
    }
    let n_fft = params.fft_size;
    let hop = params.hop(ANALYSIS_RATE);
    let n_frames = magnitude.nrows();
    let window = params.window_samples();
    let envelope = params.squared_window_envelope(n_frames);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);

    let mut acc = vec![0.0; envelope.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        for k in 0..n_bins {
            let z = Complex64::from_polar(magnitude[[t, k]], phase[[t, k]]);
            buf[k] = z;
            if k > 0 && k < n_fft - k {
                buf[n_fft - k] = z.conj();
            }
        }
        // DC and Nyquist bins of a real signal are real.
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        ifft.process(&mut buf);
        for (i, (b, w)) in buf.iter().zip(&window).enumerate() {
            acc[t * hop + i] += b.re / n_fft as f64 * w;
        }
    }
    let pad = n_fft / 2;
    let samples = (0..out_length)
        .map(|n| {
            let i = n + pad;
            match (acc.get(i), envelope.get(i)) {
                (Some(a), Some(&e)) if e > 1e-10 => a / e,
                _ => 0.0,
            }
        })
        .collect();
    TimeSignal::new(samples, ANALYSIS_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> TimeSignal {
        TimeSignal::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), ANALYSIS_RATE).unwrap()
    }

    /// Independent oracle: explicit DFT sum of one windowed, padded frame.
    fn dft_frame(frame: &[f64], window: &[f64], k: usize) -> (f64, f64) {
        let n = frame.len() as f64;
        frame.iter().zip(window).enumerate().fold((0.0, 0.0), |(re, im), (i, (x, w))| {
            let a = -2.0 * PI * k as f64 * i as f64 / n;
            (re + x * w * a.cos(), im + x * w * a.sin())
        })
    }

    #[test]
    fn default_geometry() {
        let p = StftParams::default();
        assert_eq!(p.window_length(16000), 512);
        assert_eq!(p.hop(16000), 256);
        assert_eq!(p.n_bins(), 257);
        let spec = stft(&TimeSignal::zeros(16000, 16000), &p).unwrap();
        assert_eq!(spec.n_bins(), 257);
        assert_eq!(spec.n_frames(), 1 + 16000 / 256);
        assert!(spec.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn hamming_is_cola_at_half_overlap() {
        let w = StftParams::default().window_samples();
        for i in 0..256 {
            assert!((w[i] + w[i + 256] - 1.08).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_matches_direct_dft() {
        let mut x = vec![0.0; 2048];
        x[0] = 1.0;
        let p = StftParams::default();
        let spec = stft(&TimeSignal::new(x.clone(), 16000).unwrap(), &p).unwrap();
        let padded: Vec<f64> = p.reflect_indices(x.len()).into_iter().map(|i| x[i]).collect();
        let w = p.window_samples();
        // The impulse sits at the centre of frame 0: flat magnitude w[256] = 1.0.
        for k in 0..257 {
            let (re, im) = dft_frame(&padded[..512], &w, k);
            assert!((spec.magnitude[[0, k]] - re.hypot(im)).abs() < 1e-10);
            assert!((spec.magnitude[[0, k]] - w[256]).abs() < 1e-10);
        }
    }

    #[test]
    fn random_frames_match_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig = random_signal(&mut rng, 1500);
        let p = StftParams::default();
        let spec = stft(&sig, &p).unwrap();
        let padded: Vec<f64> = p.reflect_indices(1500).into_iter().map(|i| sig.samples()[i]).collect();
        let w = p.window_samples();
        for t in [0, 2, 5] {
            for k in [0, 1, 100, 256] {
                let (re, im) = dft_frame(&padded[t * 256..t * 256 + 512], &w, k);
                assert!((spec.magnitude[[t, k]] - re.hypot(im)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = StftParams::default();
        for len in [512, 4000, 16000, 16123] {
            let x = random_signal(&mut rng, len);
            let spec = stft(&x, &p).unwrap();
            let y = istft_overlap_add(&spec.magnitude, &spec.phase, &p, len).unwrap();
            let err: f64 = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((err / x.energy()).sqrt() < 1e-10, "len {len}");
        }
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let p = StftParams::default();
        let mag = Array2::zeros((10, 257));
        let y = istft_overlap_add(&mag, &mag, &p, 2304).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn error_paths() {
        let p = StftParams::default();
        assert!(matches!(stft(&TimeSignal::zeros(100, 16000), &p), Err(Error::SignalTooShort { .. })));
        assert!(matches!(stft(&TimeSignal::zeros(16000, 48000), &p), Err(Error::RateMismatch(..))));
        let a = Array2::zeros((3, 257));
        let b = Array2::zeros((4, 257));
        assert!(matches!(istft_overlap_add(&a, &b, &p, 100), Err(Error::ShapeMismatch(..))));
    }

    #[test]
    fn energy_monotone_in_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_signal(&mut rng, 8000);
        let p = StftParams::default();
        let mut last = -1.0;
        for g in [0.0, 0.1, 0.5, 1.0, 2.0] {
            let e: f64 = stft(&x.scaled(g), &p).unwrap().magnitude.iter().map(|m| m * m).sum();
            assert!(e >= last);
            last = e;
        }
    }
}
