//! Audio ingestion: WAV decoding, band-limited resampling, and clean/noisy
//! corpus manifests.

mod manifest;
mod resample;
mod wav;

pub use manifest::{
    build_manifest, build_manifest_with, load_pair, CorpusLayout, DatasetManifest, ManifestEntry,
    ManifestOptions, Split, DEFAULT_VALID_SPEAKERS, MAX_PAIR_MISMATCH_SECONDS,
};
pub use resample::{resample, Resampler, RESAMPLER_ZERO_CROSSINGS};
pub use wav::{load_audio, write_wav, WavFormat};

use crate::{Error, Result};

/// A sampled mono waveform.
///
/// Samples are finite; audio decoded from PCM lies in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidSignal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is {}", samples[i])));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Elementwise sum, e.g. `x[n] = s[n] + v[n]`.
    pub fn mix(&self, other: &TimeSignal) -> Result<Self> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::RateMismatch(self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(vec![self.len()], vec![other.len()]));
        }
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect();
        Ok(Self { samples, sample_rate: self.sample_rate })
    }

    /// Mixes `noise` into `self` at the requested signal-to-noise ratio.
    pub fn mix_at_snr(&self, noise: &TimeSignal, snr_db: f64) -> Result<Self> {
        let noise = noise.truncated(self.len());
        if noise.len() < self.len() {
            return Err(Error::SignalTooShort { len: noise.len(), required: self.len() });
        }
        let noise_energy = noise.energy();
        if noise_energy == 0.0 {
            return Err(Error::InvalidSignal("noise has zero energy".into()));
        }
        let gain = (self.energy() / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
        self.mix(&noise.scaled(gain))
    }

    pub fn require_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::RateMismatch(self.sample_rate, rate));
        }
        Ok(())
    }
}

/// A time-aligned clean/noisy pair at a shared sample rate.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub id: String,
    pub clean: TimeSignal,
    pub noisy: TimeSignal,
    pub snr_db: Option<f64>,
    pub noise_label: Option<String>,
    pub mos: Option<f64>,
}

impl UtterancePair {
    pub fn new(id: impl Into<String>, clean: TimeSignal, noisy: TimeSignal) -> Result<Self> {
        let id = id.into();
        if clean.sample_rate() != noisy.sample_rate() {
            return Err(Error::RateMismatch(clean.sample_rate(), noisy.sample_rate()));
        }
        if clean.len() != noisy.len() {
            return Err(Error::PairLengthMismatch {
                id,
                samples: clean.len().abs_diff(noisy.len()),
            });
        }
        Ok(Self { id, clean, noisy, snr_db: None, noise_label: None, mos: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_samples() {
        assert!(matches!(
            TimeSignal::new(vec![0.0, f64::NAN], 16000),
            Err(Error::NonFinite(_))
        ));
        assert!(TimeSignal::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn mix_at_snr_hits_target_ratio() {
        let s = TimeSignal::new((0..1000).map(|i| (i as f64 * 0.1).sin()).collect(), 16000).unwrap();
        let v = TimeSignal::new((0..1000).map(|i| (i as f64 * 0.37).cos()).collect(), 16000).unwrap();
        let x = s.mix_at_snr(&v, 5.0).unwrap();
        let residual: f64 = x.samples().iter().zip(s.samples()).map(|(a, b)| (a - b).powi(2)).sum();
        let snr = 10.0 * (s.energy() / residual).log10();
        assert!((snr - 5.0).abs() < 1e-9);
    }

    #[test]
    fn pair_requires_alignment() {
        let a = TimeSignal::zeros(10, 16000);
        let b = TimeSignal::zeros(11, 16000);
        assert!(UtterancePair::new("x", a.clone(), b).is_err());
        assert!(UtterancePair::new("x", a.clone(), TimeSignal::zeros(10, 48000)).is_err());
        assert!(UtterancePair::new("x", a.clone(), a).is_ok());
    }
}
