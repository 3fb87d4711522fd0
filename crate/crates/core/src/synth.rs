//! Seeded synthetic speech-like signals, noises and corpus fixtures for tests
//! and desk-scale runs without a real corpus.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio_io::{write_wav, TimeSignal, WavFormat};
use crate::{Error, Result};

const TARGET_RMS: f64 = 0.05;

fn normalize_rms(mut samples: Vec<f64>, rms: f64) -> Vec<f64> {
    let cur = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len().max(1) as f64).sqrt();
    if cur > 0.0 {
        samples.iter_mut().for_each(|v| *v *= rms / cur);
    }
    samples
}

/// Syllable-like harmonic bursts with a gliding pitch, random formant
/// weighting, fricative noise onsets and short pauses.
pub fn speech_like(seconds: f64, rate: u32, seed: u64) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * rate as f64).round().max(1.0) as usize;
    let fs = rate as f64;
    let mut out = vec![0.0; len];
    let base_f0 = rng.random_range(90.0..220.0);
    let mut pos = (rng.random_range(0.02..0.08) * fs) as usize;
    while pos < len {
        let dur = (rng.random_range(0.08..0.25) * fs) as usize;
        let end = (pos + dur).min(len);
        let f0_start = base_f0 * rng.random_range(0.85..1.15);
        let f0_end = f0_start * rng.random_range(0.8..1.2);
        let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2400.0), rng.random_range(2400.0..3500.0)];
        let harmonics = ((0.45 * fs / f0_start) as usize).min(40);
        let weights: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let f = h as f64 * f0_start;
                formants.iter().map(|&fc| 1.0 / (1.0 + ((f - fc) / 150.0).powi(2))).sum::<f64>() / h as f64
            })
            .collect();
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let fricative = rng.random_bool(0.3);
        let n = end - pos;
        let mut phase = 0.0;
        for i in 0..n {
            let t = i as f64 / n as f64;
            let env = (PI * t).sin().powf(0.7);
            let f0 = f0_start + (f0_end - f0_start) * t;
            phase += 2.0 * PI * f0 / fs;
            let mut v: f64 = weights.iter().zip(&phases).enumerate().map(|(h, (w, p))| w * ((h + 1) as f64 * phase + p).sin()).sum();
            if fricative && t < 0.2 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                v += 0.3 * noise * (1.0 - t / 0.2);
            }
            out[pos + i] += env * v;
        }
        pos = end + (rng.random_range(0.03..0.12) * fs) as usize;
    }
    TimeSignal::new(normalize_rms(out, TARGET_RMS), rate).expect("finite synthetic samples")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    /// A few steady tones over a low white floor.
    Tonal,
    /// Amplitude-modulated pink noise.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Tonal, NoiseKind::Babble];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Tonal => "tonal",
            NoiseKind::Babble => "babble",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind '{s}'")))
    }
}

/// Pink-ish noise from a bank of one-pole filters on white noise.
fn pink(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let v = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            v
        })
        .collect()
}

pub fn noise(kind: NoiseKind, len: usize, rate: u32, seed: u64) -> TimeSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = rate as f64;
    let samples = match kind {
        NoiseKind::White => (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseKind::Pink => pink(len, &mut rng),
        NoiseKind::Tonal => {
            let tones: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(200.0..3000.0), rng.random_range(0.0..2.0 * PI))).collect();
            (0..len)
                .map(|n| {
                    let t = n as f64 / fs;
                    let floor: f64 = StandardNormal.sample(&mut rng);
                    tones.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() + 0.1 * floor
                })
                .collect()
        }
        NoiseKind::Babble => {
            let base = pink(len, &mut rng);
            let rate_hz = rng.random_range(2.0..5.0);
            base.iter()
                .enumerate()
                .map(|(n, v)| v * (1.0 + 0.8 * (2.0 * PI * rate_hz * n as f64 / fs).sin()))
                .collect()
        }
    };
    TimeSignal::new(normalize_rms(samples, TARGET_RMS), rate).expect("finite synthetic samples")
}

#[derive(Debug, Clone)]
pub struct FixtureOptions {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub seconds: f64,
    pub snrs_db: Vec<f64>,
    pub seed: u64,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self { train_pairs: 10, test_pairs: 10, seconds: 1.0, snrs_db: vec![0.0, 5.0, 10.0, 15.0], seed: 0 }
    }
}

const TRAIN_SPEAKERS: [&str; 4] = ["p226", "p232", "p287", "p301"];
const TEST_SPEAKERS: [&str; 2] = ["p232", "p257"];

/// Writes a VoiceBank-style directory tree (`clean_trainset_wav`,
/// `noisy_trainset_wav`, `log_trainset.txt` and the test equivalents) at
/// 16 kHz. Returns the number of pairs written.
pub fn write_fixture(root: impl AsRef<Path>, options: &FixtureOptions) -> Result<usize> {
    let root = root.as_ref();
    if options.snrs_db.is_empty() {
        return Err(Error::Config("fixture needs at least one SNR".into()));
    }
    let mut written = 0;
    for (set, count, speakers, offset) in [
        ("train", options.train_pairs, &TRAIN_SPEAKERS[..], 0u64),
        ("test", options.test_pairs, &TEST_SPEAKERS[..], 1_000_000u64),
    ] {
        if count == 0 {
            continue;
        }
        let clean_dir = root.join(format!("clean_{set}set_wav"));
        let noisy_dir = root.join(format!("noisy_{set}set_wav"));
        fs::create_dir_all(&clean_dir)?;
        fs::create_dir_all(&noisy_dir)?;
        let mut log = String::new();
        for i in 0..count {
            let seed = options.seed.wrapping_mul(0x9E37_79B9).wrapping_add(offset + i as u64);
            let id = format!("{}_{:03}", speakers[i % speakers.len()], i + 1);
            let clean = speech_like(options.seconds, crate::ANALYSIS_RATE, seed);
            let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
            let snr = options.snrs_db[i % options.snrs_db.len()];
            let n = noise(kind, clean.len(), crate::ANALYSIS_RATE, seed ^ 0xA5A5);
            let noisy = clean.mix_at_snr(&n, snr)?;
            write_wav(clean_dir.join(format!("{id}.wav")), &clean, WavFormat::Float32)?;
            write_wav(noisy_dir.join(format!("{id}.wav")), &noisy, WavFormat::Float32)?;
            writeln!(log, "{id} {} {snr}", kind.as_str()).expect("write to string");
            written += 1;
        }
        fs::write(root.join(format!("log_{set}set.txt")), log)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{build_manifest, load_pair, CorpusLayout, Split};

    #[test]
    fn deterministic_and_normalized() {
        let a = speech_like(0.5, 16000, 3);
        assert_eq!(a, speech_like(0.5, 16000, 3));
        assert_ne!(a, speech_like(0.5, 16000, 4));
        assert_eq!(a.len(), 8000);
        let rms = (a.energy() / a.len() as f64).sqrt();
        assert!((rms - TARGET_RMS).abs() < 1e-12);
        for k in NoiseKind::ALL {
            let n = noise(k, 4000, 16000, 1);
            assert_eq!(n, noise(k, 4000, 16000, 1));
            assert!(((n.energy() / 4000.0).sqrt() - TARGET_RMS).abs() < 1e-12);
            assert_eq!(k.as_str().parse::<NoiseKind>().unwrap(), k);
        }
    }

    #[test]
    fn fixture_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let opts = FixtureOptions { train_pairs: 8, test_pairs: 3, seconds: 0.3, ..Default::default() };
        assert_eq!(write_fixture(dir.path(), &opts).unwrap(), 11);
        let test = build_manifest(dir.path(), CorpusLayout::Voicebank, Split::Test).unwrap();
        assert_eq!(test.len(), 3);
        let by_id = |id: &str| test.entries.iter().find(|e| e.id == id).unwrap();
        assert_eq!(by_id("p232_001").noise_label.as_deref(), Some("white"));
        assert_eq!(by_id("p257_002").snr_db, Some(5.0));
        let train = build_manifest(dir.path(), CorpusLayout::Voicebank, Split::Train).unwrap();
        let valid = build_manifest(dir.path(), CorpusLayout::Voicebank, Split::Valid).unwrap();
        assert_eq!((train.len(), valid.len()), (4, 4));
        let pair = load_pair(by_id("p232_003"), 16000).unwrap();
        let residual = pair.noisy.mix(&pair.clean.scaled(-1.0)).unwrap();
        let snr = 10.0 * (pair.clean.energy() / residual.energy()).log10();
        assert!((snr - 10.0).abs() < 1e-3, "{snr}");
    }
}
