use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::TimeSignal;
use crate::{Error, Result};

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

/// Reads a mono PCM (8/16/24/32-bit integer) or 32-bit float WAV file.
///
/// Integer samples are scaled to `[-1, 1]` by the full-scale value of their
/// bit depth; the native sample rate is kept.
pub fn load_audio(path: impl AsRef<Path>) -> Result<TimeSignal> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unsupported = |detail: String| Error::UnsupportedEncoding { path: path.to_path_buf(), detail };
    let mut reader = hound::WavReader::open(path).map_err(|e| unsupported(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| unsupported(e.to_string()))?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let full_scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<Result<_, _>>()
                .map_err(|e| unsupported(e.to_string()))?
        }
        (format, bits) => return Err(unsupported(format!("{format:?} with {bits} bits"))),
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    TimeSignal::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. PCM output is clipped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, signal: &TimeSignal, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::UnsupportedEncoding { path: path.to_path_buf(), detail: other.to_string() },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &v in signal.samples() {
        match format {
            WavFormat::Pcm16 => {
                let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(q).map_err(to_io)?;
            }
            WavFormat::Float32 => writer.write_sample(v as f32).map_err(to_io)?,
        }
    }
    writer.finalize().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &TimeSignal::zeros(16000, 16000), WavFormat::Pcm16).unwrap();
        let sig = load_audio(&path).unwrap();
        assert_eq!(sig.len(), 16000);
        assert_eq!(sig.sample_rate(), 16000);
        assert!(sig.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_matches_reference_writer() {
        // 0.5 s of 440 Hz at 48 kHz written by hound directly, at full scale.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let spec = WavSpec { channels: 1, sample_rate: 48000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        let ints: Vec<i16> = (0..24000)
            .map(|n| ((2.0 * std::f64::consts::PI * 440.0 * n as f64 / 48000.0).sin() * 32767.0).round() as i16)
            .collect();
        for &q in &ints {
            w.write_sample(q).unwrap();
        }
        w.finalize().unwrap();

        let sig = load_audio(&path).unwrap();
        assert_eq!(sig.len(), 24000);
        assert_eq!(sig.sample_rate(), 48000);
        for (a, &q) in sig.samples().iter().zip(&ints) {
            assert_eq!(*a, q as f64 / 32768.0);
        }
        let peak = sig.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-3);
    }

    #[test]
    fn float_wav_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let sig = TimeSignal::new(vec![0.25, -0.5, 0.125], 16000).unwrap();
        write_wav(&path, &sig, WavFormat::Float32).unwrap();
        assert_eq!(load_audio(&path).unwrap(), sig);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_audio(dir.path().join("nope.wav")), Err(Error::MissingFile(_))));

        let garbage = dir.path().join("garbage.wav");
        std::fs::write(&garbage, b"not a wav file at all").unwrap();
        assert!(matches!(load_audio(&garbage), Err(Error::UnsupportedEncoding { .. })));

        let empty = dir.path().join("empty.wav");
        write_wav(&empty, &TimeSignal::zeros(0, 16000), WavFormat::Pcm16).unwrap();
        assert!(matches!(load_audio(&empty), Err(Error::EmptyAudio(_))));

        let stereo = dir.path().join("stereo.wav");
        let spec = WavSpec { channels: 2, sample_rate: 16000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_audio(&stereo), Err(Error::UnsupportedEncoding { .. })));
    }
}
