//! Rational-ratio polyphase resampler.
//!
//! The prototype filter is a Kaiser-windowed sinc (beta 8.6) with
//! [`RESAMPLER_ZERO_CROSSINGS`] zero crossings on each side of the centre,
//! cut off at 0.95 of the lower of the two Nyquist frequencies. For a
//! decimation factor `d` this gives `2 * 32 * d / 0.95` taps per output
//! sample (about 202 for 48 kHz to 16 kHz). Each polyphase branch is scaled to
//! unit DC gain. Samples outside the signal are treated as zero.

use super::TimeSignal;
use crate::Result;

pub const RESAMPLER_ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 8.6;
const ROLLOFF: f64 = 0.95;

/// Precomputed polyphase filter bank for one `(from, to)` rate pair.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: u64,
    down: u64,
    /// Index of the first input sample each phase touches, relative to the
    /// integer part of the output position.
    first_tap: i64,
    phases: Vec<Vec<f64>>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

impl Resampler {
    pub fn new(from_rate: u32, to_rate: u32) -> Self {
        assert!(from_rate > 0 && to_rate > 0, "sample rates must be positive");
        let g = gcd(from_rate as u64, to_rate as u64);
        let up = to_rate as u64 / g;
        let down = from_rate as u64 / g;
        // Cutoff in cycles per input sample, relative to the input Nyquist.
        let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half_width = RESAMPLER_ZERO_CROSSINGS as f64 / cutoff;
        let first_tap = -(half_width.floor() as i64);
        let last_tap = half_width.ceil() as i64 + 1;
        let norm = bessel_i0(KAISER_BETA);

        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut taps: Vec<f64> = (first_tap..=last_tap)
                    .map(|j| {
                        let tau = frac - j as f64;
                        let r = tau / half_width;
                        if r.abs() >= 1.0 {
                            0.0
                        } else {
                            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                            cutoff * sinc(cutoff * tau) * w
                        }
                    })
                    .collect();
                let dc: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= dc);
                taps
            })
            .collect();
        Self { up, down, first_tap, phases }
    }

    /// Number of output samples produced for `len` input samples.
    pub fn output_len(&self, len: usize) -> usize {
        ((len as u128 * self.up as u128 + self.down as u128 / 2) / self.down as u128) as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.up == 1 && self.down == 1 {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let len = input.len() as i64;
        (0..n_out as u64)
            .map(|k| {
                let pos = k * self.down;
                let base = (pos / self.up) as i64;
                let taps = &self.phases[(pos % self.up) as usize];
                let start = base + self.first_tap;
                let mut acc = 0.0;
                for (i, &h) in taps.iter().enumerate() {
                    let n = start + i as i64;
                    if (0..len).contains(&n) {
                        acc += h * input[n as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Band-limited resampling to `target_rate`. The identity rate returns the
/// input unchanged.
pub fn resample(sig: &TimeSignal, target_rate: u32) -> Result<TimeSignal> {
    if target_rate == sig.sample_rate() {
        return Ok(sig.clone());
    }
    let out = Resampler::new(sig.sample_rate(), target_rate).process(sig.samples());
    TimeSignal::new(out, target_rate)
}
