//! Self-supervised speech representation (SSSR) distances between clean and
//! degraded speech, their correlation with quality metrics, and their use as
//! training losses for a mask-based speech enhancement network.
//!
//! The crate is organised along the processing chain:
//!
//! - [`audio_io`]: WAV loading, band-limited resampling, corpus manifests.
//! - [`representations`]: STFT/overlap-add and pretrained SSSR backends.
//! - [`distances`]: spectrogram and representation MSE distances.
//! - [`metrics`]: SI-SDR and adapters to external PESQ/STOI/Composite evaluators.
//! - [`correlation`]: Pearson/Spearman analysis and reports.
//! - [`enhancement`]: the BLSTM mask network, losses and training loop.
//! - [`featviz`]: channel-sorted representation panels.
//! - [`config`]: declarative run configuration.
//! - [`synth`]: seeded synthetic speech, noise and corpus fixtures.

pub mod audio_io;
pub mod config;
pub mod correlation;
pub mod distances;
pub mod enhancement;
mod error;
pub mod featviz;
pub mod metrics;
mod plot;
pub mod representations;
pub mod synth;

pub use error::{Error, Result};

/// Sample rate every analysis and training path runs at.
pub const ANALYSIS_RATE: u32 = 16_000;

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
