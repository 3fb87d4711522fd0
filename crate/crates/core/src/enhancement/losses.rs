//! Training losses on candle tensors. Each takes the clean waveform and the
//! resynthesized estimate as 1-D tensors and returns a scalar tensor that is
//! differentiable with respect to the estimate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::metrics::DEFAULT_SI_SDR_CEILING;
use crate::representations::diff::SpectralPlan;
use crate::representations::{Layer, ModelId, SsrBackend, StftParams};
use crate::{Error, Result, ANALYSIS_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossKind {
    Sg,
    Representation(Layer, ModelId),
    SiSdr,
    Stoi,
}

impl LossKind {
    pub fn backend(&self) -> Option<ModelId> {
        match self {
            LossKind::Representation(_, m) => Some(*m),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Sg => f.write_str("sg"),
            LossKind::Representation(l, m) => write!(f, "{}_{}", l.as_str(), m.as_str()),
            LossKind::SiSdr => f.write_str("sisdr"),
            LossKind::Stoi => f.write_str("stoi"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sg" => Ok(LossKind::Sg),
            "sisdr" => Ok(LossKind::SiSdr),
            "stoi" => Ok(LossKind::Stoi),
            _ => {
                let (layer, model) = s.split_once('_').ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))?;
                let layer = layer.parse::<Layer>().map_err(|_| Error::Config(format!("unknown loss '{s}'")))?;
                let model = model.parse::<ModelId>().map_err(|_| Error::Config(format!("unknown loss '{s}'")))?;
                Ok(LossKind::Representation(layer, model))
            }
        }
    }
}

impl TryFrom<String> for LossKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossKind> for String {
    fn from(k: LossKind) -> String {
        k.to_string()
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(a.dims().to_vec(), b.dims().to_vec()));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn check_lengths(clean: &Tensor, estimate: &Tensor) -> Result<()> {
    if clean.dims() != estimate.dims() || clean.rank() != 1 {
        return Err(Error::ShapeMismatch(clean.dims().to_vec(), estimate.dims().to_vec()));
    }
    Ok(())
}

/// Mean squared error between magnitude spectrograms.
pub fn loss_sg(plan: &SpectralPlan, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
    check_lengths(clean, estimate)?;
    mse(&plan.magnitude(&clean.detach())?, &plan.magnitude(estimate)?)
}

/// Mean squared error between representations of a frozen backend. The
/// estimate is cast to the backend precision and the result cast back.
pub fn loss_representation(backend: &SsrBackend, layer: Layer, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
    check_lengths(clean, estimate)?;
    let target = backend.forward(&clean.detach(), layer)?.detach();
    let out = backend.forward(estimate, layer)?;
    Ok(mse(&target, &out)?.to_dtype(estimate.dtype())?)
}

pub fn loss_fe(backend: &SsrBackend, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
    loss_representation(backend, Layer::Fe, clean, estimate)
}

pub fn loss_ol(backend: &SsrBackend, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
    loss_representation(backend, Layer::Ol, clean, estimate)
}

/// Negative SI-SDR with a soft ceiling:
/// `10·log10((‖e‖² + κ‖t‖²) / ‖t‖²)` with `κ = 10^(-ceiling/10)`, so the
/// minimum, reached at `ŝ = c·s`, is `-ceiling`.
pub fn loss_sisdr(clean: &Tensor, estimate: &Tensor, ceiling_db: f64) -> Result<Tensor> {
    check_lengths(clean, estimate)?;
    let s = clean.detach().to_dtype(estimate.dtype())?;
    let alpha = ((estimate * &s)?.sum_all()? / s.sqr()?.sum_all()?.to_scalar_f64()?)?;
    let target = s.broadcast_mul(&alpha)?;
    let target_energy = target.sqr()?.sum_all()?;
    let residual_energy = (estimate - &target)?.sqr()?.sum_all()?;
    let kappa = 10f64.powf(-ceiling_db / 10.0);
    let ratio = ((residual_energy + (&target_energy * kappa)?)? / target_energy)?;
    Ok((ratio.log()? * (10.0 / std::f64::consts::LN_10))?)
}

trait ScalarF64 {
    fn to_scalar_f64(&self) -> Result<f64>;
}

impl ScalarF64 for Tensor {
    fn to_scalar_f64(&self) -> Result<f64> {
        Ok(self.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// A differentiable intelligibility loss registered from outside the
/// toolkit.
pub trait StoiPlugin: Send + Sync {
    fn name(&self) -> &str;
    /// Loss between 16 kHz clean and estimate waveforms (1-D, equal length).
    fn loss(&self, clean: &Tensor, estimate: &Tensor) -> Result<Tensor>;
    /// Value at `estimate == clean`.
    fn minimum(&self) -> f64;
}

pub fn loss_stoi(plugin: Option<&dyn StoiPlugin>, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
    let plugin = plugin.ok_or_else(|| Error::PluginMissing("no differentiable STOI plugin registered; the stoi loss is unavailable".into()))?;
    check_lengths(clean, estimate)?;
    plugin.loss(&clean.detach(), estimate)
}

/// Approximation of a differentiable STOI: negative mean correlation of
/// one-third-octave band envelopes over 384 ms sliding segments, computed
/// on the analysis STFT. No clipping and no resampling to 10 kHz.
#[derive(Debug, Clone)]
pub struct EnvelopeCorrelation {
    params: StftParams,
    bands: usize,
    segment_frames: usize,
}

impl EnvelopeCorrelation {
    pub const NAME: &'static str = "envelope-correlation";

    pub fn new(params: StftParams) -> Self {
        let hop_s = params.hop(ANALYSIS_RATE) as f64 / ANALYSIS_RATE as f64;
        Self { params, bands: 15, segment_frames: ((0.384 / hop_s).round() as usize).max(2) }
    }

    /// `F x J` 0/1 matrix assigning bins to bands centred at 150·2^(k/3) Hz.
    fn band_matrix(&self, dtype: DType) -> Result<Tensor> {
        let n_bins = self.params.n_bins();
        let hz_per_bin = ANALYSIS_RATE as f64 / self.params.fft_size as f64;
        let mut m = vec![0.0f64; n_bins * self.bands];
        for k in 0..self.bands {
            let centre = 150.0 * 2f64.powf(k as f64 / 3.0);
            let (lo, hi) = (centre * 2f64.powf(-1.0 / 6.0), centre * 2f64.powf(1.0 / 6.0));
            for b in 0..n_bins {
                let f = b as f64 * hz_per_bin;
                if f >= lo && f < hi {
                    m[b * self.bands + k] = 1.0;
                }
            }
        }
        Ok(Tensor::from_vec(m, (n_bins, self.bands), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    fn envelopes(&self, plan: &SpectralPlan, x: &Tensor, bands: &Tensor) -> Result<Tensor> {
        let (re, im) = plan.stft(x)?;
        Ok(((re.sqr()? + im.sqr()?)?.matmul(bands)? + 1e-12)?.sqrt()?)
    }
}

impl StoiPlugin for EnvelopeCorrelation {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn loss(&self, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
        let dtype = estimate.dtype();
        let plan = SpectralPlan::new(&self.params, estimate.dim(0)?, dtype, estimate.device())?;
        let bands = self.band_matrix(dtype)?;
        let x = self.envelopes(&plan, &clean.to_dtype(dtype)?, &bands)?;
        let y = self.envelopes(&plan, estimate, &bands)?;
        let frames = plan.n_frames();
        let n = self.segment_frames.min(frames);
        let segments = frames - n + 1;
        let idx: Vec<u32> = (0..segments).flat_map(|s| (s..s + n).map(|t| t as u32)).collect();
        let idx = Tensor::from_vec(idx, segments * n, estimate.device())?;
        let seg = |e: &Tensor| -> Result<Tensor> {
            let e = e.index_select(&idx, 0)?.reshape((segments, n, self.bands))?;
            Ok(e.broadcast_sub(&e.mean_keepdim(1)?)?)
        };
        let (xs, ys) = (seg(&x)?, seg(&y)?);
        let sxy = (&xs * &ys)?.sum(1)?;
        let sxx = xs.sqr()?.sum(1)?;
        let syy = ys.sqr()?.sum(1)?;
        let corr = (sxy / ((sxx * syy)? + 1e-20)?.sqrt()?)?;
        Ok(corr.mean_all()?.neg()?)
    }

    fn minimum(&self) -> f64 {
        -1.0
    }
}

/// Backends and plugins the losses draw on.
#[derive(Clone, Default)]
pub struct LossContext {
    pub stft: StftParams,
    pub backends: BTreeMap<ModelId, Arc<SsrBackend>>,
    pub stoi: Option<Arc<dyn StoiPlugin>>,
    pub si_sdr_ceiling: Option<f64>,
}

/// A loss with its dependencies resolved.
#[derive(Clone)]
pub enum Loss {
    Sg,
    Representation { backend: Arc<SsrBackend>, layer: Layer },
    SiSdr { ceiling_db: f64 },
    Stoi(Arc<dyn StoiPlugin>),
}

impl fmt::Debug for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.kind().to_string())
    }
}

impl Loss {
    pub fn resolve(kind: LossKind, ctx: &LossContext) -> Result<Self> {
        Ok(match kind {
            LossKind::Sg => Loss::Sg,
            LossKind::Representation(layer, model) => {
                let backend = ctx
                    .backends
                    .get(&model)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("loss {kind} needs the {model} backend, which is not configured")))?;
                Loss::Representation { backend, layer }
            }
            LossKind::SiSdr => Loss::SiSdr { ceiling_db: ctx.si_sdr_ceiling.unwrap_or(DEFAULT_SI_SDR_CEILING) },
            LossKind::Stoi => Loss::Stoi(
                ctx.stoi
                    .clone()
                    .ok_or_else(|| Error::PluginMissing("no differentiable STOI plugin registered; the stoi loss is unavailable".into()))?,
            ),
        })
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Loss::Sg => LossKind::Sg,
            Loss::Representation { backend, layer } => LossKind::Representation(*layer, backend.model_id()),
            Loss::SiSdr { .. } => LossKind::SiSdr,
            Loss::Stoi(_) => LossKind::Stoi,
        }
    }

    /// Value at `estimate == clean`.
    pub fn minimum(&self) -> f64 {
        match self {
            Loss::Sg | Loss::Representation { .. } => 0.0,
            Loss::SiSdr { ceiling_db } => -ceiling_db,
            Loss::Stoi(p) => p.minimum(),
        }
    }

    /// Scalar loss. `plan` must match the signal length and estimate dtype.
    pub fn compute(&self, plan: &SpectralPlan, clean: &Tensor, estimate: &Tensor) -> Result<Tensor> {
        match self {
            Loss::Sg => loss_sg(plan, clean, estimate),
            Loss::Representation { backend, layer } => loss_representation(backend, *layer, clean, estimate),
            Loss::SiSdr { ceiling_db } => loss_sisdr(clean, estimate, *ceiling_db),
            Loss::Stoi(p) => loss_stoi(Some(p.as_ref()), clean, estimate),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representations::{load_backend, BackendOptions};
    use candle_core::{Device, Var};

    fn signal(len: usize, seed: u64) -> Tensor {
        let s = crate::synth::speech_like(len as f64 / 16000.0, 16000, seed);
        Tensor::from_slice(s.samples(), len, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar_f64().unwrap()
    }

    #[test]
    fn loss_names_round_trip() {
        for name in ["sg", "fe_hubert", "ol_hubert", "fe_xlsr", "ol_xlsr", "sisdr", "stoi"] {
            assert_eq!(name.parse::<LossKind>().unwrap().to_string(), name);
        }
        assert!("fe_wavlm".parse::<LossKind>().is_err());
        assert!("l1".parse::<LossKind>().is_err());
    }

    #[test]
    fn minima_at_identity() {
        let plan = SpectralPlan::new(&StftParams::default(), 3200, DType::F64, &Device::Cpu).unwrap();
        let s = signal(3200, 1);
        assert_eq!(scalar(&loss_sg(&plan, &s, &s).unwrap()), 0.0);
        assert!((scalar(&loss_sisdr(&s, &s, 60.0).unwrap()) + 60.0).abs() < 1e-9);
        assert!((scalar(&loss_sisdr(&s, &(&s * 0.5).unwrap(), 60.0).unwrap()) + 60.0).abs() < 1e-9);
        let plugin = EnvelopeCorrelation::new(StftParams::default());
        assert!((scalar(&plugin.loss(&s, &s).unwrap()) - plugin.minimum()).abs() < 1e-6);
    }

    #[test]
    fn stoi_without_plugin_is_config_error() {
        let s = signal(3200, 1);
        let err = loss_stoi(None, &s, &s).unwrap_err();
        assert!(err.is_config());
        assert!(matches!(Loss::resolve(LossKind::Stoi, &LossContext::default()), Err(Error::PluginMissing(_))));
        assert!(Loss::resolve("fe_hubert".parse().unwrap(), &LossContext::default()).unwrap_err().is_config());
    }

    #[test]
    fn sisdr_loss_tracks_metric() {
        let s = signal(3200, 2);
        let n = signal(3200, 9);
        let x = (&s + (&n * 0.5).unwrap()).unwrap();
        let loss = scalar(&loss_sisdr(&s, &x, 60.0).unwrap());
        let to_sig = |t: &Tensor| crate::audio_io::TimeSignal::new(t.to_vec1::<f64>().unwrap(), 16000).unwrap();
        let metric = crate::metrics::si_sdr(&to_sig(&s), &to_sig(&x)).unwrap();
        assert!((loss + metric).abs() < 1e-4, "{loss} vs {metric}");
    }

    /// Central differences on individual samples of the estimate.
    fn check_sample_gradient(f: impl Fn(&Tensor) -> Tensor, x: &[f64], picks: &[usize], h: f64, tol: f64) {
        let var = Var::from_slice(x, x.len(), &Device::Cpu).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for &i in picks {
            let mut plus = x.to_vec();
            plus[i] += h;
            let mut minus = x.to_vec();
            minus[i] -= h;
            let eval = |v: Vec<f64>| scalar(&f(&Tensor::from_vec(v, x.len(), &Device::Cpu).unwrap()));
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-12);
            assert!((g[i] - fd).abs() / denom < tol, "sample {i}: analytic {} vs numeric {fd}", g[i]);
        }
    }

    #[test]
    fn sample_gradients() {
        let plan = SpectralPlan::new(&StftParams::default(), 1600, DType::F64, &Device::Cpu).unwrap();
        let s = signal(1600, 3);
        let x: Vec<f64> = (&s + (signal(1600, 4) * 0.3).unwrap()).unwrap().to_vec1().unwrap();
        let picks = [10, 400, 801, 1599];
        check_sample_gradient(|e| loss_sg(&plan, &s, e).unwrap(), &x, &picks, 1e-6, 1e-5);
        check_sample_gradient(|e| loss_sisdr(&s, e, 60.0).unwrap(), &x, &picks, 1e-6, 1e-5);
        // Band envelopes near the onset are strongly curved; a smaller step
        // is needed for the difference quotient to converge.
        let plugin = EnvelopeCorrelation::new(StftParams::default());
        check_sample_gradient(|e| plugin.loss(&s, e).unwrap(), &x, &picks, 1e-7, 1e-3);
        let opts = BackendOptions { dtype: DType::F64, ..Default::default() };
        let b = load_backend(ModelId::Hubert, "synthetic:5:1", &opts).unwrap();
        check_sample_gradient(|e| loss_fe(&b, &s, e).unwrap(), &x, &picks, 1e-6, 1e-5);
        check_sample_gradient(|e| loss_ol(&b, &s, e).unwrap(), &x, &picks, 1e-6, 1e-5);
    }
}
