//! Mean-squared-error distances between representations of a reference and a
//! degraded (or enhanced) signal: spectrogram `d_SG`, feature-encoder `d_FE`
//! and output-layer `d_OL`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{load_pair, DatasetManifest, TimeSignal, UtterancePair};
use crate::representations::{stft, Layer, ModelId, SsrBackend, StftParams};
use crate::{Error, Result, ANALYSIS_RATE};

/// Largest frame-count difference between two representations that is
/// truncated away rather than reported.
pub const MAX_FRAME_MISMATCH: usize = 2;

/// Marker written to CSV cells whose value is absent.
pub const ABSENT: &str = "NA";

/// How squared differences are aggregated over the `T x F` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over all elements; comparable across utterance lengths.
    #[default]
    Mean,
    /// Raw sum over all elements.
    Sum,
}

pub fn mse_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, reduction: Reduction) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean if a.is_empty() => 0.0,
        Reduction::Mean => sum / a.len() as f64,
    })
}

/// Truncates two representations to their common frame count, refusing
/// differences above [`MAX_FRAME_MISMATCH`].
pub fn align_frames<'a>(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>) -> Result<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)> {
    if a.ncols() != b.ncols() || a.nrows().abs_diff(b.nrows()) > MAX_FRAME_MISMATCH {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let t = a.nrows().min(b.nrows());
    Ok((a.slice_move(s![..t, ..]), b.slice_move(s![..t, ..])))
}

fn check_pair(s: &TimeSignal, x: &TimeSignal) -> Result<()> {
    s.require_rate(ANALYSIS_RATE)?;
    x.require_rate(ANALYSIS_RATE)?;
    if s.len() != x.len() {
        return Err(Error::ShapeMismatch(vec![s.len()], vec![x.len()]));
    }
    Ok(())
}

/// `d_SG`: MSE between magnitude spectrograms.
pub fn spectrogram_distance(s: &TimeSignal, x: &TimeSignal, params: &StftParams, reduction: Reduction) -> Result<f64> {
    check_pair(s, x)?;
    let a = stft(s, params)?;
    let b = stft(x, params)?;
    mse_distance(a.magnitude.view(), b.magnitude.view(), reduction)
}

/// `d_FE` or `d_OL`: MSE between the chosen layer's representations.
pub fn representation_distance(
    backend: &SsrBackend,
    layer: Layer,
    s: &TimeSignal,
    x: &TimeSignal,
    reduction: Reduction,
) -> Result<f64> {
    check_pair(s, x)?;
    let a = backend.extract(s, layer)?;
    let b = backend.extract(x, layer)?;
    let (a, b) = align_frames(a.values.view(), b.values.view())?;
    mse_distance(a, b, reduction)
}

/// Per-utterance distances plus, once joined, metric scores and MOS.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistanceRecord {
    pub utterance_id: String,
    pub d_sg: Option<f64>,
    pub d_fe: BTreeMap<ModelId, f64>,
    pub d_ol: BTreeMap<ModelId, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub mos: Option<f64>,
    /// Failure message when the utterance could not be processed.
    pub error: Option<String>,
}

impl DistanceRecord {
    /// Looks up a distance by column name (`d_sg`, `d_fe_hubert`, ...).
    pub fn distance(&self, name: &str) -> Option<f64> {
        if name == "d_sg" {
            return self.d_sg;
        }
        let (layer, model) = parse_distance_column(name)?;
        match layer {
            Layer::Fe => self.d_fe.get(&model).copied(),
            Layer::Ol => self.d_ol.get(&model).copied(),
        }
    }

    /// Looks up a correlation target: `mos` or a metric name.
    pub fn target(&self, name: &str) -> Option<f64> {
        if name == "mos" {
            self.mos
        } else {
            self.metrics.get(name).copied()
        }
    }

    pub fn distance_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_sg.is_some() {
            out.push("d_sg".to_string());
        }
        for model in ModelId::ALL {
            for (layer, map) in [(Layer::Fe, &self.d_fe), (Layer::Ol, &self.d_ol)] {
                if map.contains_key(&model) {
                    out.push(distance_column(layer, model));
                }
            }
        }
        out
    }
}

pub fn distance_column(layer: Layer, model: ModelId) -> String {
    format!("d_{}_{}", layer.as_str(), model.as_str())
}

fn parse_distance_column(name: &str) -> Option<(Layer, ModelId)> {
    let rest = name.strip_prefix("d_")?;
    let (layer, model) = rest.split_once('_')?;
    Some((layer.parse().ok()?, model.parse().ok()?))
}

#[derive(Debug, Clone, Default)]
pub struct DistanceOptions {
    pub stft: StftParams,
    pub reduction: Reduction,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

/// Distances for one pair. `d_SG` is always computed; each backend
/// contributes the requested layers.
pub fn pair_distances(
    pair: &UtterancePair,
    backends: &[&SsrBackend],
    layers: &[Layer],
    options: &DistanceOptions,
) -> Result<DistanceRecord> {
    let mut record = DistanceRecord {
        utterance_id: pair.id.clone(),
        d_sg: Some(spectrogram_distance(&pair.clean, &pair.noisy, &options.stft, options.reduction)?),
        mos: pair.mos,
        ..Default::default()
    };
    for backend in backends {
        for &layer in layers {
            let d = representation_distance(backend, layer, &pair.clean, &pair.noisy, options.reduction)?;
            let map = match layer {
                Layer::Fe => &mut record.d_fe,
                Layer::Ol => &mut record.d_ol,
            };
            map.insert(backend.model_id(), d);
        }
    }
    Ok(record)
}

fn failed(id: &str, mos: Option<f64>, err: Error) -> DistanceRecord {
    log::warn!("distance computation failed for {id}: {err}");
    DistanceRecord { utterance_id: id.to_string(), mos, error: Some(err.to_string()), ..Default::default() }
}

/// Distances for every manifest entry, ordered by id. A failing utterance
/// yields a record carrying its error instead of aborting the batch.
pub fn batch_distances(
    manifest: &DatasetManifest,
    backends: &[&SsrBackend],
    layers: &[Layer],
    options: &DistanceOptions,
) -> Result<Vec<DistanceRecord>> {
    if manifest.is_empty() {
        return Err(Error::EmptyResultSet(format!("manifest '{}' has no entries", manifest.name)));
    }
    let mut records = crate::with_workers(options.workers, || {
        manifest
            .entries
            .par_iter()
            .map(|entry| {
                load_pair(entry, ANALYSIS_RATE)
                    .and_then(|pair| pair_distances(&pair, backends, layers, options))
                    .unwrap_or_else(|e| failed(&entry.id, entry.mos, e))
            })
            .collect::<Vec<_>>()
    })?;
    records.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok(records)
}

/// As [`batch_distances`] for pairs already in memory.
pub fn batch_pair_distances(
    pairs: &[UtterancePair],
    backends: &[&SsrBackend],
    layers: &[Layer],
    options: &DistanceOptions,
) -> Result<Vec<DistanceRecord>> {
    if pairs.is_empty() {
        return Err(Error::EmptyResultSet("no pairs".into()));
    }
    let mut records = crate::with_workers(options.workers, || {
        pairs
            .par_iter()
            .map(|p| pair_distances(p, backends, layers, options).unwrap_or_else(|e| failed(&p.id, p.mos, e)))
            .collect::<Vec<_>>()
    })?;
    records.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_else(|| ABSENT.to_string())
}

fn parse_opt(cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell == ABSENT {
        return Ok(None);
    }
    cell.parse().map(Some).map_err(|_| Error::Manifest(format!("not a number: '{cell}'")))
}

/// Writes records as CSV: `utterance_id`, the distance columns present in
/// any record, the metric columns, `mos`, and `error`.
pub fn write_records_csv(path: impl AsRef<Path>, records: &[DistanceRecord]) -> Result<()> {
    let mut distance_cols: Vec<String> = Vec::new();
    let mut metric_cols: Vec<String> = Vec::new();
    for r in records {
        for d in r.distance_names() {
            if !distance_cols.contains(&d) {
                distance_cols.push(d);
            }
        }
        for m in r.metrics.keys() {
            if !metric_cols.contains(m) {
                metric_cols.push(m.clone());
            }
        }
    }
    if !distance_cols.contains(&"d_sg".to_string()) {
        distance_cols.insert(0, "d_sg".into());
    }
    metric_cols.sort();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["utterance_id".to_string()];
    header.extend(distance_cols.iter().cloned());
    header.extend(metric_cols.iter().cloned());
    header.push("mos".into());
    header.push("error".into());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.utterance_id.clone()];
        row.extend(distance_cols.iter().map(|c| fmt_opt(r.distance(c))));
        row.extend(metric_cols.iter().map(|c| fmt_opt(r.metrics.get(c).copied())));
        row.push(fmt_opt(r.mos));
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<DistanceRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let id_col = header
        .iter()
        .position(|h| h == "utterance_id" || h == "id")
        .ok_or_else(|| Error::Manifest(format!("{}: no utterance_id column", path.display())))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut rec = DistanceRecord { utterance_id: row[id_col].to_string(), ..Default::default() };
        for (i, name) in header.iter().enumerate() {
            if i == id_col {
                continue;
            }
            let cell = &row[i];
            if name == "error" {
                rec.error = (!cell.is_empty()).then(|| cell.to_string());
            } else if name == "mos" {
                rec.mos = parse_opt(cell)?;
            } else if name == "d_sg" {
                rec.d_sg = parse_opt(cell)?;
            } else if let Some((layer, model)) = parse_distance_column(name) {
                if let Some(v) = parse_opt(cell)? {
                    match layer {
                        Layer::Fe => rec.d_fe.insert(model, v),
                        Layer::Ol => rec.d_ol.insert(model, v),
                    };
                }
            } else if let Some(v) = parse_opt(cell)? {
                rec.metrics.insert(name.clone(), v);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut sum = 0.0;
        for t in 0..a.nrows() {
            for f in 0..a.ncols() {
                let d = a[[t, f]] - b[[t, f]];
                sum += d * d;
            }
        }
        sum / (a.nrows() * a.ncols()) as f64
    }

    #[test]
    fn hand_example() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[1.0, 2.0], [3.0, 5.0]];
        assert_eq!(mse_distance(a.view(), b.view(), Reduction::Mean).unwrap(), 0.25);
        assert_eq!(mse_distance(a.view(), b.view(), Reduction::Sum).unwrap(), 1.0);
        assert_eq!(mse_distance(a.view(), a.view(), Reduction::Mean).unwrap(), 0.0);
    }

    #[test]
    fn random_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((5, 7), |_| rng.random_range(-3.0..3.0));
        let b = Array2::from_shape_fn((5, 7), |_| rng.random_range(-3.0..3.0));
        let got = mse_distance(a.view(), b.view(), Reduction::Mean).unwrap();
        assert!((got - oracle(&a, &b)).abs() <= 1e-9 * oracle(&a, &b));
    }

    #[test]
    fn shape_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(matches!(mse_distance(a.view(), b.view(), Reduction::Mean), Err(Error::ShapeMismatch(..))));
    }

    #[test]
    fn frame_alignment() {
        let a = Array2::<f64>::ones((10, 4));
        let b = Array2::<f64>::ones((12, 4));
        let (x, y) = align_frames(a.view(), b.view()).unwrap();
        assert_eq!(x.nrows(), 10);
        assert_eq!(y.nrows(), 10);
        let c = Array2::<f64>::ones((13, 4));
        assert!(align_frames(a.view(), c.view()).is_err());
    }

    fn white(len: usize, seed: u64) -> TimeSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSignal::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn spectrogram_distance_identity_and_monotonicity() {
        let s = TimeSignal::new((0..16000).map(|n| 0.5 * (n as f64 * 0.1).sin()).collect(), 16000).unwrap();
        let noise = white(16000, 2);
        let p = StftParams::default();
        assert_eq!(spectrogram_distance(&s, &s, &p, Reduction::Mean).unwrap(), 0.0);
        let small = spectrogram_distance(&s, &s.mix(&noise.scaled(1e-4)).unwrap(), &p, Reduction::Mean).unwrap();
        let large = spectrogram_distance(&s, &s.mix(&noise.scaled(1e-2)).unwrap(), &p, Reduction::Mean).unwrap();
        assert!(0.0 < small && small < large);
        assert!(spectrogram_distance(&s, &s.truncated(100), &p, Reduction::Mean).is_err());
    }

    #[test]
    fn records_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut a = DistanceRecord { utterance_id: "a".into(), d_sg: Some(0.5), mos: Some(3.0), ..Default::default() };
        a.d_fe.insert(ModelId::Hubert, 1.25);
        a.metrics.insert("pesq".into(), 2.0);
        let b = DistanceRecord { utterance_id: "b".into(), error: Some("boom".into()), ..Default::default() };
        write_records_csv(&path, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("utterance_id,d_sg,d_fe_hubert,pesq,mos,error\n"));
        assert!(text.contains("b,NA,NA,NA,NA,boom"));
        assert_eq!(read_records_csv(&path).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_and_quadratic(
            vals in proptest::collection::vec(-10.0f64..10.0, 24),
            c in -5.0f64..5.0,
        ) {
            let a = Array2::from_shape_vec((3, 4), vals[..12].to_vec()).unwrap();
            let b = Array2::from_shape_vec((3, 4), vals[12..].to_vec()).unwrap();
            let d = mse_distance(a.view(), b.view(), Reduction::Mean).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, mse_distance(b.view(), a.view(), Reduction::Mean).unwrap());
            prop_assert_eq!(d == 0.0, a == b);
            let scaled = mse_distance((&a * c).view(), (&b * c).view(), Reduction::Mean).unwrap();
            prop_assert!((scaled - c * c * d).abs() <= 1e-9 * (1.0 + c * c * d));
        }
    }
}
