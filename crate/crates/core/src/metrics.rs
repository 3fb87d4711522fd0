//! Evaluation metrics. SI-SDR is computed here; PESQ, STOI and the Composite
//! measure are delegated to registered external evaluators, and a metric whose
//! evaluator is missing is reported as absent rather than zero.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{load_audio, load_pair, resample, write_wav, DatasetManifest, TimeSignal, WavFormat};
use crate::distances::ABSENT;
use crate::{Error, Result, ANALYSIS_RATE};

/// Reported SI-SDR for a residual-free estimate, in dB.
pub const DEFAULT_SI_SDR_CEILING: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB, capped at
/// [`DEFAULT_SI_SDR_CEILING`].
pub fn si_sdr(reference: &TimeSignal, estimate: &TimeSignal) -> Result<f64> {
    si_sdr_with_ceiling(reference, estimate, DEFAULT_SI_SDR_CEILING)
}

/// SI-SDR: the estimate is projected onto the reference and the projected
/// energy is compared with the residual energy. An all-zero estimate yields
/// negative infinity.
pub fn si_sdr_with_ceiling(reference: &TimeSignal, estimate: &TimeSignal, ceiling: f64) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(vec![reference.len()], vec![estimate.len()]));
    }
    let s = reference.samples();
    let e = estimate.samples();
    let ref_energy: f64 = s.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidSignal("SI-SDR reference is all zeros".into()));
    }
    if e.iter().all(|&v| v == 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let alpha = s.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let target: f64 = alpha * alpha * ref_energy;
    let residual: f64 = s.iter().zip(e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    if residual == 0.0 {
        return Ok(ceiling);
    }
    Ok((10.0 * (target / residual).log10()).min(ceiling))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Pesq,
    Stoi,
    Csig,
    Cbak,
    Covl,
}

impl MetricKind {
    pub const EXTERNAL: [MetricKind; 5] = [MetricKind::Pesq, MetricKind::Stoi, MetricKind::Csig, MetricKind::Cbak, MetricKind::Covl];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Pesq => "pesq",
            MetricKind::Stoi => "stoi",
            MetricKind::Csig => "csig",
            MetricKind::Cbak => "cbak",
            MetricKind::Covl => "covl",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricKind::EXTERNAL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown metric '{s}'")))
    }
}

/// An intrusive evaluator backed by a reference implementation.
///
/// Implementations receive 16 kHz, equal-length signals (PESQ in wideband
/// mode) and return a score per metric they provide.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> String;
    fn provides(&self) -> Vec<MetricKind>;
    fn evaluate(&self, reference: &TimeSignal, estimate: &TimeSignal) -> Result<BTreeMap<MetricKind, f64>>;
}

/// Evaluators registered by name. The first registered provider of a metric
/// wins.
#[derive(Clone, Default)]
pub struct MetricRegistry {
    evaluators: Vec<Arc<dyn Evaluator>>,
}

impl fmt::Debug for MetricRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.evaluators.iter().map(|e| e.name().to_string())).finish()
    }
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, evaluator: Arc<dyn Evaluator>) {
        self.evaluators.push(evaluator);
    }

    pub fn provider(&self, metric: MetricKind) -> Option<&Arc<dyn Evaluator>> {
        self.evaluators.iter().find(|e| e.provides().contains(&metric))
    }

    /// Evaluator name to version, for run metadata.
    pub fn versions(&self) -> BTreeMap<String, String> {
        self.evaluators.iter().map(|e| (e.name().to_string(), e.version())).collect()
    }

    fn score(&self, metric: MetricKind, reference: &TimeSignal, estimate: &TimeSignal) -> Option<f64> {
        let Some(eval) = self.provider(metric) else {
            log::warn!("no evaluator registered for {metric}; reporting it as absent");
            return None;
        };
        match eval.evaluate(reference, estimate) {
            Ok(scores) => scores.get(&metric).copied().filter(|v| v.is_finite()),
            Err(e) => {
                log::warn!("{} failed on {metric}: {e}", eval.name());
                None
            }
        }
    }
}

fn check_inputs(reference: &TimeSignal, estimate: &TimeSignal) -> Result<()> {
    reference.require_rate(ANALYSIS_RATE)?;
    estimate.require_rate(ANALYSIS_RATE)?;
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(vec![reference.len()], vec![estimate.len()]));
    }
    Ok(())
}

pub fn pesq_score(registry: &MetricRegistry, reference: &TimeSignal, estimate: &TimeSignal) -> Result<Option<f64>> {
    check_inputs(reference, estimate)?;
    Ok(registry.score(MetricKind::Pesq, reference, estimate))
}

pub fn stoi_score(registry: &MetricRegistry, reference: &TimeSignal, estimate: &TimeSignal) -> Result<Option<f64>> {
    check_inputs(reference, estimate)?;
    Ok(registry.score(MetricKind::Stoi, reference, estimate))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeScores {
    pub csig: f64,
    pub cbak: f64,
    pub covl: f64,
}

pub fn composite_scores(registry: &MetricRegistry, reference: &TimeSignal, estimate: &TimeSignal) -> Result<Option<CompositeScores>> {
    check_inputs(reference, estimate)?;
    let get = |m| registry.score(m, reference, estimate);
    Ok(match (get(MetricKind::Csig), get(MetricKind::Cbak), get(MetricKind::Covl)) {
        (Some(csig), Some(cbak), Some(covl)) => Some(CompositeScores { csig, cbak, covl }),
        _ => None,
    })
}

/// One evaluated utterance. `None` marks a metric whose evaluator is absent
/// or failed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationRow {
    pub utterance_id: String,
    pub pesq: Option<f64>,
    pub stoi: Option<f64>,
    pub csig: Option<f64>,
    pub cbak: Option<f64>,
    pub covl: Option<f64>,
    pub si_sdr: Option<f64>,
}

impl EvaluationRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "pesq" => self.pesq,
            "stoi" => self.stoi,
            "csig" => self.csig,
            "cbak" => self.cbak,
            "covl" => self.covl,
            "si_sdr" => self.si_sdr,
            _ => None,
        }
    }

    pub const COLUMNS: [&'static str; 6] = ["pesq", "stoi", "csig", "cbak", "covl", "si_sdr"];
}

/// Evaluates one estimate against its reference. Each evaluator is invoked
/// once for all the metrics it provides.
pub fn evaluate_utterance(
    registry: &MetricRegistry,
    id: &str,
    reference: &TimeSignal,
    estimate: &TimeSignal,
    si_sdr_ceiling: f64,
) -> EvaluationRow {
    let mut row = EvaluationRow { utterance_id: id.to_string(), ..Default::default() };
    if let Err(e) = check_inputs(reference, estimate) {
        log::warn!("{id}: cannot evaluate: {e}");
        return row;
    }
    row.si_sdr = si_sdr_with_ceiling(reference, estimate, si_sdr_ceiling)
        .map_err(|e| log::warn!("{id}: SI-SDR undefined: {e}"))
        .ok();

    let mut scores: BTreeMap<MetricKind, f64> = BTreeMap::new();
    let mut called: Vec<&str> = Vec::new();
    for metric in MetricKind::EXTERNAL {
        let Some(eval) = registry.provider(metric) else {
            continue;
        };
        if called.contains(&eval.name()) {
            continue;
        }
        called.push(eval.name());
        match eval.evaluate(reference, estimate) {
            Ok(s) => {
                for (k, v) in s {
                    if v.is_finite() && registry.provider(k).is_some_and(|p| p.name() == eval.name()) {
                        scores.insert(k, v);
                    }
                }
            }
            Err(e) => log::warn!("{id}: evaluator {} failed: {e}", eval.name()),
        }
    }
    row.pesq = scores.get(&MetricKind::Pesq).copied();
    row.stoi = scores.get(&MetricKind::Stoi).copied();
    row.csig = scores.get(&MetricKind::Csig).copied();
    row.cbak = scores.get(&MetricKind::Cbak).copied();
    row.covl = scores.get(&MetricKind::Covl).copied();
    row
}

/// Evaluates every manifest entry. With `estimates_dir`, the estimate for
/// entry `id` is `<estimates_dir>/<id>.wav`; otherwise the noisy signal is
/// scored against the clean one.
pub fn evaluate_manifest(
    registry: &MetricRegistry,
    manifest: &DatasetManifest,
    estimates_dir: Option<&Path>,
    si_sdr_ceiling: f64,
) -> Result<Vec<EvaluationRow>> {
    if manifest.is_empty() {
        return Err(Error::EmptyResultSet(format!("manifest '{}' has no entries", manifest.name)));
    }
    let mut rows: Vec<EvaluationRow> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let loaded = load_pair(entry, ANALYSIS_RATE).and_then(|pair| {
                let estimate = match estimates_dir {
                    None => pair.noisy.clone(),
                    Some(dir) => {
                        let est = resample(&load_audio(dir.join(format!("{}.wav", entry.id)))?, ANALYSIS_RATE)?;
                        if est.len().abs_diff(pair.clean.len()) > 0 {
                            est.truncated(pair.clean.len())
                        } else {
                            est
                        }
                    }
                };
                Ok((pair, estimate))
            });
            match loaded {
                Ok((pair, est)) if est.len() == pair.clean.len() => {
                    evaluate_utterance(registry, &entry.id, &pair.clean, &est, si_sdr_ceiling)
                }
                Ok(_) => {
                    log::warn!("{}: estimate shorter than reference", entry.id);
                    EvaluationRow { utterance_id: entry.id.clone(), ..Default::default() }
                }
                Err(e) => {
                    log::warn!("{}: {e}", entry.id);
                    EvaluationRow { utterance_id: entry.id.clone(), ..Default::default() }
                }
            }
        })
        .collect();
    rows.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok(rows)
}

/// Column means over the rows where each metric is present.
pub fn mean_row(rows: &[EvaluationRow]) -> BTreeMap<&'static str, Option<f64>> {
    EvaluationRow::COLUMNS
        .iter()
        .map(|&c| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(c)).filter(|v| v.is_finite()).collect();
            (c, (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

pub fn write_rows_csv(path: impl AsRef<Path>, rows: &[EvaluationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["utterance_id"];
    header.extend(EvaluationRow::COLUMNS);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.utterance_id.clone()];
        rec.extend(
            EvaluationRow::COLUMNS
                .iter()
                .map(|c| r.get(c).map(|v| v.to_string()).unwrap_or_else(|| ABSENT.to_string())),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads any CSV with an `utterance_id` (or `id`) column into per-id maps of
/// numeric columns; absent cells are skipped.
pub fn read_metric_table(path: impl AsRef<Path>) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
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
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        let values = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col)
            .filter_map(|(i, h)| row[i].trim().parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| (h.clone(), v)))
            .collect();
        out.insert(row[id_col].to_string(), values);
    }
    Ok(out)
}

/// Runs an external program per utterance.
///
/// Protocol: `<program> <args...> <reference.wav> <estimate.wav>` must print a
/// JSON object mapping metric names to numbers on stdout;
/// `<program> <args...> --version` prints a version string.
#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    name: String,
    program: PathBuf,
    args: Vec<String>,
    metrics: Vec<MetricKind>,
}

impl ExternalEvaluator {
    pub fn new(name: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>, metrics: Vec<MetricKind>) -> Self {
        Self { name: name.into(), program: program.into(), args, metrics }
    }

    /// Whether the program can be launched at all.
    pub fn is_available(&self) -> bool {
        Command::new(&self.program).args(&self.args).arg("--version").output().is_ok_and(|o| o.status.success())
    }
}

impl Evaluator for ExternalEvaluator {
    fn name(&self) -> &str {
        &self.name
    }

    fn version(&self) -> String {
        Command::new(&self.program)
            .args(&self.args)
            .arg("--version")
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
            .unwrap_or_else(|| "unavailable".into())
    }

    fn provides(&self) -> Vec<MetricKind> {
        self.metrics.clone()
    }

    fn evaluate(&self, reference: &TimeSignal, estimate: &TimeSignal) -> Result<BTreeMap<MetricKind, f64>> {
        let dir = tempfile::tempdir()?;
        let ref_path = dir.path().join("reference.wav");
        let est_path = dir.path().join("estimate.wav");
        write_wav(&ref_path, reference, WavFormat::Float32)?;
        write_wav(&est_path, estimate, WavFormat::Float32)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&ref_path)
            .arg(&est_path)
            .output()
            .map_err(|e| Error::Evaluator(format!("{}: cannot launch {}: {e}", self.name, self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Evaluator(format!(
                "{} exited with {}: {}",
                self.name,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let parsed: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&out.stdout)?;
        Ok(parsed
            .into_iter()
            .filter_map(|(k, v)| Some((k.parse::<MetricKind>().ok()?, v.as_f64()?)))
            .filter(|(k, _)| self.metrics.contains(k))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> TimeSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSignal::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn identical_signals_hit_ceiling() {
        let s = noise(1000, 1);
        assert_eq!(si_sdr(&s, &s).unwrap(), DEFAULT_SI_SDR_CEILING);
        assert_eq!(si_sdr_with_ceiling(&s, &s, 40.0).unwrap(), 40.0);
        assert_eq!(si_sdr(&s, &s.scaled(0.3)).unwrap(), si_sdr(&s, &s).unwrap());
    }

    #[test]
    fn scale_invariance() {
        let s = noise(4000, 2);
        let est = s.mix(&noise(4000, 3).scaled(0.2)).unwrap();
        let base = si_sdr(&s, &est).unwrap();
        for a in [0.1, 1.0, 10.0] {
            assert!((si_sdr(&s, &est.scaled(a)).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_cases() {
        let s = noise(100, 4);
        let z = TimeSignal::zeros(100, 16000);
        assert!(si_sdr(&z, &s).is_err());
        assert_eq!(si_sdr(&s, &z).unwrap(), f64::NEG_INFINITY);
        assert!(si_sdr(&s, &s.truncated(50)).is_err());
    }

    #[test]
    fn monotone_in_noise_level() {
        let s = noise(4000, 5);
        let n = noise(4000, 6);
        let mut last = f64::INFINITY;
        for g in [0.01, 0.1, 0.3, 1.0, 3.0] {
            let v = si_sdr(&s, &s.mix(&n.scaled(g)).unwrap()).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    struct FixedEvaluator;
    impl Evaluator for FixedEvaluator {
        fn name(&self) -> &str {
            "fixed"
        }
        fn version(&self) -> String {
            "1.0".into()
        }
        fn provides(&self) -> Vec<MetricKind> {
            vec![MetricKind::Stoi, MetricKind::Pesq]
        }
        fn evaluate(&self, r: &TimeSignal, e: &TimeSignal) -> Result<BTreeMap<MetricKind, f64>> {
            let same = r == e;
            Ok([(MetricKind::Stoi, if same { 1.0 } else { 0.5 }), (MetricKind::Pesq, 2.5)].into())
        }
    }

    #[test]
    fn absent_evaluators_are_explicit() {
        let s = noise(1600, 7);
        let empty = MetricRegistry::new();
        assert_eq!(pesq_score(&empty, &s, &s).unwrap(), None);
        let row = evaluate_utterance(&empty, "u", &s, &s, 60.0);
        assert_eq!(row.pesq, None);
        assert_eq!(row.si_sdr, Some(60.0));

        let mut reg = MetricRegistry::new();
        reg.register(Arc::new(FixedEvaluator));
        assert_eq!(stoi_score(&reg, &s, &s).unwrap(), Some(1.0));
        let row = evaluate_utterance(&reg, "u", &s, &s, 60.0);
        assert_eq!((row.stoi, row.pesq, row.csig), (Some(1.0), Some(2.5), None));
        assert_eq!(composite_scores(&reg, &s, &s).unwrap(), None);
        assert_eq!(reg.versions().get("fixed").map(String::as_str), Some("1.0"));
    }

    #[cfg(unix)]
    #[test]
    fn external_evaluator_protocol() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("eval.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\nif [ \"$1\" = \"--version\" ]; then echo fake-0.1; exit 0; fi\n\
             test -f \"$1\" && test -f \"$2\" || exit 3\n\
             echo '{\"pesq\": 3.25, \"stoi\": 0.9, \"csig\": 4.0, \"cbak\": 3.0, \"covl\": 3.5, \"other\": 1}'\n",
        )
        .unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        let eval = ExternalEvaluator::new("fake", &script, vec![], MetricKind::EXTERNAL.to_vec());
        assert!(eval.is_available());
        assert_eq!(eval.version(), "fake-0.1");
        let mut reg = MetricRegistry::new();
        reg.register(Arc::new(eval));
        let s = noise(1600, 8);
        let c = composite_scores(&reg, &s, &s).unwrap().unwrap();
        assert_eq!((c.csig, c.cbak, c.covl), (4.0, 3.0, 3.5));
        let row = evaluate_utterance(&reg, "u", &s, &s, 60.0);
        assert_eq!(row.pesq, Some(3.25));

        let missing = ExternalEvaluator::new("gone", dir.path().join("nope"), vec![], vec![MetricKind::Pesq]);
        assert!(!missing.is_available());
        assert!(missing.evaluate(&s, &s).is_err());
    }

    #[test]
    fn rows_csv_marks_absent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = EvaluationRow { utterance_id: "a".into(), stoi: Some(0.5), si_sdr: Some(3.0), ..Default::default() };
        write_rows_csv(&p, &[row]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "utterance_id,pesq,stoi,csig,cbak,covl,si_sdr\na,NA,0.5,NA,NA,NA,3\n");
        let table = read_metric_table(&p).unwrap();
        assert_eq!(table["a"].get("stoi"), Some(&0.5));
        assert_eq!(table["a"].get("pesq"), None);
    }
}
