//! Corpus manifests.
//!
//! Supported directory conventions:
//!
//! `voicebank` (pairs matched by identical file name):
//! - `<root>/clean_{train,test}set*_wav/` + `<root>/noisy_{train,test}set*_wav/`
//!   (the VoiceBank-DEMAND distribution), optionally with a
//!   `<root>/log_{train,test}set*.txt` file of `<id> <noise> <snr>` lines;
//! - otherwise `<root>/<split>/{clean,noisy}/`;
//! - otherwise `<root>/{clean,noisy}/`.
//!
//! The corpus ships no validation split, so `valid` is carved out of the
//! training pairs by speaker prefix (`p226_001` belongs to `p226`).
//!
//! `nisqa`: one or more `*_file.csv` label files (or `labels.csv`) in `<root>`
//! with columns `filepath_ref`, `filepath_deg` and `mos`. Paths are resolved
//! against `<root>` first and then its parent.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{load_audio, resample, UtterancePair};
use crate::{Error, Result};

/// Speakers held out of the VoiceBank-DEMAND training set for validation.
pub const DEFAULT_VALID_SPEAKERS: [&str; 2] = ["p226", "p287"];

/// Largest clean/noisy length difference silently truncated away.
pub const MAX_PAIR_MISMATCH_SECONDS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusLayout {
    Voicebank,
    Nisqa,
}

impl FromStr for CorpusLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voicebank" => Ok(CorpusLayout::Voicebank),
            "nisqa" => Ok(CorpusLayout::Nisqa),
            other => Err(Error::UnknownLayout(other.to_string())),
        }
    }
}

/// One row of a manifest: file references, not loaded audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: PathBuf,
    pub noisy_path: PathBuf,
    pub snr_db: Option<f64>,
    pub noise_label: Option<String>,
    pub mos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub valid_speakers: Vec<String>,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self { valid_speakers: DEFAULT_VALID_SPEAKERS.iter().map(|s| s.to_string()).collect() }
    }
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, split: Split, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id '{}'", e.id)));
            }
        }
        Ok(Self { name: name.into(), split, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenates manifests of the same split (e.g. several NISQA test sets).
    pub fn merge(name: impl Into<String>, parts: Vec<DatasetManifest>) -> Result<Self> {
        let split = parts.first().map(|m| m.split).ok_or_else(|| Error::EmptyResultSet("no manifests to merge".into()))?;
        if parts.iter().any(|m| m.split != split) {
            return Err(Error::Manifest("cannot merge manifests of different splits".into()));
        }
        Self::new(name, split, parts.into_iter().flat_map(|m| m.entries).collect())
    }

    /// Writes the manifest as CSV with columns
    /// `id,clean_path,noisy_path,snr_db,noise_label,mos`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let entries = r.deserialize().collect::<Result<Vec<ManifestEntry>, _>>()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, split, entries)
    }
}

/// Builds a manifest with the default validation speakers.
pub fn build_manifest(root: impl AsRef<Path>, layout: CorpusLayout, split: Split) -> Result<DatasetManifest> {
    build_manifest_with(root, layout, split, &ManifestOptions::default())
}

pub fn build_manifest_with(
    root: impl AsRef<Path>,
    layout: CorpusLayout,
    split: Split,
    options: &ManifestOptions,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let entries = match layout {
        CorpusLayout::Voicebank => voicebank_entries(root, split, options)?,
        CorpusLayout::Nisqa => nisqa_entries(root)?,
    };
    if entries.is_empty() {
        return Err(Error::EmptyResultSet(format!("no {split} pairs under {}", root.display())));
    }
    for e in &entries {
        for p in [&e.clean_path, &e.noisy_path] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
    }
    let name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into());
    DatasetManifest::new(name, split, entries)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

fn wav_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(sorted_dir(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .filter_map(|p| Some((p.file_name()?.to_string_lossy().into_owned(), p)))
        .collect())
}

fn find_prefixed(root: &Path, prefix: &str, suffix: &str) -> Result<Option<PathBuf>> {
    Ok(sorted_dir(root)?.into_iter().find(|p| {
        p.file_name()
            .map(|n| n.to_string_lossy())
            .is_some_and(|n| n.starts_with(prefix) && n.ends_with(suffix))
    }))
}

fn speaker_of(id: &str) -> &str {
    id.split('_').next().unwrap_or(id)
}

fn voicebank_entries(root: &Path, split: Split, options: &ManifestOptions) -> Result<Vec<ManifestEntry>> {
    let set = match split {
        Split::Train | Split::Valid => "train",
        Split::Test => "test",
    };
    let (clean_dir, noisy_dir, log_file) = if let (Some(c), Some(n)) = (
        find_prefixed(root, &format!("clean_{set}set"), "_wav")?,
        find_prefixed(root, &format!("noisy_{set}set"), "_wav")?,
    ) {
        (c, n, find_prefixed(root, &format!("log_{set}set"), ".txt")?)
    } else if root.join(split.to_string()).join("clean").is_dir() {
        let base = root.join(split.to_string());
        (base.join("clean"), base.join("noisy"), None)
    } else {
        (root.join("clean"), root.join("noisy"), None)
    };
    if !clean_dir.is_dir() || !noisy_dir.is_dir() {
        return Ok(Vec::new());
    }
    let labels = match log_file {
        Some(p) => read_noise_log(&p)?,
        None => HashMap::new(),
    };

    let clean = wav_files(&clean_dir)?;
    let noisy = wav_files(&noisy_dir)?;
    let mut entries = Vec::new();
    for (name, noisy_path) in noisy {
        let Some(clean_path) = clean.get(&name) else {
            log::warn!("no clean counterpart for {}", noisy_path.display());
            continue;
        };
        let id = name.trim_end_matches(".wav").trim_end_matches(".WAV").to_string();
        let held_out = options.valid_speakers.iter().any(|s| s == speaker_of(&id));
        let keep = match split {
            Split::Train => !held_out,
            Split::Valid => held_out,
            Split::Test => true,
        };
        if !keep {
            continue;
        }
        let (noise_label, snr_db) = labels.get(&id).cloned().unwrap_or((None, None));
        entries.push(ManifestEntry {
            id,
            clean_path: clean_path.clone(),
            noisy_path,
            snr_db,
            noise_label,
            mos: None,
        });
    }
    Ok(entries)
}

type NoiseLabels = HashMap<String, (Option<String>, Option<f64>)>;

fn read_noise_log(path: &Path) -> Result<NoiseLabels> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|line| {
            let mut parts = line.split_whitespace();
            let id = parts.next()?.to_string();
            let label = parts.next().map(str::to_string);
            let snr = parts.next().and_then(|s| s.parse().ok());
            Some((id, (label, snr)))
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct NisqaRow {
    filepath_ref: String,
    filepath_deg: String,
    #[serde(alias = "mos_mean")]
    mos: Option<f64>,
}

fn nisqa_entries(root: &Path) -> Result<Vec<ManifestEntry>> {
    let label_files: Vec<PathBuf> = sorted_dir(root)?
        .into_iter()
        .filter(|p| {
            p.file_name().map(|n| n.to_string_lossy()).is_some_and(|n| n.ends_with("_file.csv") || n == "labels.csv")
        })
        .collect();
    if label_files.is_empty() {
        return Err(Error::LabelFileMissing(root.to_path_buf()));
    }
    let resolve = |rel: &str| -> PathBuf {
        let direct = root.join(rel);
        if direct.exists() {
            return direct;
        }
        root.parent().map(|p| p.join(rel)).filter(|p| p.exists()).unwrap_or(direct)
    };
    let mut entries = Vec::new();
    for file in label_files {
        let mut r = csv::Reader::from_path(&file)?;
        for row in r.deserialize::<NisqaRow>() {
            let row = row?;
            let noisy_path = resolve(&row.filepath_deg);
            let id = noisy_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.filepath_deg.clone());
            entries.push(ManifestEntry {
                id,
                clean_path: resolve(&row.filepath_ref),
                noisy_path,
                snr_db: None,
                noise_label: None,
                mos: row.mos,
            });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// Loads a manifest entry, resamples both sides to `rate`, and truncates a
/// small length mismatch away.
pub fn load_pair(entry: &ManifestEntry, rate: u32) -> Result<UtterancePair> {
    let clean = resample(&load_audio(&entry.clean_path)?, rate)?;
    let noisy = resample(&load_audio(&entry.noisy_path)?, rate)?;
    let diff = clean.len().abs_diff(noisy.len());
    if diff as f64 > MAX_PAIR_MISMATCH_SECONDS * rate as f64 {
        return Err(Error::PairLengthMismatch { id: entry.id.clone(), samples: diff });
    }
    let len = clean.len().min(noisy.len());
    let mut pair = UtterancePair::new(entry.id.clone(), clean.truncated(len), noisy.truncated(len))?;
    pair.snr_db = entry.snr_db;
    pair.noise_label = entry.noise_label.clone();
    pair.mos = entry.mos;
    Ok(pair)
}
