use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sssr_core::audio_io::{
    build_manifest_with, load_audio, load_pair, resample, write_wav, DatasetManifest, Split, TimeSignal, WavFormat,
    MAX_PAIR_MISMATCH_SECONDS,
};
use sssr_core::config::{RunConfig, RunMetadata};
use sssr_core::correlation::{attach_targets, correlation_report, export_scatter, n_grid_path, CorrelationReport};
use sssr_core::distances::{batch_distances, read_records_csv, write_records_csv};
use sssr_core::enhancement::{enhance, load_checkpoints, select_checkpoint, train, Checkpoint, TrainingContext};
use sssr_core::featviz::{build_panels, write_panels_png, write_permutation_csv};
use sssr_core::metrics::{evaluate_manifest, mean_row, read_metric_table, write_rows_csv};
use sssr_core::representations::SsrBackend;
use sssr_core::synth::{write_fixture, FixtureOptions};
use sssr_core::{with_workers, Error, Result, ANALYSIS_RATE};

#[derive(Parser)]
#[command(name = "sssr", version, about = "SSSR distances, correlation analysis and mask-based enhancement")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Corpus root (`data.root`).
    #[arg(long)]
    root: Option<PathBuf>,
    /// `voicebank` or `nisqa` (`data.layout`).
    #[arg(long)]
    layout: Option<String>,
    /// `train`, `valid` or `test` (`data.split`).
    #[arg(long)]
    split: Option<String>,
    /// Prebuilt manifest CSV (`data.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration and its hash.
    Config,
    /// Write a synthetic VoiceBank-style corpus.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        train_pairs: usize,
        #[arg(long, default_value_t = 10)]
        test_pairs: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        /// Defaults to `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a manifest CSV from a corpus directory.
    Manifest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-utterance spectrogram and representation distances.
    Distances {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Objective metrics of noisy (or enhanced) speech against clean.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Directory of `<id>.wav` estimates; scores the noisy files if unset.
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate distances with metrics and MOS.
    Correlate {
        /// Distance CSV from `sssr distances`.
        #[arg(long)]
        distances: PathBuf,
        /// Per-utterance metric CSV(s) with an `utterance_id` column.
        #[arg(long)]
        metrics: Vec<PathBuf>,
        /// Comma-separated targets (`evaluation.targets`).
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        /// Scatter exports as `distance:target`.
        #[arg(long)]
        scatter: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the mask network.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long)]
        valid_manifest: Option<PathBuf>,
        /// `training.loss`.
        #[arg(long)]
        loss: Option<String>,
        /// `training.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance noisy files with a trained checkpoint.
    Enhance {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint metadata JSON, or a training directory (best epoch).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single noisy WAV instead of a manifest.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectrogram and channel-sorted feature panels for one pair.
    Visualize {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the channel permutations as CSV.
        #[arg(long)]
        permutation_csv: Option<PathBuf>,
    },
}

fn toml_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn toml_path(p: &Path) -> String {
    toml_str(&p.to_string_lossy())
}

fn data_overrides(d: &DataArgs, out: &mut Vec<String>) {
    if let Some(r) = &d.root {
        out.push(format!("data.root={}", toml_path(r)));
    }
    if let Some(l) = &d.layout {
        out.push(format!("data.layout={}", toml_str(l)));
    }
    if let Some(s) = &d.split {
        out.push(format!("data.split={}", toml_str(s)));
    }
    if let Some(m) = &d.manifest {
        out.push(format!("data.manifest={}", toml_path(m)));
    }
}

/// Flags that mirror configuration keys, applied after `--set`.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.overrides.clone();
    if let Some(d) = &cli.out_dir {
        o.push(format!("output.dir={}", toml_path(d)));
    }
    match &cli.command {
        Command::Manifest { data, .. } | Command::Distances { data, .. } | Command::Evaluate { data, .. } | Command::Enhance { data, .. } => {
            data_overrides(data, &mut o)
        }
        Command::Train { data, train_manifest, valid_manifest, loss, epochs, seed } => {
            data_overrides(data, &mut o);
            if let Some(p) = train_manifest {
                o.push(format!("data.train_manifest={}", toml_path(p)));
            }
            if let Some(p) = valid_manifest {
                o.push(format!("data.valid_manifest={}", toml_path(p)));
            }
            if let Some(l) = loss {
                o.push(format!("training.loss={}", toml_str(l)));
            }
            if let Some(e) = epochs {
                o.push(format!("training.epochs={e}"));
            }
            if let Some(s) = seed {
                o.push(format!("training.seed={s}"));
            }
        }
        _ => {}
    }
    o
}

fn manifest_for(cfg: &RunConfig, split: Split, explicit: Option<&Path>) -> Result<DatasetManifest> {
    if let Some(p) = explicit.or(cfg.data.manifest.as_deref()) {
        return DatasetManifest::read_csv(p, split);
    }
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("no data.root or data.manifest configured".into()))?;
    build_manifest_with(root, cfg.data.layout, split, &cfg.data.manifest_options())
}

fn output_path(cfg: &RunConfig, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| cfg.output.dir.join(default_name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn backend_refs(backends: &[Arc<SsrBackend>]) -> Vec<&SsrBackend> {
    backends.iter().map(|b| b.as_ref()).collect()
}

fn load_backends(cfg: &RunConfig) -> Result<Vec<Arc<SsrBackend>>> {
    if cfg.backends.models.is_empty() {
        log::info!("no backends configured: spectrogram-only mode");
    }
    cfg.backends.load()
}

fn print_report(report: &CorrelationReport) {
    print!("{:<14}", "distance");
    for t in &report.targets {
        print!(" {:>20}", format!("{t} (spearman/pearson)"));
    }
    println!();
    let f = |v: Option<f64>| v.map(|v| format!("{v:+.3}")).unwrap_or_else(|| "  NA  ".into());
    for (d, row) in report.distances.iter().zip(&report.cells) {
        print!("{d:<14}");
        for c in row {
            print!(" {:>20}", format!("{} / {}", f(c.spearman), f(c.pearson)));
        }
        println!();
    }
}

/// Aligns a loose pair the same way corpus pairs are aligned.
fn aligned_pair(clean: &Path, noisy: &Path) -> Result<(TimeSignal, TimeSignal)> {
    let c = resample(&load_audio(clean)?, ANALYSIS_RATE)?;
    let n = resample(&load_audio(noisy)?, ANALYSIS_RATE)?;
    let diff = c.len().abs_diff(n.len());
    if diff as f64 > MAX_PAIR_MISMATCH_SECONDS * ANALYSIS_RATE as f64 {
        return Err(Error::PairLengthMismatch { id: noisy.display().to_string(), samples: diff });
    }
    let len = c.len().min(n.len());
    Ok((c.truncated(len), n.truncated(len)))
}

fn run(cli: Cli) -> Result<()> {
    let overrides = flag_overrides(&cli);
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let workers = cli.workers;
    let mut meta = RunMetadata::new(command_name(&cli.command), &cfg);
    if let Some(c) = &cli.config {
        meta.inputs.push(c.clone());
    }

    match &cli.command {
        Command::Config => {
            println!("# config hash: {}", cfg.hash());
            print!("{}", cfg.to_toml()?);
        }
        Command::Fixture { out, train_pairs, test_pairs, seconds, seed } => {
            let opts = FixtureOptions {
                train_pairs: *train_pairs,
                test_pairs: *test_pairs,
                seconds: *seconds,
                seed: seed.unwrap_or(cfg.training.seed),
                ..Default::default()
            };
            let n = write_fixture(out, &opts)?;
            meta.outputs.push(out.clone());
            meta.write_for(out)?;
            println!("wrote {n} synthetic pairs to {}", out.display());
        }
        Command::Manifest { out, .. } => {
            let m = manifest_for(&cfg, cfg.data.split, None)?;
            let path = output_path(&cfg, out, &format!("manifest_{}.csv", cfg.data.split))?;
            m.write_csv(&path)?;
            meta.outputs.push(path.clone());
            meta.write_for(&path)?;
            println!("{} entries -> {}", m.len(), path.display());
        }
        Command::Distances { out, .. } => {
            let m = manifest_for(&cfg, cfg.data.split, None)?;
            let backends = load_backends(&cfg)?;
            meta.backends = backends.iter().map(|b| b.metadata()).collect();
            let records = batch_distances(&m, &backend_refs(&backends), &cfg.distances.layers, &cfg.distance_options(workers))?;
            let failures = records.iter().filter(|r| r.error.is_some()).count();
            if failures == records.len() {
                return Err(Error::EmptyResultSet(format!("all {failures} utterances failed")));
            }
            let path = output_path(&cfg, out, "distances.csv")?;
            write_records_csv(&path, &records)?;
            meta.outputs.push(path.clone());
            meta.extra.insert("failures".into(), failures.into());
            meta.write_for(&path)?;
            println!("{} records ({failures} failed) -> {}", records.len(), path.display());
        }
        Command::Evaluate { estimates, out, .. } => {
            let m = manifest_for(&cfg, cfg.data.split, None)?;
            if let Some(dir) = estimates.as_ref().filter(|d| !d.is_dir()) {
                return Err(Error::MissingFile(dir.clone()));
            }
            let registry = cfg.evaluation.registry();
            meta.evaluators = registry.versions();
            let ceiling = cfg.evaluation.si_sdr_ceiling;
            let rows = with_workers(workers, || evaluate_manifest(&registry, &m, estimates.as_deref(), ceiling))??;
            let path = output_path(&cfg, out, "metrics.csv")?;
            write_rows_csv(&path, &rows)?;
            meta.outputs.push(path.clone());
            meta.write_for(&path)?;
            for (k, v) in mean_row(&rows) {
                println!("{k:>7}: {}", v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()));
            }
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Correlate { distances, metrics, targets, scatter, out } => {
            let mut records = read_records_csv(distances)?;
            meta.inputs.push(distances.clone());
            for m in metrics {
                let matched = attach_targets(&mut records, &read_metric_table(m)?);
                log::info!("{}: matched {matched} of {} records", m.display(), records.len());
                meta.inputs.push(m.clone());
            }
            let targets = targets.clone().unwrap_or_else(|| cfg.evaluation.targets.clone());
            let report = correlation_report(&records, &targets)?;
            let path = output_path(&cfg, out, "correlation.csv")?;
            report.write_csv(&path)?;
            meta.outputs.push(path.clone());
            meta.outputs.push(n_grid_path(&path));
            for spec in scatter {
                let (d, t) = spec
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("--scatter expects distance:target, got '{spec}'")))?;
                let d = if d.starts_with("d_") { d.to_string() } else { format!("d_{d}") };
                if !report.distances.contains(&d) {
                    return Err(Error::Config(format!("unknown distance '{d}'; have {:?}", report.distances)));
                }
                let base = path.with_file_name(format!("scatter_{d}_{t}"));
                export_scatter(&records, &d, t, &base)?;
                meta.outputs.push(base.with_extension("png"));
                meta.outputs.push(base.with_extension("csv"));
            }
            meta.write_for(&path)?;
            print_report(&report);
        }
        Command::Train { .. } => {
            let train_set = manifest_for(&cfg, Split::Train, cfg.data.train_manifest.as_deref())?;
            let valid_set = manifest_for(&cfg, Split::Valid, cfg.data.valid_manifest.as_deref())?;
            let backends = load_backends(&cfg)?;
            meta.backends = backends.iter().map(|b| b.metadata()).collect();
            let registry = cfg.evaluation.registry();
            meta.evaluators = registry.versions();
            let dir = cfg.output.dir.join("train");
            let ctx = TrainingContext {
                losses: cfg.loss_context(&backends)?,
                metrics: registry,
                config_hash: cfg.hash(),
                output_dir: Some(dir.clone()),
            };
            log::info!("training on {} pairs, validating on {}", train_set.len(), valid_set.len());
            let run = with_workers(workers, || train(&train_set, &valid_set, &cfg.training, &ctx))??;
            let best = select_checkpoint(&run.checkpoints)?;
            best.write_metadata(dir.join("selected.json"))?;
            meta.outputs.push(dir.clone());
            meta.extra.insert("selected_epoch".into(), best.epoch.into());
            meta.extra.insert("validation_metric".into(), run.validation_metric.as_str().into());
            meta.write_for(&dir)?;
            println!(
                "{} epochs -> {}; selected epoch {} ({} {:.4})",
                run.checkpoints.len(),
                dir.display(),
                best.epoch,
                run.validation_metric.as_str(),
                best.validation_score
            );
        }
        Command::Enhance { checkpoint, input, out, .. } => {
            let cp = if checkpoint.is_dir() {
                let all = load_checkpoints(checkpoint)?;
                select_checkpoint(&all)?.clone()
            } else {
                Checkpoint::read_metadata(checkpoint)?
            };
            let model = cp.load_model(cfg.training.precision.dtype())?;
            meta.inputs.push(checkpoint.clone());
            let dir = out.clone().unwrap_or_else(|| cfg.output.dir.join("enhanced"));
            std::fs::create_dir_all(&dir)?;
            let jobs: Vec<(String, TimeSignal)> = match input {
                Some(p) => {
                    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "enhanced".into());
                    vec![(id, resample(&load_audio(p)?, ANALYSIS_RATE)?)]
                }
                None => manifest_for(&cfg, cfg.data.split, None)?
                    .entries
                    .iter()
                    .map(|e| Ok((e.id.clone(), load_pair(e, ANALYSIS_RATE)?.noisy)))
                    .collect::<Result<_>>()?,
            };
            for (id, noisy) in &jobs {
                let est = enhance(&model, noisy, &cfg.stft)?;
                write_wav(dir.join(format!("{id}.wav")), &est, WavFormat::Float32)?;
            }
            meta.outputs.push(dir.clone());
            meta.extra.insert("checkpoint_epoch".into(), cp.epoch.into());
            meta.write_for(&dir)?;
            println!("enhanced {} files -> {}", jobs.len(), dir.display());
        }
        Command::Visualize { clean, noisy, out, permutation_csv } => {
            let (s, x) = aligned_pair(clean, noisy)?;
            let backends = load_backends(&cfg)?;
            meta.backends = backends.iter().map(|b| b.metadata()).collect();
            meta.inputs.extend([clean.clone(), noisy.clone()]);
            let panels = build_panels(&s, &x, &backend_refs(&backends), &cfg.stft)?;
            let path = output_path(&cfg, out, "panels.png")?;
            write_panels_png(&panels, &path)?;
            meta.outputs.push(path.clone());
            if let Some(p) = permutation_csv {
                write_permutation_csv(&panels, p)?;
                meta.outputs.push(p.clone());
            }
            meta.write_for(&path)?;
            println!("{} panels -> {}", panels.len(), path.display());
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Config => "config",
        Command::Fixture { .. } => "fixture",
        Command::Manifest { .. } => "manifest",
        Command::Distances { .. } => "distances",
        Command::Evaluate { .. } => "evaluate",
        Command::Correlate { .. } => "correlate",
        Command::Train { .. } => "train",
        Command::Enhance { .. } => "enhance",
        Command::Visualize { .. } => "visualize",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_missing_input() {
                3
            } else {
                1
            })
        }
    }
}
