use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn sssr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sssr")).args(args).output().expect("spawn sssr")
}

fn ok(args: &[&str]) -> Output {
    let out = sssr(args);
    assert!(
        out.status.success(),
        "sssr {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path, train: usize, test: usize) {
    ok(&["fixture", "--out", s(dir), "--train-pairs", &train.to_string(), "--test-pairs", &test.to_string()]);
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn distances_on_three_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    let out = tmp.path().join("out");
    fixture(&root, 2, 3);
    ok(&["--out-dir", s(&out), "distances", "--root", s(&root)]);
    let csv = out.join("distances.csv");
    assert_eq!(csv_rows(&csv), 3);
    let header = std::fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("utterance_id,d_sg"), "{header}");

    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("distances.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "distances");
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn correlate_writes_report_and_scatter() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    let out = tmp.path().join("out");
    fixture(&root, 2, 5);
    ok(&["--out-dir", s(&out), "distances", "--root", s(&root)]);
    ok(&["--out-dir", s(&out), "evaluate", "--root", s(&root)]);
    let stdout = ok(&[
        "--out-dir",
        s(&out),
        "correlate",
        "--distances",
        s(&out.join("distances.csv")),
        "--metrics",
        s(&out.join("metrics.csv")),
        "--targets",
        "pesq,si_sdr,mos",
        "--scatter",
        "sg:si_sdr",
    ])
    .stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("d_sg"));

    let grid = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    let lines: Vec<_> = grid.lines().collect();
    assert_eq!(lines[0], "distance,pesq_spearman,pesq_pearson,si_sdr_spearman,si_sdr_pearson,mos_spearman,mos_pearson");
    assert!(lines[1].starts_with("d_sg,NA,NA,"), "{}", lines[1]);
    let n_grid = std::fs::read_to_string(out.join("correlation_n.csv")).unwrap();
    assert!(n_grid.lines().nth(1).unwrap().starts_with("d_sg,0,5,0"), "{n_grid}");
    assert_eq!(csv_rows(&out.join("scatter_d_sg_si_sdr.csv")), 5);
    assert!(out.join("scatter_d_sg_si_sdr.png").is_file());
}

#[test]
fn train_two_epochs_writes_checkpoints_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    let out = tmp.path().join("out");
    fixture(&root, 6, 2);
    ok(&[
        "--out-dir",
        s(&out),
        "--set",
        "training.max_steps_per_epoch=2",
        "--set",
        "training.validation_metric=\"si_sdr\"",
        "train",
        "--root",
        s(&root),
        "--epochs",
        "2",
        "--loss",
        "sg",
    ]);
    let dir = out.join("train");
    for e in ["epoch_001", "epoch_002"] {
        assert!(dir.join(format!("{e}.safetensors")).is_file());
        assert!(dir.join(format!("{e}.json")).is_file());
    }
    assert!(!dir.join("epoch_003.json").exists());
    assert_eq!(csv_rows(&dir.join("training_log.csv")), 2);
    assert!(dir.join("run.meta.json").is_file());

    let enhanced = out.join("enhanced");
    ok(&["--out-dir", s(&out), "enhance", "--root", s(&root), "--checkpoint", s(&dir.join("selected.json"))]);
    let wavs = std::fs::read_dir(&enhanced).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav")).count();
    assert_eq!(wavs, 2);
}

#[test]
fn pipeline_on_ten_pair_fixture_is_fast_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    let start = Instant::now();
    fixture(&root, 2, 10);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        ok(&["--out-dir", s(&out), "manifest", "--root", s(&root)]);
        assert_eq!(csv_rows(&out.join("manifest_test.csv")), 10);
        ok(&["--out-dir", s(&out), "distances", "--manifest", s(&out.join("manifest_test.csv"))]);
        ok(&["--out-dir", s(&out), "evaluate", "--root", s(&root)]);
        ok(&[
            "--out-dir",
            s(&out),
            "correlate",
            "--distances",
            s(&out.join("distances.csv")),
            "--metrics",
            s(&out.join("metrics.csv")),
            "--scatter",
            "d_sg:si_sdr",
        ]);
        outputs.push(out);
    }
    assert!(start.elapsed() < Duration::from_secs(300), "pipeline took {:?}", start.elapsed());
    for name in ["manifest_test.csv", "distances.csv", "metrics.csv", "correlation.csv", "correlation_n.csv", "scatter_d_sg_si_sdr.csv", "scatter_d_sg_si_sdr.png"] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        let b = std::fs::read(outputs[1].join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn visualize_writes_panels() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    fixture(&root, 1, 1);
    let id = std::fs::read_dir(root.join("clean_testset_wav")).unwrap().next().unwrap().unwrap().file_name();
    let png = tmp.path().join("panels.png");
    let stdout = ok(&[
        "visualize",
        "--clean",
        s(&root.join("clean_testset_wav").join(&id)),
        "--noisy",
        s(&root.join("noisy_testset_wav").join(&id)),
        "--out",
        s(&png),
    ])
    .stdout;
    assert!(String::from_utf8_lossy(&stdout).starts_with("2 panels"));
    assert!(png.is_file());
    assert!(tmp.path().join("panels.png.meta.json").is_file());
}

#[test]
fn exit_codes_are_categorized() {
    let tmp = tempfile::tempdir().unwrap();

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nepochz = 3\n").unwrap();
    assert_eq!(sssr(&["--config", s(&cfg), "config"]).status.code(), Some(2));
    assert_eq!(sssr(&["--set", "stft.n_fft=\"many\"", "config"]).status.code(), Some(2));
    assert_eq!(sssr(&["distances"]).status.code(), Some(2), "no root configured");

    assert_eq!(sssr(&["--config", s(&tmp.path().join("absent.toml")), "config"]).status.code(), Some(3));
    assert_eq!(sssr(&["distances", "--root", s(&tmp.path().join("nowhere"))]).status.code(), Some(3));

    // A corpus whose only noisy file is not audio.
    let root = tmp.path().join("corpus");
    fixture(&root, 1, 1);
    let noisy = std::fs::read_dir(root.join("noisy_testset_wav")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&noisy, b"not a wav file").unwrap();
    let out = sssr(&["--out-dir", s(&tmp.path().join("o")), "distances", "--root", s(&root)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_command_prints_hash_and_round_trips() {
    let out = ok(&["--set", "training.epochs=7", "config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# config hash: "));
    assert!(text.contains("epochs = 7"));
    let again = ok(&["--set", "training.epochs=7", "config"]);
    assert_eq!(text, String::from_utf8(again.stdout).unwrap());
}
