use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn lcasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcasr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lcasr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_tones(dir: &Path, n: usize) -> PathBuf {
    let o = lcasr(&["synth", "tone", "--out", p(dir), "--n", &n.to_string(), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("manifest.jsonl")
}

fn write_config(dir: &Path, manifest: &Path) -> PathBuf {
    let text = format!(
        r#"[encoder]
n_layers = 1
d_model = 16
n_heads = 2
subsample_hidden = 4

[train]
total_steps = 3
batch_duration_s = 6.0
seed = 1

[curriculum]
s0 = 2.56
n = 4
s_max = 5.12

[data]
train_manifest = "{}"
runs_dir = "runs"
"#,
        p(manifest)
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_tiny(tmp: &TempDir) -> (PathBuf, PathBuf) {
    let manifest = synth_tones(&tmp.path().join("data"), 4);
    let config = write_config(tmp.path(), &manifest);
    let run = tmp.path().join("run");
    let o = lcasr(&["train", "--config", p(&config), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("final.ckpt");
    assert_eq!(stdout(&o).trim(), p(&ckpt));
    assert!(run.join("config.toml").exists());
    (ckpt, manifest)
}

#[test]
fn prepare_writes_normalized_manifest_and_vocab() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_tones(&tmp.path().join("data"), 3);
    let out = tmp.path().join("prepared");
    let o = lcasr(&["prepare", p(&manifest), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(Path::new(v["audio_path"].as_str().unwrap()).is_absolute());
    }
    let vocab = std::fs::read_to_string(out.join("vocab.txt")).unwrap();
    assert!(vocab.lines().count() >= 2);

    let o = lcasr(&["prepare", p(&manifest), "--validate"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("3 records valid"));
}

#[test]
fn prepare_reports_every_bad_line_and_exits_1() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_tones(&tmp.path().join("data"), 2);
    let good = std::fs::read_to_string(&manifest).unwrap();
    let mut text = String::from("{not json\n");
    text.push_str(good.lines().next().unwrap());
    text.push('\n');
    text.push_str("{\"audio_path\":\"wav/missing.wav\",\"duration_s\":1.0,\"words\":[]}\n");
    text.push_str("{\"audio_path\":\"wav/x.wav\",\"duration_s\":1.0,\"words\":[{\"w\":\"a\",\"s\":0.8,\"e\":0.2}]}\n");
    let bad = tmp.path().join("data/bad.jsonl");
    std::fs::write(&bad, text).unwrap();
    let out = tmp.path().join("out");
    let o = lcasr(&["prepare", p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for line in [":1: error", ":3: error", ":4: error"] {
        assert!(err.contains(line), "missing {line} in {err}");
    }
    assert!(!err.contains(":2: error"));
    assert!(!out.join("manifest.jsonl").exists());
}

#[test]
fn duplicate_audio_paths_are_warnings() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_tones(&tmp.path().join("data"), 1);
    let line = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, format!("{line}{line}")).unwrap();
    let o = lcasr(&["prepare", p(&manifest), "--validate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains(":2: warning: duplicate audio path"));
}

#[test]
fn train_transcribe_and_evaluate() {
    let tmp = TempDir::new().unwrap();
    let (ckpt, manifest) = train_tiny(&tmp);
    let wav = tmp.path().join("data/wav/tone-000.wav");

    let lattice = tmp.path().join("lattice.json");
    let o = lcasr(&[
        "transcribe",
        p(&ckpt),
        p(&wav),
        "--window-s",
        "0.64",
        "--stride-s",
        "0.64",
        "--lattice-out",
        p(&lattice),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&lattice).unwrap()).unwrap();
    assert_eq!(dump["window_frames"], 64);
    assert_eq!(dump["stride_frames"], 64);
    let coverage = dump["coverage"].as_array().unwrap();
    assert!(!coverage.is_empty());
    // Each frame is seen once, except where the back-shifted tail window
    // overlaps its predecessor (less than one window of 8 encoder frames).
    let twice = coverage.iter().filter(|c| **c == 2).count();
    assert!(coverage.iter().all(|c| c == 1 || c == 2));
    assert!(twice < 8, "{twice} frames covered twice");
    let first = coverage.iter().position(|c| c == 2).unwrap_or(0);
    assert!(coverage[first..first + twice].iter().all(|c| c == 2), "{coverage:?}");
    let rows = dump["log_probs"].as_array().unwrap();
    assert_eq!(rows.len(), coverage.len());
    let width = dump["tokens"].as_array().unwrap().len();
    for row in rows {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(row.len(), width);
        let mass: f64 = row.iter().map(|l| l.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }

    let report = tmp.path().join("report.json");
    let o = lcasr(&["evaluate", p(&ckpt), p(&manifest), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["recordings"].as_array().unwrap().len(), 4);
    let wer = r["aggregate_wer"].as_f64().unwrap();
    assert!(wer >= 0.0);

    let o = lcasr(&[
        "transcribe",
        p(&ckpt),
        p(&wav),
        "--window-s",
        "1.28",
        "--stride-s",
        "2.56",
    ]);
    assert_eq!(code(&o), 2, "stride longer than window is a config error");
}

#[test]
fn exit_codes_for_config_and_data_errors() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[encoder]\nn_heads = 3\n").unwrap();
    let o = lcasr(&["train", "--config", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"));

    let missing_manifest = tmp.path().join("missing.toml");
    std::fs::write(&missing_manifest, "[data]\ntrain_manifest = \"nowhere.jsonl\"\n").unwrap();
    assert_eq!(code(&lcasr(&["train", "--config", p(&missing_manifest)])), 2);

    let o = lcasr(&["prepare", p(&tmp.path().join("absent.jsonl")), "--validate"]);
    assert_eq!(code(&o), 3);

    let not_wav = tmp.path().join("x.wav");
    std::fs::write(&not_wav, b"RIFF").unwrap();
    let o = lcasr(&["transcribe", p(&tmp.path().join("absent.ckpt")), p(&not_wav)]);
    assert_eq!(code(&o), 3);
}

fn run_dirs(runs: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    v
}

#[test]
fn sweep_trains_each_pair_once_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_tones(&tmp.path().join("data"), 3);
    let config = write_config(tmp.path(), &manifest);
    let runs = tmp.path().join("runs");
    let args = [
        "sweep",
        "--config",
        p(&config),
        "--contexts",
        "2.56,5.12",
        "--steps",
        "2",
    ];
    let o = lcasr(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs = run_dirs(&runs);
    assert_eq!(dirs.len(), 6);
    for seed in 1..=3 {
        for ctx in ["2.56", "5.12"] {
            let suffix = format!("-{ctx}s-{seed}");
            assert!(dirs
                .iter()
                .any(|d| d.file_name().unwrap().to_str().unwrap().ends_with(&suffix)));
        }
    }
    for d in &dirs {
        assert!(d.join("final.ckpt").exists());
        assert!(d.join("eval_report.json").exists());
    }
    let tsv = std::fs::read_to_string(runs.join("sweep_report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3, "header plus one row per context:\n{tsv}");
    assert_eq!(stdout(&o), tsv);

    let summary = std::fs::read_to_string(runs.join("sweep_summary.jsonl")).unwrap();
    assert_eq!(summary.lines().count(), 6);

    let journal = std::fs::read_to_string(runs.join("sweep_journal.jsonl")).unwrap();
    assert_eq!(journal.lines().filter(|l| l.contains("\"done\"")).count(), 6);

    let again = lcasr(&args);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(run_dirs(&runs), dirs, "completed runs are not retrained");
    assert_eq!(stdout(&again), tsv);

    let o = lcasr(&["report", p(&runs), "--baseline-s", "2.56"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), tsv);
}

#[test]
fn sweep_retrains_runs_that_never_finished() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_tones(&tmp.path().join("data"), 2);
    let config = write_config(tmp.path(), &manifest);
    let runs = tmp.path().join("runs");
    let args = [
        "sweep",
        "--config",
        p(&config),
        "--contexts",
        "2.56",
        "--seeds",
        "1",
        "--steps",
        "1",
    ];
    assert_eq!(code(&lcasr(&args)), 0);
    let first = run_dirs(&runs);
    assert_eq!(first.len(), 1);
    std::fs::remove_file(first[0].join("eval_report.json")).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let o = lcasr(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs = run_dirs(&runs);
    assert_eq!(dirs.len(), 2);
    assert!(dirs[1].join("eval_report.json").exists());
}
