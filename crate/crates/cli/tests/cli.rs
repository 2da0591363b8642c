use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
timesteps = 8
branch_width = 3
capsule_dim = 3
epochs = 3
early_stop_patience = 2
batch_size = 32
n_features = 2
synthetic_datasets = 2
synthetic_train_rows = 120
synthetic_test_rows = 60
anomaly_count = 1
anomaly_width = 10
train_rows = 120
n_runs = 2
compare_rows = 80
max_width = 8
";

fn lstmcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstmcaps")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = lstmcaps(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_config_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "not_a_key = 3\n");
    let out_dir = dir.path().join("out");
    let out = lstmcaps(&["train", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
    assert!(!out_dir.exists());

    let cfg = config(dir.path(), "epochs = -1\n");
    assert!(!lstmcaps(&["generate", "--config", s(&cfg), "--out", s(&out_dir)]).status.success());
    let cfg = config(dir.path(), "");
    assert!(!lstmcaps(&["train", "--config", s(&cfg), "--out", s(&out_dir)]).status.success());
    assert!(!lstmcaps(&["train", "--config", s(&cfg), "--set", "train_data=/no/such.csv", "--out", s(&out_dir)])
        .status
        .success());
    assert!(!out_dir.exists());
}

#[test]
fn generate_train_detect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let gen = dir.path().join("gen");
    ok(&["generate", "--config", s(&cfg), "--out", s(&gen)]);
    let data = gen.join("synthetic-00.csv");
    let text = fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("f0,f1,anomaly,changepoint\n"));
    assert_eq!(text.lines().count(), 181);

    let model = dir.path().join("model");
    let set = format!("train_data={}", s(&data));
    ok(&["train", "--config", s(&cfg), "--set", &set, "--out", s(&model)]);
    for f in ["model.ckpt", "profile.json", "train_report.txt", "manifest.txt", "config.txt"] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let report = fs::read_to_string(model.join("train_report.txt")).unwrap();
    assert!(report.contains("training_rows = 120"));

    let det = dir.path().join("det");
    let sets = [format!("test_data={}", s(&data)), format!("model_dir={}", s(&model))];
    ok(&["detect", "--config", s(&cfg), "--set", &sets[0], "--set", &sets[1], "--out", s(&det)]);
    let labels = fs::read_to_string(det.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 181);
    assert!(labels.starts_with("index,flag,f0,f1\n"));
    let scores = fs::read_to_string(det.join("scores.txt")).unwrap();
    assert!(scores.contains("f1 = ") && scores.contains("nab_standard = "));
    assert!(det.join("histogram-f1.csv").is_file());
    let manifest = fs::read_to_string(det.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = detect") && manifest.contains("config_sha256 = "));
}

#[test]
fn high_sensitivity_flags_nothing_on_clean_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "anomaly_count = 0\n");
    let gen = dir.path().join("gen");
    ok(&["generate", "--config", s(&cfg), "--out", s(&gen)]);
    let data = gen.join("synthetic-01.csv");
    let model = dir.path().join("model");
    let set = format!("train_data={}", s(&data));
    ok(&["train", "--config", s(&cfg), "--set", &set, "--out", s(&model)]);
    let det = dir.path().join("det");
    let sets = [format!("test_data={}", s(&data)), format!("model_dir={}", s(&model))];
    ok(&["detect", "--config", s(&cfg), "--sensitivity", "10", "--set", &sets[0], "--set", &sets[1], "--out", s(&det)]);
    let scores = fs::read_to_string(det.join("scores.txt")).unwrap();
    assert!(scores.contains("flagged_points = 0\n"), "{scores}");
}

#[test]
fn benchmark_and_comparison_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let bench = dir.path().join("bench");
    ok(&["benchmark", "--config", s(&cfg), "--design", "C", "--out", s(&bench)]);
    let lb = fs::read_to_string(bench.join("leaderboard.csv")).unwrap();
    assert_eq!(lb.lines().count(), 2);
    assert!(lb.lines().nth(1).unwrap().starts_with("design-C,"));
    let report = fs::read_to_string(bench.join("benchmark_report.csv")).unwrap();
    assert!(report.contains(",synthetic-01,"));

    let gen = dir.path().join("gen");
    ok(&["generate", "--config", s(&cfg), "--out", s(&gen)]);
    let from_dir = dir.path().join("bench-dir");
    let set = format!("dataset_dir={}", s(&gen));
    ok(&["benchmark", "--config", s(&cfg), "--design", "C", "--set", &set, "--out", s(&from_dir)]);
    let a = fs::read_to_string(bench.join("benchmark_report.csv")).unwrap();
    let b = fs::read_to_string(from_dir.join("benchmark_report.csv")).unwrap();
    // Files written at 12 significant digits score like the in-memory suite.
    assert_eq!(a.lines().count(), b.lines().count());

    let cmp = dir.path().join("cmp");
    ok(&["compare-designs", "--config", s(&cfg), "--out", s(&cmp)]);
    let table = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("design,parameters,avg_final_train_loss,avg_final_val_loss"));
}
