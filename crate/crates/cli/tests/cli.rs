use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vtx_core::data::{load_dataset, load_vocabulary, save_dataset, GoldSource};
use vtx_core::model::checkpoint_json;
use vtx_core::training::{initial_state, TrainConfig};

const SMALL: &str = "n_samples = 120\nepochs = 2\nlearning_rate = 0.003\nk = 3\nd_h = 8\nqueue_size = 16\n";

fn vtx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtx"))
        .args(args)
        .env_remove("PV2_EPOCHS")
        .env_remove("PV2_SEED")
        .output()
        .expect("vtx runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.txt"), SMALL).unwrap();
        let f = Self { dir };
        ok(vtx(&["generate-data", "--config", s(&f.config()), "--out", s(&f.data())]));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("c.txt")
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let (out, config, data) = (self.path(out), self.config(), self.data());
        let mut args = vec!["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(vtx(&args));
        let runs: Vec<PathBuf> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(runs.len(), 1);
        runs[0].clone()
    }
}

#[test]
fn generate_writes_splits_and_vocab() {
    let f = Fixture::new();
    for file in ["train.jsonl", "test.jsonl", "vocab.json", "config.txt"] {
        assert!(f.data().join(file).exists(), "{file}");
    }
    let (_, test) = load_dataset(&f.data().join("test.jsonl")).unwrap();
    assert_eq!(test.len(), 24);
}

#[test]
fn same_seed_same_files() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        ok(vtx(&["generate-data", "--config", s(&f.config()), "--seed", "7", "--out", s(&f.path(out))]));
    }
    for file in ["train.jsonl", "test.jsonl", "vocab.json"] {
        assert_eq!(fs::read(f.path("a").join(file)).unwrap(), fs::read(f.path("b").join(file)).unwrap());
    }
}

#[test]
fn invalid_rate_is_a_user_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = vtx(&["generate-data", "--set", "label_noise_rate=1.5", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label_noise_rate"));
}

#[test]
fn run_dir_contents_and_backbone_toggles() {
    let f = Fixture::new();
    let run = f.train("runs", &["--no-s1", "--no-s2", "--no-s3"]);
    for file in ["metrics.csv", "weights.csv", "checkpoint.json", "config.txt"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    for key in ["s1", "s2", "s3"] {
        assert!(config.contains(&format!("{key} = false")), "{config}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,L_sc,L_ct,L_rmlm,total,lr\n"));
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[2], cols[3]), ("0", "0"));
    }
    let name = run.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("run-") && name.ends_with("-seed0"), "{name}");
}

#[test]
fn weights_csv_has_flags_and_epochs() {
    let f = Fixture::new();
    let run = f.train("runs", &["--dump-weights"]);
    let text = fs::read_to_string(run.join("weights.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,epoch,s_v,s_p,s,noise_flag"));
    assert_eq!(lines.count(), 96 * 2);
    assert!(run.join("weights/epoch-1.json").exists());
}

#[test]
fn zero_epochs_checkpoint_is_initialization() {
    let f = Fixture::new();
    let run = f.train("runs", &["--epochs", "0"]);
    let (header, _) = load_dataset(&f.data().join("train.jsonl")).unwrap();
    let vocab = load_vocabulary(&f.data().join("vocab.json")).unwrap();
    let cfg = TrainConfig { epochs: 0, learning_rate: 0.003, k: 3, d_h: 8, queue_size: 16, ..TrainConfig::default() };
    let init = initial_state(&header, &vocab, &cfg).unwrap();
    assert_eq!(fs::read_to_string(run.join("checkpoint.json")).unwrap(), checkpoint_json(&init).unwrap());
}

#[test]
fn missing_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = vtx(&["train", "--data", s(&dir.path().join("nope")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let f = Fixture::new();
    let out = f.path("runs");
    let status = Command::new(env!("CARGO_BIN_EXE_vtx"))
        .args(["train", "--config", s(&f.config()), "--data", s(&f.data()), "--out", s(&out)])
        .env("PV2_EPOCHS", "3")
        .env("PV2_SEED", "3")
        .output()
        .unwrap();
    ok(status);
    let run = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("epochs = 3\n") && config.contains("seed = 3\n"), "{config}");

    let out2 = f.path("runs2");
    ok(Command::new(env!("CARGO_BIN_EXE_vtx"))
        .args(["train", "--config", s(&f.config()), "--data", s(&f.data()), "--out", s(&out2), "--epochs", "0"])
        .env("PV2_EPOCHS", "3")
        .output()
        .unwrap());
    let run = fs::read_dir(&out2).unwrap().next().unwrap().unwrap().path();
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("epochs = 0\n"));
}

#[test]
fn evaluate_reports_and_determinism() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let b = f.train("b", &[]);
    assert_eq!(fs::read(a.join("checkpoint.json")).unwrap(), fs::read(b.join("checkpoint.json")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("weights.csv")).unwrap(), fs::read(b.join("weights.csv")).unwrap());

    let test = f.data().join("test.jsonl");
    for (run, out) in [(&a, "ea"), (&b, "eb")] {
        let stdout = ok(vtx(&[
            "evaluate",
            "--checkpoint",
            s(&run.join("checkpoint.json")),
            "--test",
            s(&test),
            "--out",
            s(&f.path(out)),
            "--source-aware",
            "--retrieval",
            "--dump-masks",
        ]));
        assert!(stdout.contains("GAP"));
    }
    for file in ["report.json", "report.csv", "retrieval.json", "masks.jsonl"] {
        assert_eq!(fs::read(f.path("ea").join(file)).unwrap(), fs::read(f.path("eb").join(file)).unwrap(), "{file}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("ea/report.json")).unwrap()).unwrap();
    assert!(report["overall"]["macro"]["f1"].is_number());
    assert!(report["gap"]["f1"].is_number());
    let csv = fs::read_to_string(f.path("ea/report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("GAP,macro,")));

    let summary = ok(vtx(&["report", "--input", s(&f.path("ea")), "--out", s(&f.path("sum"))]));
    assert!(summary.contains("GAP"));
    assert!(f.path("sum/summary.csv").exists());
}

#[test]
fn single_source_test_set_omits_gap() {
    let f = Fixture::new();
    let run = f.train("runs", &["--epochs", "0"]);
    let (header, test) = load_dataset(&f.data().join("test.jsonl")).unwrap();
    let text_only: Vec<_> = test.into_iter().filter(|s| s.gold_source == Some(GoldSource::Text)).collect();
    let path = f.path("text_only.jsonl");
    save_dataset(&header, &text_only, &path).unwrap();
    let stdout = ok(vtx(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--test",
        s(&path),
        "--out",
        s(&f.path("e")),
        "--source-aware",
    ]));
    assert!(stdout.contains("GAP: omitted"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("e/report.json")).unwrap()).unwrap();
    assert!(report["gap"].is_null() && report["image"].is_null());
    assert!(!fs::read_to_string(f.path("e/report.csv")).unwrap().contains("GAP"));
}

#[test]
fn evaluate_rejects_empty_and_mismatched_test_sets() {
    let f = Fixture::new();
    let run = f.train("runs", &["--epochs", "0"]);
    let checkpoint = run.join("checkpoint.json");
    let empty = f.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = vtx(&["evaluate", "--checkpoint", s(&checkpoint), "--test", s(&empty), "--out", s(&f.path("e"))]);
    assert_ne!(out.status.code(), Some(0));

    let other = f.path("other");
    ok(vtx(&["generate-data", "--set", "n_samples=50", "--set", "patches=8", "--out", s(&other)]));
    let out = vtx(&["evaluate", "--checkpoint", s(&checkpoint), "--test", s(&other.join("test.jsonl")), "--out", s(&f.path("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("header"));
}

fn ablation_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("ablation.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn ablation_shapes() {
    let f = Fixture::new();
    let one = f.path("one");
    let stdout = ok(vtx(&["ablate", "--config", s(&f.config()), "--data", s(&f.data()), "--seeds", "0", "--out", s(&one)]));
    assert!(stdout.contains("sha256"));
    let rows = ablation_rows(&one);
    assert_eq!(rows.iter().filter(|r| r[0] == "0").count(), 4);
    assert_eq!(rows.iter().filter(|r| r[0] == "mean").count(), 4);

    let two = f.path("two");
    ok(vtx(&["ablate", "--config", s(&f.config()), "--data", s(&f.data()), "--seeds", "0,1", "--parallel", "--out", s(&two)]));
    let rows2 = ablation_rows(&two);
    assert_eq!(rows2.len(), 8 + 4);
    let variants: Vec<&str> = rows2.iter().filter(|r| r[0] == "mean").map(|r| r[1].as_str()).collect();
    assert_eq!(variants, ["full", "w/o S1", "w/o S2", "w/o S3"]);
    // Parallel and sequential runs agree on the seed they share.
    assert_eq!(rows[..4], rows2[..4]);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(one.join("ablation.json")).unwrap()).unwrap();
    let report2: serde_json::Value = serde_json::from_str(&fs::read_to_string(two.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["dataset_hash"], report2["dataset_hash"]);
}
