use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_anomgan");

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("ANOMGAN_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny synthetic dataset plus one trained epoch, shared by every test.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn root(&self) -> &Path {
        self.dir.path()
    }
    fn config(&self) -> PathBuf {
        self.root().join("s/config.toml")
    }
    fn run_dir(&self) -> PathBuf {
        self.root().join("s/run")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let f = Fixture { dir };
        ok(
            f.root(),
            &[
                "synth",
                "--size",
                "32",
                "--train-normal",
                "8",
                "--test-normal",
                "10",
                "--test-defect",
                "10",
                "--out-dir",
                "s",
            ],
        );
        ok(
            f.root(),
            &["train", "--config", "s/config.toml", "--max-epochs", "1", "--deterministic"],
        );
        f
    })
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn smoke_train_writes_both_checkpoints_and_one_epoch_log() {
    let f = fixture();
    assert!(f.run_dir().join("last.ckpt").is_file());
    assert!(f.run_dir().join("best.ckpt").is_file());
    let log = fs::read_to_string(f.run_dir().join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "header plus one epoch:\n{log}");
    let effective = fs::read_to_string(f.run_dir().join("config.toml")).unwrap();
    assert!(effective.contains("max_epochs = 1"));
    assert!(effective.contains("seed = 0"));
}

#[test]
fn missing_manifest_is_reported_by_field_before_any_output() {
    let f = fixture();
    let cfg = fs::read_to_string(f.config())
        .unwrap()
        .replace("train_manifest = \"train.manifest\"", "train_manifest = \"absent.manifest\"");
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("config.toml"), cfg).unwrap();
    let out = run(dir.path(), &["train", "--config", "config.toml", "--out-dir", "out"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.train_manifest"), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_config_and_bad_flags_exit_with_validation_code() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["train", "--config", "nope.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"));
    let f = fixture();
    let out = run(f.root(), &["eval", "--config", "s/config.toml", "--eta", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("eta"));
}

#[test]
fn flags_override_file_values_in_print_config() {
    let f = fixture();
    let text = ok(
        f.root(),
        &[
            "print-config",
            "--config",
            "s/config.toml",
            "--max-epochs",
            "1",
            "--eta",
            "0.3",
            "--threshold-policy",
            "fixed(0.95)",
        ],
    );
    assert!(text.contains("max_epochs = 1"), "{text}");
    assert!(text.contains("eta = 0.3"), "{text}");
    assert!(text.contains("0.95"), "{text}");
    let defaults = ok(f.root(), &["print-config", "--deterministic"]);
    assert!(defaults.contains("seed = 0"));
}

#[test]
fn existing_run_is_not_overwritten_without_resume() {
    let f = fixture();
    let out = run(f.root(), &["train", "--config", "s/config.toml", "--max-epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--resume"));
}

#[test]
fn prepare_one_vs_all_is_deterministic_and_keeps_only_the_normal_class() {
    let f = fixture();
    let data = f.root().join("s/data");
    let data = data.to_str().unwrap();
    let args = |out: &'static str| {
        vec![
            "prepare",
            "--dataset-root",
            data,
            "--protocol",
            "one-vs-all",
            "--normal-class",
            "good",
            "--seed",
            "5",
            "--out-dir",
            out,
        ]
    };
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &args("a"));
    ok(dir.path(), &args("b"));
    for name in ["train.manifest", "validation.manifest", "test.manifest"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between reruns");
    }
    let train = fs::read_to_string(dir.path().join("a/train.manifest")).unwrap();
    let records: Vec<&str> = train.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|l| l.ends_with("\tgood") && l.contains("\tnormal\t")));
}

#[test]
fn prepare_normal_only_puts_anomalies_only_in_test() {
    let f = fixture();
    let data = f.root().join("s/data");
    let dir = TempDir::new().unwrap();
    ok(
        dir.path(),
        &[
            "prepare",
            "--dataset-root",
            data.to_str().unwrap(),
            "--protocol",
            "normal-only",
            "--normal-class",
            "good",
            "--validation-fraction",
            "0",
            "--out-dir",
            "m",
        ],
    );
    let train = fs::read_to_string(dir.path().join("m/train.manifest")).unwrap();
    let test = fs::read_to_string(dir.path().join("m/test.manifest")).unwrap();
    assert!(!train.contains("anomalous"));
    assert_eq!(test.matches("\tanomalous\t").count(), 10);
    assert!(!dir.path().join("m/validation.manifest").exists());
}

#[test]
fn prepare_roi_masked_requires_masks() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    copy_dir(&f.root().join("s/data"), &data);
    let args = [
        "prepare",
        "--dataset-root",
        data.to_str().unwrap(),
        "--protocol",
        "roi-masked",
        "--normal-class",
        "good",
        "--out-dir",
        "r",
    ];
    ok(dir.path(), &args);
    let test = fs::read_to_string(dir.path().join("r/test.manifest")).unwrap();
    assert!(test.contains("_mask.png"));

    let gone = fs::read_dir(data.join("ground_truth/blob")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(&gone).unwrap();
    fs::remove_dir_all(dir.path().join("r")).unwrap();
    let out = run(dir.path(), &args);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("no mask"), "{}", stderr(&out));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn eval_is_repeatable_and_sweep_emits_one_report_per_eta() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let ckpt = f.run_dir().join("best.ckpt");
    for out in [&out_a, &out_b] {
        let stdout = ok(
            f.root(),
            &[
                "eval",
                "--config",
                "s/config.toml",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out-dir",
                out.to_str().unwrap(),
                "--eta-sweep",
            ],
        );
        assert!(stdout.contains("AUC") && stdout.contains("recall") && stdout.contains("threshold"));
    }
    for name in ["report.json", "scores.csv", "roc.csv", "histogram.csv"] {
        assert_eq!(
            fs::read(out_a.join("eval").join(name)).unwrap(),
            fs::read(out_b.join("eval").join(name)).unwrap(),
            "{name}"
        );
    }
    for i in 1..=9 {
        let report = out_a.join(format!("eval/eta-0.{i}/report.json"));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert!((json["eta"].as_f64().unwrap() - i as f64 / 10.0).abs() < 1e-12);
    }
    let sweep = fs::read_to_string(out_a.join("eval/eta_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 10);
}

#[test]
fn score_writes_one_row_per_test_image() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    ok(
        f.root(),
        &[
            "score",
            "--config",
            "s/config.toml",
            "--checkpoint",
            f.run_dir().join("last.ckpt").to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ],
    );
    let scores = fs::read_to_string(dir.path().join("score/scores.csv")).unwrap();
    let manifest = fs::read_to_string(f.root().join("s/test.manifest")).unwrap();
    let n = manifest.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(scores.lines().count(), n + 1);
}

#[test]
fn incompatible_checkpoint_fails_pre_flight() {
    let f = fixture();
    let cfg = fs::read_to_string(f.config()).unwrap().replace("= 32", "= 64");
    fs::write(f.root().join("s/config64.toml"), cfg).unwrap();
    let out = run(
        f.root(),
        &[
            "eval",
            "--config",
            "s/config64.toml",
            "--checkpoint",
            f.run_dir().join("best.ckpt").to_str().unwrap(),
            "--out-dir",
            "never",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!f.root().join("never").exists());
}

#[test]
fn output_root_variable_relocates_relative_outputs() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let out = Command::new(BIN)
        .args([
            "eval",
            "--config",
            "s/config.toml",
            "--checkpoint",
            f.run_dir().join("best.ckpt").to_str().unwrap(),
            "--out-dir",
            "rel",
        ])
        .current_dir(f.root())
        .env("ANOMGAN_OUTPUT_ROOT", root.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.path().join("rel/eval/report.json").is_file());
    assert!(!f.root().join("rel").exists());
}

/// Eval of the frozen one-epoch model must reproduce the stored report.
/// Set `ANOMGAN_UPDATE_GOLDEN=1` to regenerate it.
#[test]
fn frozen_model_reproduces_golden_report() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    ok(
        f.root(),
        &[
            "eval",
            "--config",
            "s/config.toml",
            "--checkpoint",
            f.run_dir().join("best.ckpt").to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ],
    );
    let fresh = fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_report.json");
    if std::env::var_os("ANOMGAN_UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden_path.parent().unwrap()).unwrap();
        fs::write(&golden_path, &fresh).unwrap();
    }
    let golden: serde_json::Value = serde_json::from_str(&fs::read_to_string(&golden_path).unwrap()).unwrap();
    let fresh: serde_json::Value = serde_json::from_str(&fresh).unwrap();
    assert_close(&golden, &fresh, "report");
}

fn assert_close(a: &serde_json::Value, b: &serde_json::Value, path: &str) {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9, "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}: length");
            for (i, (x, y)) in x.iter().zip(y).enumerate() {
                assert_close(x, y, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}: keys");
            for (k, v) in x {
                assert_close(v, &y[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}
