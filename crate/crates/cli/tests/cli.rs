use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deal_core::explain::{to_pgm, Backend, Heatmap, Normalization};
use deal_tensor::Tensor;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
[data]
train_per_category = 3
test_per_category = 2
validation_fraction = 0.25

[model]
patch_size = 8
embed_dim = 16
num_layers_vision = 1
num_layers_text = 1
num_heads = 2
projection_dim = 8

[train]
batch_size = 8
epochs = 2
learning_rate = 0.001
"#;

fn deal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deal"))
        .args(args)
        .env("DEAL_THREADS", "1")
        .output()
        .expect("spawn deal")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = deal(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        let f = Fixture { dir };
        ok(&["--config", f.s("tiny.toml"), "datagen", "--out", f.s("data")]);
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> &'static str {
        Box::leak(self.p(rel).to_string_lossy().into_owned().into_boxed_str())
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let mut args = vec!["--config", self.s("tiny.toml"), "train", "--data", self.s("data"), "--out", self.s(out)];
        args.extend_from_slice(extra);
        ok(&args);
    }

    fn eval(&self, run: &str, out: &str) {
        let ckpt = self.s(&format!("{run}/checkpoint"));
        ok(&["--config", self.s("tiny.toml"), "eval", "--data", self.s("data"), "--checkpoint", ckpt, "--out", self.s(out)]);
    }
}

fn same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let (x, y) = (a.join(&name), b.join(&name));
        if x.is_dir() {
            same_tree(&x, &y);
        } else {
            assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{} differs", x.display());
        }
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn datagen_writes_eight_categories_and_is_byte_stable() {
    let f = Fixture::new();
    let manifest = json(&f.p("data/train/manifest.json"));
    assert_eq!(manifest["count"], 24);
    assert_eq!(json(&f.p("data/concepts.json"))["categories"].as_array().unwrap().len(), 8);
    ok(&["--config", f.s("tiny.toml"), "datagen", "--out", f.s("again")]);
    same_tree(&f.p("data"), &f.p("again"));

    let other = deal(&["--config", f.s("tiny.toml"), "--seed", "9", "datagen", "--out", f.s("other")]);
    assert_eq!(code(&other), 0);
    assert_ne!(fs::read(f.p("data/train/images.bin")).unwrap(), fs::read(f.p("other/train/images.bin")).unwrap());
}

#[test]
fn default_datagen_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["datagen", "--out", out.to_str().unwrap()]);
    assert_eq!(json(&out.join("train/manifest.json"))["count"], 200);
    assert_eq!(json(&out.join("test/manifest.json"))["count"], 80);
}

#[test]
fn error_paths_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no/such/parent");
    assert_eq!(code(&deal(&["datagen", "--out", missing.to_str().unwrap()])), 3);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[data]\ntrain_per_categroy = 3\n").unwrap();
    let out = deal(&["--config", bad.to_str().unwrap(), "datagen", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_per_categroy"));

    let absent = dir.path().join("absent.toml");
    assert_eq!(code(&deal(&["--config", absent.to_str().unwrap(), "datagen"])), 3);
    assert_eq!(code(&deal(&["frobnicate"])), 2);
    assert_eq!(code(&deal(&["train", "--backend", "nope"])), 2);
    assert_eq!(code(&deal(&["train", "--out", dir.path().join("t").to_str().unwrap()])), 2);
    let nodata = dir.path().join("nodata");
    let out = deal(&["train", "--data", nodata.to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert_eq!(code(&deal(&["train", "--data", nodata.to_str().unwrap(), "--lambda", "-1", "--out", "x"])), 2);
}

#[test]
fn train_and_eval_are_reproducible() {
    let f = Fixture::new();
    f.train("a", &[]);
    f.train("b", &[]);
    for file in ["steps.ndjson", "validation_report.json", "config.toml"] {
        assert!(f.p("a").join(file).exists(), "{file}");
    }
    assert_eq!(fs::read(f.p("a/steps.ndjson")).unwrap(), fs::read(f.p("b/steps.ndjson")).unwrap());
    same_tree(&f.p("a/checkpoint"), &f.p("b/checkpoint"));
    assert_eq!(
        fs::read(f.p("a/validation_report.json")).unwrap(),
        fs::read(f.p("b/validation_report.json")).unwrap()
    );

    f.eval("a", "e1");
    f.eval("a", "e2");
    assert_eq!(fs::read(f.p("e1/report.json")).unwrap(), fs::read(f.p("e2/report.json")).unwrap());
    let report = json(&f.p("e1/report.json"));
    assert_eq!(report["samples"], 16);
    assert_eq!(report["per_category"].as_array().unwrap().len(), 8);
}

#[test]
fn unregularized_training_logs_total_equal_to_contrastive() {
    let f = Fixture::new();
    f.train("base", &["--lambda", "0", "--gamma", "0"]);
    let log = fs::read_to_string(f.p("base/steps.ndjson")).unwrap();
    let rows: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // One sample per category held out leaves 16: two batches per epoch.
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r["total"], r["contr"]);
        assert_eq!(r["disen"].as_f64(), Some(0.0));
        assert_eq!(r["local"].as_f64(), Some(0.0));
    }
    let resolved = fs::read_to_string(f.p("base/config.toml")).unwrap();
    assert!(resolved.contains("lambda = 0.0"), "{resolved}");
}

#[test]
fn explain_writes_one_graymap_and_grid_per_concept() {
    let f = Fixture::new();
    f.train("run", &["--epochs", "1"]);
    let ckpt = f.s("run/checkpoint");
    let base = ["--config", f.s("tiny.toml"), "explain", "--data", f.s("data"), "--checkpoint", ckpt];

    let mut args = base.to_vec();
    args.extend_from_slice(&["--out", f.s("maps"), "--sample", "0"]);
    ok(&args);
    let mut files: Vec<String> = fs::read_dir(f.p("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files.len(), 8, "{files:?}");
    assert_eq!(files.iter().filter(|n| n.ends_with(".pgm")).count(), 4);
    assert!(files.iter().all(|n| n.starts_with("0_")));
    for name in files.iter().filter(|n| n.ends_with(".csv")) {
        let grid = fs::read_to_string(f.p("maps").join(name)).unwrap();
        assert_eq!(grid.lines().count(), 4);
        assert!(grid.lines().all(|l| l.split(',').count() == 4));
    }
    let pgm = fs::read_to_string(f.p("maps").join(files.iter().find(|n| n.ends_with(".pgm")).unwrap())).unwrap();
    assert!(pgm.starts_with("P2\n4 4\n255\n"));

    let mut args = base.to_vec();
    args.extend_from_slice(&["--out", f.s("bad"), "--sample", "0", "--concept", "wings"]);
    let out = deal(&args);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("valid:"), "{stderr}");
    let concepts = json(&f.p("data/concepts.json"));
    for c in concepts["categories"][0]["concepts"].as_array().unwrap() {
        assert!(stderr.contains(c.as_str().unwrap()), "{stderr}");
    }
    assert!(!f.p("bad").exists());

    let mut args = base.to_vec();
    args.extend_from_slice(&["--out", f.s("oob"), "--sample", "999"]);
    assert_eq!(code(&deal(&args)), 2);
}

#[test]
fn constant_heatmap_renders_black() {
    for value in [0.0, 0.25] {
        let h = Heatmap {
            grid: Tensor::full(&[3, 3], value),
            backend: Backend::GradcamToken,
            normalization: Normalization::Sum,
            degenerate: true,
        };
        let pgm = to_pgm(&h);
        let pixels: Vec<&str> = pgm.lines().skip(3).flat_map(|l| l.split(' ')).collect();
        assert_eq!(pixels.len(), 9);
        assert!(pixels.iter().all(|&p| p == "0"), "{pgm}");
    }
}

#[test]
fn ablation_has_four_rows_and_matches_a_separate_baseline() {
    let f = Fixture::new();
    ok(&["--config", f.s("tiny.toml"), "ablate", "--data", f.s("data"), "--out", f.s("abl"), "--epochs", "1"]);
    let rows = json(&f.p("abl/ablation.json"));
    let rows = rows.as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "without-disen", "without-local", "deal"]);
    let table = fs::read_to_string(f.p("abl/ablation.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "variant\tdisentanglability\tlocalizability\tmiou\taccuracy");
    assert!(lines.iter().all(|l| l.split('\t').count() == 5));

    f.train("base", &["--epochs", "1", "--lambda", "0", "--gamma", "0"]);
    f.eval("base", "base-eval");
    let report = json(&f.p("base-eval/report.json"));
    for key in ["disentanglability", "localizability", "miou", "accuracy"] {
        assert_eq!(rows[0][key], report[key], "{key}");
    }
    assert_eq!(rows[0]["lambda"].as_f64(), Some(0.0));
    assert_eq!(rows[3]["lambda"].as_f64(), Some(0.05));
}
