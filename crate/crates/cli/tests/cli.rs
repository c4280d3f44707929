use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossdenoise"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CROSSDENOISE_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// 60 users x 50 items, about 12 ratings each, ratings 1..=5.
fn write_ratings(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut text = String::new();
    for u in 0..60 {
        for i in 0..50 {
            if rng.random_bool(0.25) {
                let rating = rng.random_range(1..=5);
                text.push_str(&format!("u{u}\ti{i}\t{rating}\t{}\n", u * 100 + i));
            }
        }
    }
    fs::write(path, text).unwrap();
}

fn synth_split(cwd: &Path) {
    ok(cwd, &["prepare", "--synth-users", "80", "--synth-items", "60", "--seed", "2", "--out", "split"]);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const QUICK: [&str; 6] = ["--epochs", "3", "--batch-size", "128", "--ks", "5,10"];

#[test]
fn prepare_from_ratings_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_ratings(&root.join("ratings.tsv"));
    for dir in ["a", "b"] {
        ok(root, &["prepare", "--input", "ratings.tsv", "--threshold", "2", "--seed", "9", "--out", dir]);
    }
    for file in ["train.tsv", "valid.tsv", "test.tsv", "manifest.json"] {
        assert!(root.join("a").join(file).is_file(), "missing {file}");
    }
    for file in ["train.tsv", "valid.tsv", "test.tsv"] {
        assert_eq!(
            fs::read(root.join("a").join(file)).unwrap(),
            fs::read(root.join("b").join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["job"]["command"], "prepare");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["prepare", "--input", "nowhere.tsv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere.tsv"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let cases: [&[&str]; 5] = [
        &["train", "--split", "split", "--alpha", "3", "--beta", "1", "--out", "t"],
        &["train", "--split", "split", "--components", "if", "--out", "t"],
        &["ablate", "--split", "split", "--grid", "none;uf", "--out", "t"],
        &["train", "--split", "split", "--lr", "-1", "--out", "t"],
        &["sweep", "--split", "split", "--stencil", "0:1", "--out", "t"],
    ];
    for args in cases {
        let out = run(root, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert!(!root.join("t/manifest.json").exists());
    }
    let out = run(root, &["train", "--split", "split"]);
    assert_eq!(out.status.code(), Some(2), "missing --out");
}

#[test]
fn zero_workers_from_env_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crossdenoise"))
        .args(["prepare", "--synth-users", "20", "--synth-items", "20", "--out", "x"])
        .current_dir(tmp.path())
        .env("CROSSDENOISE_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let args = [&["train", "--split", "split", "--seeds", "3,4", "--dump-weights", "--out", "t"][..], &QUICK].concat();
    ok(root, &args);
    let t = root.join("t");
    for file in ["summary.csv", "per_seed.csv", "per_user.csv", "manifest.json"] {
        assert!(t.join(file).is_file(), "missing {file}");
    }
    for seed in [3, 4] {
        let dir = t.join(format!("seed-{seed}"));
        for file in ["model.bin", "epochs.csv", "metrics.csv", "weights.tsv"] {
            assert!(dir.join(file).is_file(), "missing seed-{seed}/{file}");
        }
        let epochs = csv_rows(&dir.join("epochs.csv"));
        assert_eq!(epochs[0][0], "epoch");
        assert!(!epochs[0].iter().any(|h| h == "seconds"));
        assert!((2..=4).contains(&epochs.len()));
    }
    let summary = csv_rows(&t.join("summary.csv"));
    assert_eq!(summary[0], ["metric", "K", "mean", "std", "seeds"]);
    assert_eq!(summary.len(), 1 + 4);
}

#[test]
fn empty_components_train_vanilla() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let args = [&["train", "--split", "split", "--seeds", "1", "--components", "", "--out", "v"][..], &QUICK].concat();
    ok(root, &args);
    let manifest = fs::read_to_string(root.join("v/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["job"]["train"]["components"], "");
    let epochs = csv_rows(&root.join("v/seed-1/epochs.csv"));
    let tp_weight = epochs[0].iter().position(|h| h == "tp_weight").unwrap();
    for row in &epochs[1..] {
        assert_eq!(row[tp_weight].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn ablate_default_grid_has_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let args = [&["ablate", "--split", "split", "--seeds", "1", "--out", "ab"][..], &QUICK].concat();
    ok(root, &args);
    let rows = csv_rows(&root.join("ab/ablation.csv"));
    assert_eq!(&rows[0][..3], ["BW", "IF", "UF"]);
    assert_eq!(rows.len(), 6);
}

#[test]
fn sweep_grid_leaves_invalid_cells_blank() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let args = [&["sweep", "--split", "split", "--alphas", "1,2", "--betas", "1,2", "--seeds", "1", "--out", "sw"][..], &QUICK].concat();
    ok(root, &args);
    let rows = csv_rows(&root.join("sw/surface.csv"));
    assert_eq!(rows[0], ["alpha\\beta", "1", "2"]);
    // alpha = 2 > beta = 1
    assert_eq!(rows[2][1], "");
    assert!(!rows[1][1].is_empty() && !rows[1][2].is_empty() && !rows[2][2].is_empty());
    let svg = fs::read_to_string(root.join("sw/surface.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("fill=\"none\""));
}

#[test]
fn sweep_stencil_gives_one_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let args = [&["sweep", "--split", "split", "--stencil", "1:2", "--step", "0.1", "--seeds", "1", "--out", "st"][..], &QUICK].concat();
    ok(root, &args);
    let verdicts = csv_rows(&root.join("st/verdicts.csv"));
    assert_eq!(verdicts[0], ["alpha", "beta", "H11", "H22", "H12", "detH", "class"]);
    assert_eq!(verdicts.len(), 2);
    assert!(["concave", "convex", "saddle", "indeterminate"].contains(&verdicts[1][6].as_str()));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    fs::write(root.join("run.toml"), "seeds = [5]\n[train]\nmax_epochs = 2\nbatch_size = 64\nalpha = 0.5\n").unwrap();
    ok(root, &["--config", "run.toml", "train", "--split", "split", "--alpha", "0.8", "--out", "c"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("c/manifest.json")).unwrap()).unwrap();
    let train = &manifest["job"]["train"];
    assert_eq!(train["alpha"], 0.8);
    assert_eq!(train["batch_size"], 64);
    assert_eq!(manifest["job"]["seeds"], serde_json::json!([5]));
    assert!(root.join("c/seed-5/epochs.csv").is_file());

    fs::write(root.join("bad.toml"), "[train]\nmaxepochs = 2\n").unwrap();
    let out = run(root, &["--config", "bad.toml", "train", "--split", "split", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("maxepochs"), "{}", stderr(&out));
}

#[test]
fn replay_detects_tampered_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth_split(root);
    let manifest_path = root.join("split/manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["artifacts"][0]["sha256"] = serde_json::json!("0".repeat(64));
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let out = run(root, &["replay", "split/manifest.json", "--out", "again"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("differ"), "{}", stderr(&out));
}
