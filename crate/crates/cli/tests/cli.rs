use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use grcn::data::{save_canonical_json, synthetic_dataset, SyntheticSpec};

fn grcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grcn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GRCN_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn grcn")
}

fn toy(dir: &Path) {
    let d = synthetic_dataset(SyntheticSpec { nodes: 180, ..SyntheticSpec::default() }, 2).unwrap();
    save_canonical_json(&d, &dir.join("toy.json")).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn unknown_variant_lists_choices() {
    let dir = tempfile::tempdir().unwrap();
    let o = grcn(&["train", "--dataset", "toy", "--variant", "nosuch"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gcn, grcn, fast-grcn, svd, fo, fg, rwfg"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = grcn(&["train", "--dataset", "cora", "--data-dir", "."], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cora"));
    let o = grcn(&["train", "--dataset", "cora"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    for args in [
        &["sweep", "--dataset", "toy", "--data-dir", ".", "--experiment", "edges", "--ratios", ""][..],
        &["sweep", "--dataset", "toy", "--data-dir", ".", "--experiment", "edges", "--ratios", "1.5"],
        &["train", "--dataset", "toy", "--data-dir", ".", "--dropout", "1.0"],
        &["train", "--dataset", "toy", "--data-dir", ".", "--topk", "0"],
    ] {
        let o = grcn(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let o = grcn(
        &["train", "--dataset", "toy", "--data-dir", ".", "--variant", "fast-grcn", "--epochs", "10", "--out-dir", "run"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("test_acc="));
    for f in ["checkpoint.bin", "result.json", "manifest.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
    let result: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("run/result.json")).unwrap()).unwrap();
    assert_eq!(result["loss_history"].as_array().unwrap().len(), 10);
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let o = grcn(
        &[
            "sweep", "--dataset", "toy", "--data-dir", ".", "--experiment", "edges", "--ratios", "0.1,1.0", "--trials",
            "2", "--epochs", "5", "--out-dir", "sw",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("sw/sweep.csv")), 4);
    assert!(dir.path().join("sw/manifest.json").is_file());
}

#[test]
fn gridsearch_covers_grid() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let base = ["gridsearch", "--dataset", "toy", "--data-dir", ".", "--epochs", "5"];
    let single = [&base[..], &["--weight-decays", "5e-4", "--topks", "5", "--out-dir", "g1"]].concat();
    let o = grcn(&single, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("g1/grid.csv")), 1);
    let square = [&base[..], &["--weight-decays", "1e-4,1e-2", "--topks", "3,6", "--out-dir", "g2"]].concat();
    let o = grcn(&square, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("g2/grid.csv")), 4);
    let flags = fs::read_to_string(dir.path().join("g2/best_config.flags")).unwrap();
    assert!(flags.contains("--topk"), "{flags}");
}

#[test]
fn convert_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mini.content"), "a\t1\t0\tX\nb\t0\t1\tY\nc\t1\t1\tX\n").unwrap();
    fs::write(dir.path().join("mini.cites"), "a\tb\nb\tc\nc\ta\n").unwrap();
    let o = grcn(&["convert", "--dataset", "mini", "--data-dir", "."], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "mini: 3 nodes 3 edges 2 features 2 classes");
    let o = grcn(
        &["train", "--dataset", "mini.json", "--epochs", "2", "--split", "per-class", "--out-dir", "t"],
        dir.path(),
    );
    // Two classes of one or two nodes cannot satisfy a 20-per-class split.
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("class"));
}
