use std::fs;
use std::path::PathBuf;

use grcn::checkpoint::Checkpoint;
use grcn::data::{
    load_dataset, random_split, resolve_dataset, save_canonical_json, synthetic_dataset, DatasetFormat, SplitProtocol,
    SyntheticSpec,
};
use grcn::models::{GrcnModel, ModelConfig, Variant};
use grcn::training::{build_inputs, evaluate_checkpoint, train, TrainConfig};
use grcn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_toy(dir: &std::path::Path) -> PathBuf {
    let prefix = dir.join("toy");
    fs::write(
        prefix.with_extension("content"),
        "p1\t1\t0\t1\tTheory\np2\t0\t1\t0\tAI\np3\t1\t1\t0\tAI\np4\t0\t0\t1\tTheory\n",
    )
    .unwrap();
    // Duplicate, reversed and dangling citations.
    fs::write(
        prefix.with_extension("cites"),
        "p1\tp2\np2\tp1\np2\tp3\np3\tp4\np4\tghost\n",
    )
    .unwrap();
    prefix
}

#[test]
fn citation_text_parses_and_dedups() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = write_toy(dir.path());
    for path in [prefix.with_extension("content"), prefix.clone(), dir.path().to_path_buf()] {
        let d = load_dataset(&path, DatasetFormat::CitationText).unwrap();
        assert_eq!(d.stats_line(), "4 nodes 3 edges 3 features 2 classes");
        assert_eq!(d.class_names, vec!["AI".to_string(), "Theory".to_string()]);
        assert_eq!(d.labels, vec![1, 0, 0, 1]);
    }
}

#[test]
fn malformed_content_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = write_toy(dir.path());
    fs::write(prefix.with_extension("content"), "p1\t1\t0\tA\np2\t1\tB\n").unwrap();
    match load_dataset(&prefix, DatasetFormat::CitationText) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn resolve_prefers_json_and_reports_missing() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = write_toy(dir.path());
    let (p, f) = resolve_dataset(dir.path(), "toy", None).unwrap();
    assert_eq!((p, f), (prefix.with_extension("content"), DatasetFormat::CitationText));
    let d = load_dataset(&prefix, DatasetFormat::CitationText).unwrap();
    save_canonical_json(&d, &dir.path().join("toy.json")).unwrap();
    let (_, f) = resolve_dataset(dir.path(), "toy", None).unwrap();
    assert_eq!(f, DatasetFormat::CanonicalJson);
    let back = load_dataset(dir.path().join("toy.json"), DatasetFormat::CanonicalJson).unwrap();
    assert_eq!(back.stats_line(), d.stats_line());
    assert_eq!(back.graph.edges(), d.graph.edges());
    assert!(matches!(resolve_dataset(dir.path(), "nope", None), Err(Error::DatasetNotFound(_))));
}

#[test]
fn checkpoint_file_reproduces_predictions() {
    let d = synthetic_dataset(SyntheticSpec { nodes: 180, ..SyntheticSpec::default() }, 3).unwrap();
    let split = random_split(&d, SplitProtocol::PER_CLASS, 4).unwrap();
    let mut config = TrainConfig { epochs: 15, seed: 5, ..TrainConfig::default() };
    config.model.variant = Variant::FastGrcn;
    let outcome = train(&config, &d, &split).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let acc = evaluate_checkpoint(&config, &loaded, &d, &split.test).unwrap();
    assert_eq!(acc, outcome.result.test_accuracy_at_best_val);
}

#[test]
fn untrained_grcn_predicts_every_node() {
    let d = synthetic_dataset(SyntheticSpec::default(), 1).unwrap();
    let config = TrainConfig::default();
    let inputs = build_inputs(&config, &d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = GrcnModel::new(ModelConfig::default(), d.feature_dim(), d.class_count(), &mut rng).unwrap();
    let logits = model.predict(&inputs).unwrap();
    assert_eq!(logits.shape(), (d.node_count(), d.class_count()));
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

/// Real benchmark files, when present.
#[test]
fn cora_statistics() {
    let Some(dir) = std::env::var_os("GRCN_DATA_DIR").map(PathBuf::from) else {
        eprintln!("skipping: GRCN_DATA_DIR not set");
        return;
    };
    let Ok((path, format)) = resolve_dataset(&dir, "cora", None) else {
        eprintln!("skipping: no cora under {}", dir.display());
        return;
    };
    let d = load_dataset(path, format).unwrap();
    assert_eq!(d.stats_line(), "2708 nodes 5278 edges 1433 features 7 classes");
}
