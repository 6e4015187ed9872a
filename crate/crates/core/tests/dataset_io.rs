use std::fs;
use std::path::{Path, PathBuf};

use lsgcn::dataset::{load_dataset, save_dataset, synthetic, verify_stats, DatasetError, ExpectedStats, SyntheticSpec};
use lsgcn::Graph;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny3")
}

#[test]
fn hand_written_fixture_loads() {
    let ds = load_dataset(fixture()).unwrap();
    assert_eq!(ds.name, "tiny3");
    assert_eq!(ds.num_nodes(), 3);
    assert_eq!(ds.graph.neighbors(1), &[0, 1, 2]);
    assert_eq!(ds.features.row(2), &[0.0, 0.0, 0.5, 2.0]);
    assert_eq!(ds.feature_nnz(), 5);
    assert_eq!(ds.labels, vec![0, 1, 1]);
    assert_eq!(ds.class_names.as_deref(), Some(&["theory".to_string(), "systems".to_string()][..]));
}

#[test]
fn fixture_round_trips_byte_for_byte() {
    let ds = load_dataset(fixture()).unwrap();
    let out = tempfile::tempdir().unwrap();
    save_dataset(&ds, out.path()).unwrap();
    for name in ["meta.json", "edges.csv", "features.csv", "labels.csv", "splits.json", "checksums.json"] {
        assert_eq!(
            fs::read(out.path().join(name)).unwrap(),
            fs::read(fixture().join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(load_dataset(out.path()).unwrap(), ds);
}

#[test]
fn tampering_with_a_copy_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture()).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    fs::write(dir.path().join("edges.csv"), "0,1\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, DatasetError::Checksum { file, .. } if file == "edges.csv"), "{err}");
}

#[test]
fn synthetic_dataset_survives_disk() {
    let ds = synthetic(&SyntheticSpec::default(), 5);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert!(verify_stats(&back, &ExpectedStats::of(&ds)).all_pass());
}

#[test]
fn one_deleted_edge_fails_only_the_edge_check() {
    let ds = load_dataset(fixture()).unwrap();
    let expected = ExpectedStats::of(&ds);
    let mut tampered = ds.clone();
    tampered.graph = Graph::build(3, &[(1, 2)]).unwrap();
    let report = verify_stats(&tampered, &expected);
    assert_eq!(report.failures(), vec!["edges"]);
    let edge = report.checks.iter().find(|c| c.field == "edges").unwrap();
    assert_eq!((edge.expected, edge.actual), (2, 1));
}
