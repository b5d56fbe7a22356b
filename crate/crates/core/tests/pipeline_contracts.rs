use std::collections::BTreeSet;
use std::path::PathBuf;

use txfuse::harness::split::{components, greedy_counts};
use txfuse::harness::{DataSource, ExperimentConfig, Manifest, Pipeline, PipelineAblation};
use txfuse::rng;

fn small(dir: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(2);
    cfg.output_dir = dir;
    cfg.synthetic.n_accounts = 200;
    cfg.txclm.epochs = 1;
    cfg.txclm.d_model = 16;
    cfg.txclm.max_seq_len = 32;
    cfg.magae.epochs = 2;
    cfg.cafn.epochs = 3;
    cfg
}

#[test]
fn manifest_reports_all_test_metrics() {
    let t = tempfile::tempdir().unwrap();
    let m = Pipeline::run_recorded(small(t.path().into())).unwrap();
    let test = &m.report.as_ref().unwrap().metrics["test"];
    for v in [test.precision, test.recall, test.f1, test.balanced_accuracy] {
        assert!((0.0..=1.0).contains(&v));
    }
    let on_disk: Manifest = serde_json::from_str(&std::fs::read_to_string(t.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, m);
    let csv = std::fs::read_to_string(t.path().join("report.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("split,Precision,Recall,F1,BAcc"), "{csv}");
    assert!(t.path().join("config.toml").exists());
}

#[test]
fn ablations_drop_stages() {
    let t = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(small(t.path().into()));
    p.run_variant(PipelineAblation::None).unwrap();
    let full: Vec<&str> = p.stages().to_vec();
    p.run_variant(PipelineAblation::NoLm).unwrap();
    let no_lm: Vec<&str> = p.stages().to_vec();
    p.run_variant(PipelineAblation::NoGraph).unwrap();
    let no_graph: Vec<&str> = p.stages().to_vec();
    assert_eq!(full.len(), 8);
    assert!(no_lm.len() < full.len() && !no_lm.contains(&"pretrain-lm"));
    assert!(no_graph.len() < full.len() && !no_graph.contains(&"pretrain-gae"));
}

#[test]
fn failures_leave_a_partial_manifest() {
    let t = tempfile::tempdir().unwrap();
    let mut cfg = small(t.path().into());
    cfg.data = DataSource::Jsonl { path: t.path().join("missing.jsonl"), labels: t.path().join("missing.csv") };
    assert!(Pipeline::run_recorded(cfg).is_err());
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(t.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.failure.as_ref().unwrap().stage, "load");
    assert!(m.report.is_none());
    assert!(!t.path().join("report.json").exists());
}

#[test]
fn named_streams_are_distinct() {
    use rand::RngCore;
    let names = ["synth", "split", "txclm-init", "txclm-mask", "magae-init", "cafn-init", "random-features"];
    let firsts: BTreeSet<u64> = names.iter().map(|n| rng::stream(7, n).next_u64()).collect();
    assert_eq!(firsts.len(), names.len());
    assert_ne!(rng::stream(7, "split").next_u64(), rng::stream(8, "split").next_u64());
}

#[test]
fn greedy_component_counts_track_ratios() {
    let parts = greedy_counts(100, [0.7, 0.1, 0.2]);
    let count = |p| parts.iter().filter(|&&q| q == p).count() as i64;
    use txfuse::harness::Part;
    assert!((count(Part::Train) - 70).abs() <= 1);
    assert!((count(Part::Val) - 10).abs() <= 1);
    assert!((count(Part::Test) - 20).abs() <= 1);
    let adj = vec![vec![1], vec![0], vec![], vec![4], vec![3]];
    assert_eq!(components(&adj).len(), 3);
}
