use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[synthetic]
n_accounts = 240
[txclm]
epochs = 1
d_model = 16
max_seq_len = 32
[magae]
epochs = 2
[cafn]
epochs = 4
"#;

fn txfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_txfuse"))
        .current_dir(dir)
        .env_remove("TXFUSE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = txfuse(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("small.toml"), SMALL).unwrap();
    t
}

#[test]
fn stage_commands_match_a_full_run() {
    let t = setup();
    let d = t.path();
    for stage in ["synth", "ingest", "features", "pretrain-lm", "pretrain-gae", "fuse-train", "evaluate"] {
        ok(d, &["-c", "small.toml", "--out", "stages", stage]);
    }
    ok(d, &["-c", "small.toml", "--out", "full", "run"]);
    for f in ["transactions.jsonl", "labels.csv", "split.csv", "features.csv", "lm.ckpt", "gae.ckpt", "gae_embeddings.bin", "cafn.ckpt"] {
        let a = fs::read(d.join("stages").join(f)).unwrap();
        let b = fs::read(d.join("full").join(f)).unwrap();
        assert!(a == b, "{f} differs between stage-by-stage and full runs");
    }
    let preds = fs::read_to_string(d.join("stages/predictions.csv")).unwrap();
    assert!(preds.starts_with("address,split,label,p_fraud,prediction\n"));
    assert_eq!(preds.lines().count(), 241);
    assert!(d.join("full/manifest.json").exists());
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let t = setup();
    let d = t.path();
    let tx = |out: &str| fs::read(d.join(out).join("transactions.jsonl")).unwrap();
    ok(d, &["-c", "small.toml", "--out", "cfg", "synth"]);
    ok(d, &["-c", "small.toml", "--out", "flag", "--seed", "5", "synth"]);
    let env = Command::new(env!("CARGO_BIN_EXE_txfuse"))
        .current_dir(d)
        .env("TXFUSE_SEED", "5")
        .args(["-c", "small.toml", "--out", "env", "synth"])
        .output()
        .unwrap();
    assert!(env.status.success());
    let both = Command::new(env!("CARGO_BIN_EXE_txfuse"))
        .current_dir(d)
        .env("TXFUSE_SEED", "5")
        .args(["-c", "small.toml", "--out", "both", "--seed", "3", "synth"])
        .output()
        .unwrap();
    assert!(both.status.success());
    assert_eq!(tx("env"), tx("flag"));
    assert_ne!(tx("env"), tx("cfg"));
    assert_eq!(tx("both"), tx("cfg"));

    let bad = Command::new(env!("CARGO_BIN_EXE_txfuse"))
        .current_dir(d)
        .env("TXFUSE_SEED", "seven")
        .args(["-c", "small.toml", "--out", "bad", "synth"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("TXFUSE_SEED"));
}

#[test]
fn flags_override_config_values() {
    let t = setup();
    let d = t.path();
    for stage in ["synth", "ingest"] {
        ok(d, &["-c", "small.toml", "--out", "w", stage]);
    }
    ok(d, &["-c", "small.toml", "--out", "w", "pretrain-lm", "--epochs", "2", "--no-contrastive"]);
    let log = fs::read_to_string(d.join("w/lm-mlm-only_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    ok(d, &["-c", "small.toml", "--out", "w", "synth", "--accounts", "120"]);
    assert_eq!(fs::read_to_string(d.join("w/labels.csv")).unwrap().lines().count(), 121);
}

#[test]
fn sample_bench_writes_csv() {
    let t = setup();
    let d = t.path();
    let stdout = ok(d, &["--out", "b", "sample-bench", "--trials", "3", "--nodes", "300", "--fanout", "5,5"]);
    assert!(stdout.contains("sampler,V0,V1,V2,E0,E1,its"));
    let csv = fs::read_to_string(d.join("b/sample_bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("labor,") && rows[2].starts_with("ns,"));
    ok(d, &["--out", "b", "sample-bench", "--sampler", "ns", "--trials", "2", "--nodes", "100"]);
    assert_eq!(fs::read_to_string(d.join("b/sample_bench.csv")).unwrap().lines().count(), 2);
}

#[test]
fn missing_inputs_fail_with_a_hint() {
    let t = setup();
    let out = txfuse(t.path(), &["--out", "empty", "fuse-train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ingest"), "{err}");
    let out = txfuse(t.path(), &["--out", "empty", "ingest", "--input", "nope.jsonl", "--labels", "nope.csv"]);
    assert!(!out.status.success());
}

#[test]
fn edge_list_input_runs_without_language_branch() {
    let t = setup();
    let d = t.path();
    ok(d, &["-c", "small.toml", "--out", "src", "synth"]);
    ok(d, &["-c", "small.toml", "--out", "src", "ingest"]);
    fs::copy(d.join("src/edges.csv"), d.join("edges.csv")).unwrap();
    fs::copy(d.join("src/labels.csv"), d.join("labels.csv")).unwrap();
    for args in [
        vec!["ingest", "--input", "edges.csv", "--labels", "labels.csv"],
        vec!["features"],
        vec!["pretrain-gae"],
        vec!["fuse-train"],
    ] {
        let mut a = vec!["-c", "small.toml", "--out", "e"];
        a.extend(args);
        ok(d, &a);
    }
    assert!(!d.join("e/corpus.tsv").exists());
    assert!(d.join("e/report.json").exists());
}

#[test]
fn shipped_config_runs() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    let stdout = ok(t.path(), &["-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "run"]);
    assert!(stdout.contains("test F1"), "{stdout}");
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
}
