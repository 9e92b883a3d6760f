//! Error-path checks against the real binary: stage-specific exit codes,
//! line-numbered JSONL errors and fingerprint refusal.

use std::path::Path;
use std::process::{Command, Output};

fn deskqa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskqa"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_CORPUS: &str = r#"
[corpus]
num_docs = 8
vocab_size = 128
node_count = [2, 3]
node_len = [4, 6]
distractor_rate = 0.2
seed = 3
"#;

#[test]
fn missing_config_exits_with_the_missing_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = deskqa(
        &["gen-corpus", "--spec", "nope.toml", "--out", "corpus"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn invalid_mixture_exits_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[corpus]\nnum_docs = 4\n[corpus.mixture]\nno_answer = 0.9\nyes = 0.9\nno = 0.0\nsingle_span = 0.0\nmulti_span = 0.0\nlong_only = 0.0\n",
    );
    let out = deskqa(
        &["gen-corpus", "--spec", cfg.to_str().unwrap(), "--out", "corpus"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn train_without_a_corpus_exits_with_the_missing_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CORPUS);
    let out = deskqa(&["train-mrc", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn malformed_corpus_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CORPUS);
    let ok = deskqa(
        &["gen-corpus", "--spec", cfg.to_str().unwrap(), "--out", "corpus"],
        dir.path(),
    );
    assert!(ok.status.success(), "{ok:?}");

    // Corrupt line 2 of the corpus, then make eval read it.
    let corpus_file = dir.path().join("corpus/corpus.jsonl");
    let text = std::fs::read_to_string(&corpus_file).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{broken";
    std::fs::write(&corpus_file, lines.join("\n")).unwrap();

    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, "").unwrap();
    let out = deskqa(
        &[
            "eval",
            "--pred",
            preds.to_str().unwrap(),
            "--gold",
            "corpus",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(":2:"), "line number missing: {stderr}");
}

#[test]
fn mismatched_fingerprints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CORPUS);
    let ok = deskqa(
        &["gen-corpus", "--spec", cfg.to_str().unwrap(), "--out", "corpus"],
        dir.path(),
    );
    assert!(ok.status.success(), "{ok:?}");

    // A prediction file whose sidecar names a different corpus.
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, "").unwrap();
    std::fs::write(
        dir.path().join("preds.jsonl.meta.json"),
        r#"{"version":1,"fingerprint":"deadbeef","created_by":"test"}"#,
    )
    .unwrap();
    let out = deskqa(
        &[
            "eval",
            "--pred",
            preds.to_str().unwrap(),
            "--gold",
            "corpus",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(5), "{out:?}");
}

#[test]
fn predictions_without_a_sidecar_are_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CORPUS);
    assert!(deskqa(
        &["gen-corpus", "--spec", cfg.to_str().unwrap(), "--out", "corpus"],
        dir.path(),
    )
    .status
    .success());
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&preds, "").unwrap();
    let out = deskqa(
        &[
            "eval",
            "--pred",
            preds.to_str().unwrap(),
            "--gold",
            "corpus",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}
