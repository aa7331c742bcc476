//! The `clusum` binary: subcommands, configuration layering and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
hidden_size = 16
num_blocks = 1
num_heads = 2
ffn_size = 32
max_len = 16

[pretrain]
epochs = 2

[decoder]
epochs = 2

[sampler]
num_candidates = 3
max_summary_len = 8
"#;

fn clusum(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clusum"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let out = clusum(
        dir,
        &[
            "synth-corpus",
            "--out",
            "corpus.jsonl",
            "--docs",
            "24",
            "--words",
            "8",
            "--labeled",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn steps_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    for step in [
        "build-vocab",
        "pretrain",
        "cluster",
        "train-decoder",
        "summarize",
        "evaluate",
    ] {
        let out = clusum(dir.path(), &["--config", "tiny.toml", "-k", "3", step]);
        assert!(
            out.status.success(),
            "{step}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = clusum(
        dir.path(),
        &["--config", "tiny.toml", "-k", "3", "evaluate"],
    );
    let text = stdout(&out);
    assert!(text.contains("cosine_center"));
    assert!(text.contains("purity"));
    let summaries = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("summaries-")
        })
        .unwrap();
    assert_eq!(fs::read_to_string(summaries).unwrap().lines().count(), 3);
}

#[test]
fn run_all_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = clusum(
        dir.path(),
        &[
            "--config",
            "tiny.toml",
            "--mode",
            "labels",
            "--set",
            "finetune.epochs=30",
            "--set",
            "finetune.optimizer.learning_rate=3e-3",
            "run-all",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("summaries-"));
}

#[test]
fn command_line_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "seed = 4\n[decoder]\nepochs = 7\n",
    )
    .unwrap();
    let out = clusum(
        dir.path(),
        &[
            "--config",
            "c.toml",
            "--set",
            "decoder.epochs=3",
            "show-config",
        ],
    );
    assert!(out.status.success());
    let shown: toml::Table = toml::from_str(&stdout(&out)).unwrap();
    assert_eq!(shown["decoder"]["epochs"].as_integer(), Some(3));
    assert_eq!(shown["seed"].as_integer(), Some(4));
    assert_eq!(shown["sampler"]["top_k"].as_integer(), Some(50));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());

    let usage = clusum(dir.path(), &["--set", "decoder.epoch=3", "show-config"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("decoder.epoch"));

    let io = clusum(dir.path(), &["--corpus", "missing.jsonl", "build-vocab"]);
    assert_eq!(io.status.code(), Some(3));

    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"id\":\"a\",\"text\":\"x\"}\nnot json\n",
    )
    .unwrap();
    let data = clusum(dir.path(), &["--corpus", "bad.jsonl", "build-vocab"]);
    assert_eq!(data.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&data.stderr).contains(":2:"));

    for step in ["build-vocab", "pretrain", "cluster"] {
        assert!(clusum(dir.path(), &["--config", "tiny.toml", step])
            .status
            .success());
    }
    let mismatch = clusum(
        dir.path(),
        &["--config", "tiny.toml", "--seed", "9", "train-decoder"],
    );
    assert_eq!(mismatch.status.code(), Some(5));
}
