//! End-to-end behaviour of the pipeline on a tiny model.

use std::fs;
use std::path::Path;

use clusum::corpus::{write_corpus, CorpusRecord};
use clusum::generator::read_summaries;
use clusum::model::Checkpoint;
use clusum::pipeline::{parse_override, Manifest, Pipeline, PipelineConfig, Stage};
use clusum::synthetic::{topics, TopicSpec};
use clusum::Error;

fn corpus(dir: &Path, labeled: bool) -> std::path::PathBuf {
    let records = topics(&TopicSpec {
        docs: 24,
        words_per_topic: 8,
        min_len: 4,
        max_len: 8,
        labeled,
        seed: 3,
        ..TopicSpec::default()
    })
    .unwrap();
    let path = dir.join("corpus.jsonl");
    write_corpus(&path, &records).unwrap();
    path
}

fn config(corpus: &Path, work: &Path, extra: &[&str]) -> PipelineConfig {
    let mut overrides: Vec<String> = vec![
        format!("paths.corpus={:?}", corpus.display().to_string()),
        format!("paths.work_dir={:?}", work.display().to_string()),
        "model.hidden_size=16".into(),
        "model.num_blocks=1".into(),
        "model.num_heads=2".into(),
        "model.ffn_size=32".into(),
        "model.max_len=16".into(),
        "pretrain.epochs=2".into(),
        "finetune.epochs=2".into(),
        "decoder.epochs=2".into(),
        "sampler.num_candidates=3".into(),
        "sampler.max_summary_len=8".into(),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let parsed: Vec<_> = overrides
        .iter()
        .map(|o| parse_override(o).unwrap())
        .collect();
    PipelineConfig::load(None, &parsed).unwrap()
}

#[test]
fn run_all_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let a = Pipeline::open(config(
        &corpus,
        &dir.path().join("a"),
        &["sampler.keep_top=2"],
    ))
    .unwrap();
    let b = Pipeline::open(config(
        &corpus,
        &dir.path().join("b"),
        &["sampler.keep_top=2"],
    ))
    .unwrap();
    let ra = a.run_all().unwrap();
    let rb = b.run_all().unwrap();
    assert_eq!(
        fs::read(&ra.summaries).unwrap(),
        fs::read(&rb.summaries).unwrap()
    );
    assert_eq!(
        fs::read(&ra.metrics).unwrap(),
        fs::read(&rb.metrics).unwrap()
    );
    assert_eq!(
        fs::read(&ra.clusters).unwrap(),
        fs::read(&rb.clusters).unwrap()
    );

    let summaries = read_summaries(&ra.summaries).unwrap();
    assert_eq!(summaries.len(), 2 * 2);
    assert!(summaries
        .iter()
        .all(|s| s.seed == 0 && (-1.0..=1.0).contains(&s.score)));
    assert_eq!(ra.report.clusters, 2);
    assert!(ra.report.purity.is_none());

    let manifest = Manifest::load(a.work_dir()).unwrap();
    for name in [&ra.summaries, &ra.metrics, &ra.decoder, &ra.clusters] {
        let name = name.file_name().unwrap().to_str().unwrap();
        let record = &manifest.artifacts[name];
        assert_eq!(record.seed, 0);
        assert!(record.versions.contains_key("clusum"));
        assert_eq!(record.sha256.len(), 64);
    }
}

#[test]
fn later_steps_refuse_artifacts_of_another_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let work = dir.path().join("w");
    Pipeline::open(config(&corpus, &work, &[]))
        .unwrap()
        .run_phase1()
        .unwrap();

    // a changed pretraining setting invalidates the cluster file
    let changed = Pipeline::open(config(&corpus, &work, &["pretrain.epochs=3"])).unwrap();
    assert!(matches!(
        changed.train_decoder(),
        Err(Error::HashMismatch { .. })
    ));

    // a decoder setting leaves phase I usable
    let decoder_only = Pipeline::open(config(&corpus, &work, &["decoder.epochs=1"])).unwrap();
    decoder_only.train_decoder().unwrap();

    // tampering with an artifact is detected
    let same = Pipeline::open(config(&corpus, &work, &[])).unwrap();
    let clusters = same.artifact_path(Stage::Cluster).unwrap();
    let mut bytes = fs::read(&clusters).unwrap();
    bytes.extend_from_slice(b"\n");
    fs::write(&clusters, bytes).unwrap();
    let err = same.train_decoder().unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }));
    assert_eq!(err.category().exit_code(), 5);
}

#[test]
fn missing_inputs_name_the_step_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let p = Pipeline::open(config(&corpus, &dir.path().join("w"), &[])).unwrap();
    assert!(matches!(p.pretrain(), Err(Error::Config(_))));
}

#[test]
fn labels_mode_uses_one_cluster_per_label() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), true);
    let p = Pipeline::open(config(
        &corpus,
        &dir.path().join("w"),
        &[
            "clustering.mode=\"labels\"",
            "clustering.k=5",
            "finetune.epochs=30",
            "finetune.optimizer.learning_rate=3e-3",
        ],
    ))
    .unwrap();
    p.run_phase1().unwrap();
    let set = p.load_clusters().unwrap();
    assert_eq!(set.k(), 2);
    assert_eq!(set.labels, vec!["topic0", "topic1"]);

    let no_labels = Pipeline::open(config(
        &corpus,
        &dir.path().join("n"),
        &[
            "clustering.mode=\"labels\"",
            "ablations.no_labels=true",
            "clustering.k=5",
        ],
    ))
    .unwrap();
    no_labels.run_phase1().unwrap();
    let set = no_labels.load_clusters().unwrap();
    assert_eq!(set.k(), 2);
    assert!(set.labels.is_empty());
    assert!(matches!(no_labels.finetune(), Err(Error::Config(_))));
}

#[test]
fn labels_mode_rejects_unlabeled_documents() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let records = vec![
        CorpusRecord {
            id: "a".into(),
            text: "x y".into(),
            label: Some("p".into()),
        },
        CorpusRecord {
            id: "b".into(),
            text: "y z".into(),
            label: None,
        },
    ];
    write_corpus(&path, &records).unwrap();
    let work = dir.path().join("w");
    assert!(Pipeline::open(config(&path, &work, &[])).is_ok());
    assert!(Pipeline::open(config(&path, &work, &["clustering.mode=\"labels\""])).is_err());
}

#[test]
fn ablations_are_applied_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path(), false);
    let p = Pipeline::open(config(
        &corpus,
        &dir.path().join("w"),
        &[
            "ablations.no_pretraining=true",
            "ablations.no_decoder_init=true",
            "decoder.epochs=0",
        ],
    ))
    .unwrap();
    p.run_phase1().unwrap();
    p.train_decoder().unwrap();

    let encoder = Checkpoint::load(&p.artifact_path(Stage::Pretrain).unwrap()).unwrap();
    assert_eq!(encoder.meta["pretrained"], "false");
    assert!(encoder.meta["ablations"].contains("\"no_pretraining\":true"));
    let history = fs::read_to_string(p.work_dir().join(format!(
        "pretrain-history-{}.json",
        &p.stage_hash(Stage::Pretrain).unwrap()[..16]
    )))
    .unwrap();
    assert_eq!(history.trim(), "[]");

    let decoder = Checkpoint::load(&p.artifact_path(Stage::Decoder).unwrap()).unwrap();
    assert_eq!(decoder.meta["initialized_from_encoder"], "false");
    for (_, name, tensor) in decoder.params.iter() {
        let Some(source) = clusum::decoder::encoder_source(name) else {
            continue;
        };
        let original = encoder.params.by_name(&source).unwrap();
        let weight = name.ends_with("weight") && !name.contains("norm");
        if weight && tensor.data().iter().any(|&v| v != 0.0) {
            assert_ne!(tensor.data(), original.data(), "{name}");
        }
    }
}
