//! End-to-end orchestration. Each step reads the artifacts of the steps
//! before it and writes its own under a name carrying the hash of the
//! configuration that determines it, so changing a setting never mixes
//! results of different runs.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{
    parse_override, Ablations, ClusterMode, ClusteringConfig, DecoderStage, EvaluateConfig,
    ModelOverrides, Paths, PipelineConfig, Preset, VocabConfig,
};
pub use manifest::{digest, file_digest, versions, ArtifactRecord, Manifest, MANIFEST_FILE};

use crate::clusterer::{cluster_with_labels, cluster_without_labels, embed_documents, ClusterSet};
use crate::corpus::{encode_corpus, label_set, load_corpus, CorpusRecord};
use crate::decoder::{train_decoder, DecoderEpoch, DecoderModel, TrainingExample};
use crate::encoder::{fine_tune_classifier, pretrain_mlm, EncoderModel};
use crate::error::{Error, Result};
use crate::generator::{
    embed_summary, read_summaries, retained, summarize_cluster, write_summaries, SummaryCandidate,
    SummaryRecord,
};
use crate::metrics::{
    best_of, cluster_purity, cosine_center, cosine_top_k, rouge_l, rouge_n, ClusterView,
    MetricsReport, RougeScore, RougeTriple,
};
use crate::model::{Checkpoint, ModelConfig};
use crate::seeding;
use crate::tokenizer::{build_vocab, tokenize, EncodedDocument, Vocabulary, CLS};

/// Steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vocab,
    Pretrain,
    Finetune,
    Cluster,
    Decoder,
    Summaries,
    Metrics,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vocab => "vocab",
            Stage::Pretrain => "encoder",
            Stage::Finetune => "encoder-finetuned",
            Stage::Cluster => "clusters",
            Stage::Decoder => "decoder",
            Stage::Summaries => "summaries",
            Stage::Metrics => "metrics",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Stage::Vocab => "txt",
            Stage::Pretrain | Stage::Finetune | Stage::Decoder => "ckpt",
            Stage::Cluster | Stage::Summaries => "jsonl",
            Stage::Metrics => "json",
        }
    }
}

/// One reference summary line: `{"cluster": 0, "text": ..}` or
/// `{"label": "name", "text": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub text: String,
}

/// Files written by a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub clusters: PathBuf,
    pub decoder: PathBuf,
    pub summaries: PathBuf,
    pub metrics: PathBuf,
    pub report: MetricsReport,
}

/// A configuration bound to its corpus and work directory.
pub struct Pipeline {
    config: PipelineConfig,
    records: Vec<CorpusRecord>,
    corpus_sha: String,
    dir: PathBuf,
}

impl Pipeline {
    /// Loads and checks the corpus named by the configuration.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let records = load_corpus(&config.paths.corpus)?;
        if config.needs_labels() {
            let labels = label_set(&records)?;
            if labels.len() < 2 && !config.ablations.no_labels {
                return Err(Error::Data(format!(
                    "labels mode needs at least two distinct labels, found {}",
                    labels.len()
                )));
            }
        }
        let corpus_sha = file_digest(&config.paths.corpus)?;
        let dir = config.paths.work_dir.clone();
        fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Pipeline {
            config,
            records,
            corpus_sha,
            dir,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn work_dir(&self) -> &Path {
        &self.dir
    }

    fn json<T: Serialize>(value: &T) -> Result<String> {
        Ok(serde_json::to_string(value)?)
    }

    /// Hash of everything that determines the artifact of `stage`.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let seed = c.seed.to_string();
        Ok(match stage {
            Stage::Vocab => digest(&["vocab", &self.corpus_sha, &Self::json(&c.vocab)?]),
            Stage::Pretrain => digest(&[
                "encoder",
                &self.stage_hash(Stage::Vocab)?,
                &Self::json(&c.preset)?,
                &Self::json(&c.model)?,
                &Self::json(&c.pretrain)?,
                &c.ablations.no_pretraining.to_string(),
                &seed,
            ]),
            Stage::Finetune => digest(&[
                "finetune",
                &self.stage_hash(Stage::Pretrain)?,
                &Self::json(&c.finetune)?,
            ]),
            Stage::Cluster => digest(&[
                "clusters",
                &self.stage_hash(self.cluster_encoder_stage())?,
                &Self::json(&c.clustering)?,
                &c.ablations.no_labels.to_string(),
                &seed,
            ]),
            Stage::Decoder => digest(&[
                "decoder",
                &self.stage_hash(Stage::Cluster)?,
                &Self::json(&c.decoder)?,
                &c.ablations.no_decoder_init.to_string(),
                &c.ablations.unweighted_ce.to_string(),
            ]),
            Stage::Summaries => digest(&[
                "summaries",
                &self.stage_hash(Stage::Decoder)?,
                &Self::json(&c.sampler)?,
            ]),
            Stage::Metrics => {
                let references = match &c.paths.references {
                    Some(p) => file_digest(p)?,
                    None => String::new(),
                };
                digest(&[
                    "metrics",
                    &self.stage_hash(Stage::Summaries)?,
                    &Self::json(&c.evaluate)?,
                    &references,
                ])
            }
        })
    }

    /// Hash of the whole resolved configuration and corpus.
    pub fn config_hash(&self) -> Result<String> {
        Ok(digest(&[
            "config",
            &self.corpus_sha,
            &Self::json(&self.config)?,
        ]))
    }

    /// Encoder whose embeddings drive clustering and decoding.
    fn cluster_encoder_stage(&self) -> Stage {
        if self.config.uses_labels() {
            Stage::Finetune
        } else {
            Stage::Pretrain
        }
    }

    fn artifact_name(&self, stage: Stage) -> Result<String> {
        Ok(format!(
            "{}-{}.{}",
            stage.name(),
            &self.stage_hash(stage)?[..16],
            stage.extension()
        ))
    }

    /// Path of the artifact of `stage` under the current configuration.
    pub fn artifact_path(&self, stage: Stage) -> Result<PathBuf> {
        Ok(self.dir.join(self.artifact_name(stage)?))
    }

    fn side_file(&self, stage: Stage, kind: &str, ext: &str) -> Result<PathBuf> {
        Ok(self
            .dir
            .join(format!("{kind}-{}.{ext}", &self.stage_hash(stage)?[..16])))
    }

    fn record(&self, stage: Stage, files: &[&Path], inputs: &[Stage]) -> Result<()> {
        let mut manifest = Manifest::load(&self.dir)?;
        let config_hash = self.stage_hash(stage)?;
        let inputs = inputs
            .iter()
            .map(|&s| self.artifact_name(s))
            .collect::<Result<Vec<_>>>()?;
        for path in files {
            let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
                Error::Contract(format!("artifact path {} has no file name", path.display()))
            })?;
            manifest.artifacts.insert(
                name.to_string(),
                ArtifactRecord {
                    stage: stage.name().to_string(),
                    config_hash: config_hash.clone(),
                    sha256: file_digest(path)?,
                    seed: self.config.seed,
                    inputs: inputs.clone(),
                    ablations: self.config.ablations,
                    versions: versions(),
                },
            );
        }
        manifest.save(&self.dir)
    }

    /// Path of a verified input artifact.
    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let name = self.artifact_name(stage)?;
        Manifest::load(&self.dir)?.verify(
            &self.dir,
            &name,
            stage.name(),
            &self.stage_hash(stage)?,
        )?;
        Ok(self.dir.join(name))
    }

    fn meta(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut meta = versions();
        meta.insert("config_hash".into(), self.stage_hash(stage)?);
        meta.insert("seed".into(), self.config.seed.to_string());
        meta.insert("ablations".into(), Self::json(&self.config.ablations)?);
        Ok(meta)
    }

    fn load_checkpoint(&self, stage: Stage) -> Result<Checkpoint> {
        let path = self.require(stage)?;
        let ckpt = Checkpoint::load(&path)?;
        let expected = self.stage_hash(stage)?;
        match ckpt.meta.get("config_hash") {
            Some(found) if *found == expected => Ok(ckpt),
            found => Err(Error::HashMismatch {
                expected,
                found: found.cloned().unwrap_or_default(),
            }),
        }
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.require(Stage::Vocab)?)
    }

    pub fn load_encoder(&self, stage: Stage) -> Result<EncoderModel> {
        EncoderModel::from_checkpoint(self.load_checkpoint(stage)?)
    }

    /// Encoder used for clustering, decoder initialization and scoring.
    pub fn cluster_encoder(&self) -> Result<EncoderModel> {
        self.load_encoder(self.cluster_encoder_stage())
    }

    pub fn load_clusters(&self) -> Result<ClusterSet> {
        ClusterSet::load(&self.require(Stage::Cluster)?)
    }

    pub fn load_decoder(&self) -> Result<DecoderModel> {
        DecoderModel::from_checkpoint(self.load_checkpoint(Stage::Decoder)?)
    }

    fn documents(
        &self,
        vocab: &Vocabulary,
        max_len: usize,
        labels: Option<&[String]>,
    ) -> Result<Vec<EncodedDocument>> {
        encode_corpus(&self.records, vocab, max_len, labels)
    }

    fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        self.config.model_config(vocab.len())
    }

    pub fn build_vocab(&self) -> Result<PathBuf> {
        let v = &self.config.vocab;
        let vocab = build_vocab(
            self.records.iter().map(|r| r.text.as_str()),
            v.max_size,
            v.min_count,
        )?;
        let path = self.artifact_path(Stage::Vocab)?;
        vocab.save(&path)?;
        self.record(Stage::Vocab, &[&path], &[])?;
        log::info!(
            "vocabulary of {} tokens written to {}",
            vocab.len(),
            path.display()
        );
        Ok(path)
    }

    /// MLM pretraining, or a randomly initialized encoder under
    /// `no_pretraining`.
    pub fn pretrain(&self) -> Result<PathBuf> {
        let vocab = self.load_vocab()?;
        let cfg = self.model_config(&vocab)?;
        let docs = self.documents(&vocab, cfg.max_len, None)?;
        let mut encoder = EncoderModel::new(
            cfg,
            &mut seeding::stream(self.config.seed, "encoder-init", &[]),
        )?;
        let history = if self.config.ablations.no_pretraining {
            log::info!("pretraining skipped; encoder keeps its random initialization");
            Vec::new()
        } else {
            pretrain_mlm(&mut encoder, &docs, &self.config.pretrain)?
        };
        let mut meta = self.meta(Stage::Pretrain)?;
        meta.insert(
            "pretrained".into(),
            (!self.config.ablations.no_pretraining).to_string(),
        );
        let path = self.artifact_path(Stage::Pretrain)?;
        encoder.to_checkpoint(meta)?.save(&path)?;
        let history_path = self.side_file(Stage::Pretrain, "pretrain-history", "json")?;
        Self::write_json(&history_path, &history)?;
        self.record(Stage::Pretrain, &[&path, &history_path], &[Stage::Vocab])?;
        Ok(path)
    }

    /// Trains the label classifier on top of the pretrained encoder.
    pub fn finetune(&self) -> Result<PathBuf> {
        if !self.config.uses_labels() {
            return Err(Error::Config(
                "fine-tuning needs clustering.mode = \"labels\" without the no_labels ablation"
                    .into(),
            ));
        }
        let vocab = self.load_vocab()?;
        let mut encoder = self.load_encoder(Stage::Pretrain)?;
        let labels = label_set(&self.records)?;
        let docs = self.documents(&vocab, encoder.config().max_len, Some(&labels))?;
        encoder.set_classifier(
            labels.clone(),
            &mut seeding::stream(self.config.seed, "classifier-init", &[]),
        )?;
        let report = fine_tune_classifier(&mut encoder, &docs, labels, &self.config.finetune)?;
        let path = self.artifact_path(Stage::Finetune)?;
        encoder
            .to_checkpoint(self.meta(Stage::Finetune)?)?
            .save(&path)?;
        let report_path = self.side_file(Stage::Finetune, "finetune-report", "json")?;
        Self::write_json(&report_path, &report)?;
        self.record(
            Stage::Finetune,
            &[&path, &report_path],
            &[Stage::Vocab, Stage::Pretrain],
        )?;
        Ok(path)
    }

    /// Groups documents by predicted label or by k-means.
    pub fn cluster(&self) -> Result<PathBuf> {
        let vocab = self.load_vocab()?;
        let encoder = self.cluster_encoder()?;
        let docs = self.documents(&vocab, encoder.config().max_len, None)?;
        let set = if self.config.uses_labels() {
            cluster_with_labels(&encoder, &docs)?
        } else {
            let k = if self.config.needs_labels() {
                label_set(&self.records)?.len()
            } else {
                self.config.clustering.k
            };
            cluster_without_labels(&encoder, &docs, &self.config.kmeans(k))?
        };
        let path = self.artifact_path(Stage::Cluster)?;
        set.save(&path)?;
        self.record(
            Stage::Cluster,
            &[&path],
            &[Stage::Vocab, self.cluster_encoder_stage()],
        )?;
        log::info!("{} clusters written to {}", set.k(), path.display());
        Ok(path)
    }

    /// Phase I: vocabulary, encoder, optional fine-tuning, clusters.
    pub fn run_phase1(&self) -> Result<PathBuf> {
        self.build_vocab()?;
        self.pretrain()?;
        if self.config.uses_labels() {
            self.finetune()?;
        }
        self.cluster()
    }

    /// Reconstruction examples in corpus order with their membership weights.
    pub fn training_examples(
        &self,
        encoder: &EncoderModel,
        vocab: &Vocabulary,
        set: &ClusterSet,
    ) -> Result<Vec<TrainingExample>> {
        let docs = self.documents(vocab, encoder.config().max_len, None)?;
        if docs.len() != set.members.len() {
            return Err(Error::Data(format!(
                "cluster file lists {} documents, corpus has {}",
                set.members.len(),
                docs.len()
            )));
        }
        let embeddings = embed_documents(encoder, &docs)?;
        docs.iter()
            .zip(embeddings)
            .zip(&set.members)
            .map(|((doc, emb), m)| {
                if m.doc_id != doc.doc_id {
                    return Err(Error::Data(format!(
                        "cluster file lists {:?} where the corpus has {:?}",
                        m.doc_id, doc.doc_id
                    )));
                }
                TrainingExample::from_document(doc, emb, m.weight, CLS)
            })
            .collect()
    }

    /// Trains the decoder on every document's reconstruction, holding out
    /// `decoder.validation_fraction` for the per-epoch validation loss.
    pub fn train_decoder(&self) -> Result<PathBuf> {
        let vocab = self.load_vocab()?;
        let encoder = self.cluster_encoder()?;
        let set = self.load_clusters()?;
        let mut examples = self.training_examples(&encoder, &vocab, &set)?;
        examples.shuffle(&mut seeding::stream(self.config.seed, "decoder-split", &[]));
        let n = examples.len();
        let val = ((self.config.decoder.validation_fraction * n as f64).round() as usize)
            .min(n.saturating_sub(1));
        let (validation, train) = if val == 0 {
            (examples.clone(), examples)
        } else {
            let train = examples.split_off(val);
            (examples, train)
        };
        let cfg = *encoder.config();
        let mut decoder = if self.config.ablations.no_decoder_init {
            DecoderModel::new(
                cfg,
                &mut seeding::stream(self.config.seed, "decoder-init", &[]),
            )?
        } else {
            DecoderModel::from_encoder(&encoder, cfg)?
        };
        let train_cfg = crate::decoder::DecoderTrainConfig {
            unweighted: self.config.decoder.train.unweighted || self.config.ablations.unweighted_ce,
            ..self.config.decoder.train
        };
        let history: Vec<DecoderEpoch> =
            train_decoder(&mut decoder, &train, &validation, &train_cfg)?;
        let mut meta = self.meta(Stage::Decoder)?;
        meta.insert(
            "initialized_from_encoder".into(),
            (!self.config.ablations.no_decoder_init).to_string(),
        );
        let path = self.artifact_path(Stage::Decoder)?;
        decoder.to_checkpoint(meta).save(&path)?;
        let history_path = self.side_file(Stage::Decoder, "decoder-history", "json")?;
        Self::write_json(&history_path, &history)?;
        self.record(
            Stage::Decoder,
            &[&path, &history_path],
            &[Stage::Vocab, self.cluster_encoder_stage(), Stage::Cluster],
        )?;
        Ok(path)
    }

    /// Samples, ranks and keeps summaries for every cluster.
    pub fn summarize(&self) -> Result<PathBuf> {
        let vocab = self.load_vocab()?;
        let encoder = self.cluster_encoder()?;
        let set = self.load_clusters()?;
        let decoder = self.load_decoder()?;
        let sampler = &self.config.sampler;
        let mut kept = Vec::new();
        let mut all: Vec<SummaryCandidate> = Vec::new();
        for (c, center) in set.centers.iter().enumerate() {
            let ranked = summarize_cluster(&decoder, &encoder, &vocab, c, center, sampler)?;
            let empty = ranked.iter().filter(|r| r.empty).count();
            if empty > 0 {
                log::warn!(
                    "cluster {c}: {empty} of {} candidates are empty",
                    ranked.len()
                );
            }
            kept.extend(
                retained(&ranked, sampler)
                    .into_iter()
                    .map(|r| SummaryRecord::new(r, sampler.seed)),
            );
            all.extend(ranked);
        }
        let path = self.artifact_path(Stage::Summaries)?;
        write_summaries(&path, &kept)?;
        let candidates_path = self.side_file(Stage::Summaries, "candidates", "jsonl")?;
        let mut lines = String::new();
        for c in &all {
            lines.push_str(&serde_json::to_string(c)?);
            lines.push('\n');
        }
        fs::write(&candidates_path, lines)
            .map_err(|e| Error::io(format!("writing {}", candidates_path.display()), e))?;
        self.record(
            Stage::Summaries,
            &[&path, &candidates_path],
            &[
                Stage::Vocab,
                self.cluster_encoder_stage(),
                Stage::Cluster,
                Stage::Decoder,
            ],
        )?;
        log::info!("{} summaries written to {}", kept.len(), path.display());
        Ok(path)
    }

    /// Surrogate cosines always; ROUGE with references; purity when every
    /// document is labeled.
    pub fn evaluate(&self) -> Result<(PathBuf, MetricsReport)> {
        let vocab = self.load_vocab()?;
        let encoder = self.cluster_encoder()?;
        let set = self.load_clusters()?;
        let summaries = read_summaries(&self.require(Stage::Summaries)?)?;
        let k = set.k();

        let mut best: Vec<Option<&SummaryRecord>> = vec![None; k];
        for s in &summaries {
            let slot = best
                .get_mut(s.cluster)
                .ok_or_else(|| Error::Data(format!("summary for unknown cluster {}", s.cluster)))?;
            if slot.is_none_or(|b| s.rank < b.rank) {
                *slot = Some(s);
            }
        }
        let best: Vec<&SummaryRecord> = best
            .into_iter()
            .enumerate()
            .map(|(c, s)| {
                s.ok_or_else(|| Error::Data(format!("cluster {c} has no retained summary")))
            })
            .collect::<Result<_>>()?;
        let summary_embeddings = best
            .iter()
            .map(|s| embed_summary(&encoder, &vocab.ids(&s.text)))
            .collect::<Result<Vec<_>>>()?;

        let docs = self.documents(&vocab, encoder.config().max_len, None)?;
        let embeddings = embed_documents(&encoder, &docs)?;
        let clusters = set.clusters();
        let views: Vec<ClusterView<'_>> = clusters
            .iter()
            .enumerate()
            .map(|(c, members)| ClusterView {
                center: &set.centers[c],
                summary: &summary_embeddings[c],
                members: members
                    .iter()
                    .map(|&i| (set.members[i].doc_id.as_str(), embeddings[i].as_slice()))
                    .collect(),
            })
            .collect();
        let largest = clusters.iter().map(Vec::len).max().unwrap_or(1);
        let cosine_top_k = self
            .config
            .evaluate
            .ks(largest)
            .into_iter()
            .map(|kk| cosine_top_k(&views, kk))
            .collect::<Result<Vec<_>>>()?;

        let purity = if self.records.iter().all(|r| r.label.is_some()) {
            let gold: Vec<&str> = self
                .records
                .iter()
                .map(|r| r.label.as_deref().unwrap_or_default())
                .collect();
            Some(cluster_purity(&set.assignment(), &gold)?)
        } else {
            None
        };

        let rouge = match &self.config.paths.references {
            Some(path) => Some(self.rouge(path, &set, &best)?),
            None => None,
        };

        let report = MetricsReport {
            clusters: k,
            rouge,
            cosine_center: cosine_center(&summary_embeddings, &set.centers)?,
            cosine_top_k,
            purity,
        };
        let path = self.artifact_path(Stage::Metrics)?;
        Self::write_json(&path, &report)?;
        let table_path = path.with_extension("txt");
        fs::write(&table_path, report.to_table())
            .map_err(|e| Error::io(format!("writing {}", table_path.display()), e))?;
        self.record(
            Stage::Metrics,
            &[&path, &table_path],
            &[
                Stage::Vocab,
                self.cluster_encoder_stage(),
                Stage::Cluster,
                Stage::Summaries,
            ],
        )?;
        Ok((path, report))
    }

    fn rouge(&self, path: &Path, set: &ClusterSet, best: &[&SummaryRecord]) -> Result<RougeTriple> {
        let references = load_references(path)?;
        let mut per_cluster: Vec<Vec<Vec<String>>> = vec![Vec::new(); set.k()];
        for (line, r) in references {
            let cluster = match (&r.cluster, &r.label) {
                (Some(c), _) => *c,
                (None, Some(label)) => {
                    set.labels
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| Error::Line {
                            path: path.to_path_buf(),
                            line,
                            message: format!("label {label:?} names no cluster"),
                        })?
                }
                (None, None) => {
                    return Err(Error::Line {
                        path: path.to_path_buf(),
                        line,
                        message: "reference needs a cluster or a label".into(),
                    })
                }
            };
            per_cluster
                .get_mut(cluster)
                .ok_or_else(|| Error::Line {
                    path: path.to_path_buf(),
                    line,
                    message: format!("cluster {cluster} does not exist"),
                })?
                .push(tokenize(&r.text));
        }
        let mut scores: Vec<[RougeScore; 3]> = Vec::new();
        for (refs, summary) in per_cluster.iter().zip(best) {
            if refs.is_empty() {
                continue;
            }
            let cand = tokenize(&summary.text);
            scores.push([
                best_of(refs, |r| rouge_n(&cand, r, 1))?,
                best_of(refs, |r| rouge_n(&cand, r, 2))?,
                best_of(refs, |r| Ok(rouge_l(&cand, r)))?,
            ]);
        }
        if scores.is_empty() {
            return Err(Error::Data(format!(
                "{} has no reference for any cluster",
                path.display()
            )));
        }
        let mean = |i: usize| {
            let n = scores.len() as f64;
            RougeScore {
                precision: scores.iter().map(|s| s[i].precision).sum::<f64>() / n,
                recall: scores.iter().map(|s| s[i].recall).sum::<f64>() / n,
                f1: scores.iter().map(|s| s[i].f1).sum::<f64>() / n,
                degenerate: scores.iter().any(|s| s[i].degenerate),
            }
        };
        Ok(RougeTriple {
            rouge_1: mean(0),
            rouge_2: mean(1),
            rouge_l: mean(2),
        })
    }

    /// Phase II: decoder, summaries, metrics.
    pub fn run_phase2(&self) -> Result<RunOutputs> {
        let decoder = self.train_decoder()?;
        let summaries = self.summarize()?;
        let (metrics, report) = self.evaluate()?;
        Ok(RunOutputs {
            clusters: self.artifact_path(Stage::Cluster)?,
            decoder,
            summaries,
            metrics,
            report,
        })
    }

    pub fn run_all(&self) -> Result<RunOutputs> {
        self.run_phase1()?;
        self.run_phase2()
    }
}

/// Reference lines with their 1-based line numbers.
pub fn load_references(path: &Path) -> Result<Vec<(usize, ReferenceRecord)>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Line {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}
