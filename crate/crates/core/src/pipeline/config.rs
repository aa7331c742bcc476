//! Pipeline configuration: defaults, then a TOML file, then command-line
//! overrides, each layer replacing only the keys it sets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::clusterer::KMeansConfig;
use crate::decoder::DecoderTrainConfig;
use crate::encoder::{FinetuneConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::generator::SamplerConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// k-means over [CLS] embeddings with `clustering.k` clusters.
    #[default]
    Kmeans,
    /// Fine-tune a label classifier and group documents by predicted label.
    Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Ablations {
    /// Skip MLM pretraining; the encoder keeps its random initialization.
    pub no_pretraining: bool,
    /// Initialize the decoder randomly instead of from the encoder.
    pub no_decoder_init: bool,
    /// Train the decoder with every membership weight set to 1.
    pub unweighted_ce: bool,
    /// In labels mode, ignore the labels and run k-means with K = |labels|.
    pub no_labels: bool,
}

/// Preset fields replaced when set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Reference summaries for ROUGE, one `{cluster|label, text}` per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub references: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("corpus.jsonl"),
            references: None,
            work_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 30_000,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub mode: ClusterMode,
    /// Number of k-means clusters; ignored on the label path.
    pub k: usize,
    pub max_iters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            mode: ClusterMode::Kmeans,
            k: 2,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderStage {
    #[serde(flatten)]
    pub train: DecoderTrainConfig,
    /// Share of documents held out for the per-epoch validation loss.
    pub validation_fraction: f64,
}

impl Default for DecoderStage {
    fn default() -> Self {
        DecoderStage {
            train: DecoderTrainConfig::default(),
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    /// Absolute k values for cosine_top-k.
    pub top_k: Vec<usize>,
    /// k as a share of the largest cluster, rounded up.
    pub top_k_fractions: Vec<f64>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            top_k: Vec::new(),
            top_k_fractions: vec![0.25, 0.5, 1.0],
        }
    }
}

impl EvaluateConfig {
    /// Sorted distinct k values for clusters of at most `largest` members.
    pub fn ks(&self, largest: usize) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .top_k
            .iter()
            .copied()
            .chain(
                self.top_k_fractions
                    .iter()
                    .map(|f| ((f * largest as f64).ceil() as usize).max(1)),
            )
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: Preset,
    /// Seeds every stage; per-stage `seed` keys are overwritten by it.
    pub seed: u64,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub model: ModelOverrides,
    pub clustering: ClusteringConfig,
    pub ablations: Ablations,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub decoder: DecoderStage,
    pub sampler: SamplerConfig,
    pub evaluate: EvaluateConfig,
}

impl PipelineConfig {
    /// Defaults, overlaid with `file` if given, overlaid with `overrides`
    /// (`dotted.key`, value) in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut merged = to_table(&PipelineConfig::default())?;
        if let Some(path) = file {
            let raw = fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let table: Table = toml::from_str(&raw).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            merge(&mut merged, table);
        }
        for (key, value) in overrides {
            set_path(&mut merged, key, value.clone())?;
        }
        let mut cfg: PipelineConfig = Value::Table(merged.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.sync_seeds();
        reject_unknown(&merged, &to_table(&cfg)?, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the top-level seed into every stage.
    pub fn sync_seeds(&mut self) {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.decoder.train.seed = self.seed;
        self.sampler.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.clustering.mode == ClusterMode::Kmeans && self.clustering.k == 0 {
            return Err(Error::Config("clustering.k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.decoder.validation_fraction) {
            return Err(Error::Config(
                "decoder.validation_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.evaluate.top_k.contains(&0)
            || self
                .evaluate
                .top_k_fractions
                .iter()
                .any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(Error::Config(
                "evaluate.top_k must be positive and fractions in (0, 1]".into(),
            ));
        }
        if self.pretrain.batch_size == 0
            || self.finetune.batch_size == 0
            || self.decoder.train.batch_size == 0
        {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }

    /// The model shape for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let base = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Paper => ModelConfig::paper(vocab_size),
        };
        let o = &self.model;
        let cfg = ModelConfig {
            hidden_size: o.hidden_size.unwrap_or(base.hidden_size),
            num_blocks: o.num_blocks.unwrap_or(base.num_blocks),
            num_heads: o.num_heads.unwrap_or(base.num_heads),
            ffn_size: o.ffn_size.unwrap_or(base.ffn_size),
            max_len: o.max_len.unwrap_or(base.max_len),
            dropout: o.dropout.unwrap_or(base.dropout),
            init_std: o.init_std.unwrap_or(base.init_std),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// k-means settings when the run clusters without labels.
    pub fn kmeans(&self, k: usize) -> KMeansConfig {
        KMeansConfig {
            k,
            max_iters: self.clustering.max_iters,
            seed: self.seed,
        }
    }

    /// Whether clustering goes through the fine-tuned label classifier.
    pub fn uses_labels(&self) -> bool {
        self.clustering.mode == ClusterMode::Labels && !self.ablations.no_labels
    }

    /// Whether the corpus must carry a label on every record.
    pub fn needs_labels(&self) -> bool {
        self.clustering.mode == ClusterMode::Labels
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses `key=value`; the value is read as TOML and taken verbatim as a
/// string when that fails.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {raw:?} has an empty key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    match Value::try_from(value).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => Err(Error::Config("configuration is not a table".into())),
    }
}

fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or(key);
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{key}: {part} is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Every key of `given` must survive a round trip through the typed config.
fn reject_unknown(given: &Table, known: &Table, prefix: &str) -> Result<()> {
    for (key, value) in given {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (value, known.get(key)) {
            (_, None) => return Err(Error::Config(format!("unknown configuration key {path}"))),
            (Value::Table(g), Some(Value::Table(k))) => reject_unknown(g, k, &path)?,
            _ => {}
        }
    }
    Ok(())
}
