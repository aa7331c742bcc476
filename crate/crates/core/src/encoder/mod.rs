//! Bidirectional Transformer encoder with an MLM head and an optional
//! label classifier.

mod train;

use std::collections::BTreeMap;

use rand::Rng;

pub use train::{
    evaluate_mlm, fine_tune_classifier, pretrain_mlm, FinetuneConfig, FinetuneEpoch,
    FinetuneReport, MlmEpoch, MlmEvaluation, PretrainConfig,
};

use crate::error::{Error, Result};
use crate::model::layers::{
    maybe_dropout, Attention, Dropout, Embeddings, FeedForward, LayerNorm, LmHead,
};
use crate::model::{Checkpoint, Component, ModelConfig};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

/// One post-norm block: attention, add & norm, feed-forward, add & norm.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub attention: Attention,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderBlock {
    fn prefix(i: usize) -> String {
        format!("blocks.{i}")
    }

    fn init(store: &mut ParamStore, i: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        let p = Self::prefix(i);
        Attention::init(store, &format!("{p}.attention"), cfg, rng)?;
        LayerNorm::init(store, &format!("{p}.attention_norm"), cfg.hidden_size)?;
        FeedForward::init(store, &format!("{p}.ffn"), cfg, rng)?;
        LayerNorm::init(store, &format!("{p}.ffn_norm"), cfg.hidden_size)
    }

    fn bind(store: &ParamStore, i: usize, cfg: &ModelConfig) -> Result<Self> {
        let p = Self::prefix(i);
        let (h, eps) = (cfg.hidden_size, cfg.layer_norm_eps);
        Ok(EncoderBlock {
            attention: Attention::bind(store, &format!("{p}.attention"), cfg)?,
            attention_norm: LayerNorm::bind(store, &format!("{p}.attention_norm"), h, eps)?,
            ffn: FeedForward::bind(store, &format!("{p}.ffn"), cfg)?,
            ffn_norm: LayerNorm::bind(store, &format!("{p}.ffn_norm"), h, eps)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let attended = self.attention.forward(tape, x, x, false)?;
        let attended = maybe_dropout(tape, attended, dropout);
        let x = tape.add(x, attended)?;
        let x = self.attention_norm.forward(tape, x)?;
        let ff = self.ffn.forward(tape, x)?;
        let ff = maybe_dropout(tape, ff, dropout);
        let x = tape.add(x, ff)?;
        self.ffn_norm.forward(tape, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.attention.params();
        ids.extend(self.attention_norm.params());
        ids.extend(self.ffn.params());
        ids.extend(self.ffn_norm.params());
        ids
    }
}

/// Linear map from the `[CLS]` embedding to label logits (no bias).
#[derive(Debug, Clone)]
pub struct Classifier {
    pub weight: ParamId,
    pub labels: Vec<String>,
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
const LABELS_META: &str = "labels";

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Final hidden states, `n×h`.
    pub hidden: Var,
    /// Row 0 of `hidden`, `1×h`.
    pub cls: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    pub embeddings: Embeddings,
    pub blocks: Vec<EncoderBlock>,
    pub mlm_head: LmHead,
    classifier: Option<Classifier>,
}

impl EncoderModel {
    /// Randomly initialized encoder with an MLM head and no classifier.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        Embeddings::init(&mut store, "embeddings", &config, rng)?;
        for i in 0..config.num_blocks {
            EncoderBlock::init(&mut store, i, &config, rng)?;
        }
        LmHead::init(&mut store, "mlm_head", &config, rng)?;
        EncoderModel::from_store(config, store, None)
    }

    pub fn from_store(
        config: ModelConfig,
        params: ParamStore,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        config.validate()?;
        let embeddings = Embeddings::bind(&params, "embeddings", &config)?;
        let blocks = (0..config.num_blocks)
            .map(|i| EncoderBlock::bind(&params, i, &config))
            .collect::<Result<Vec<_>>>()?;
        let mlm_head = LmHead::bind(&params, "mlm_head", &config)?;
        let classifier = match (params.id(CLASSIFIER_WEIGHT), labels) {
            (Some(weight), Some(labels)) => {
                let shape = params.get(weight).shape();
                if shape != [config.hidden_size, labels.len()] {
                    return Err(Error::Shape(format!(
                        "classifier of shape {shape:?} for {} labels",
                        labels.len()
                    )));
                }
                Some(Classifier { weight, labels })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Data(
                    "classifier weight and label list must come together".into(),
                ))
            }
        };
        Ok(EncoderModel {
            config,
            params,
            embeddings,
            blocks,
            mlm_head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn classifier(&self) -> Option<&Classifier> {
        self.classifier.as_ref()
    }

    /// Embeddings and blocks: the parameters shared by every task head.
    pub fn body_params(&self) -> Vec<ParamId> {
        let mut ids = self.embeddings.params().to_vec();
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids
    }

    pub fn mlm_params(&self) -> Vec<ParamId> {
        let mut ids = self.body_params();
        ids.extend(self.mlm_head.params());
        ids
    }

    /// Adds (or replaces) a zero-bias classifier over `labels`.
    pub fn set_classifier(&mut self, labels: Vec<String>, rng: &mut impl Rng) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Data("classifier needs at least one label".into()));
        }
        let shape = [self.config.hidden_size, labels.len()];
        let weight = match self.params.id(CLASSIFIER_WEIGHT) {
            Some(id) if self.params.get(id).shape() == shape => id,
            Some(_) => {
                return Err(Error::Contract(
                    "classifier already exists with a different label count".into(),
                ))
            }
            None => self
                .params
                .add_normal(CLASSIFIER_WEIGHT, &shape, self.config.init_std, rng)?,
        };
        self.classifier = Some(Classifier { weight, labels });
        Ok(())
    }

    /// Runs the encoder over `ids`. Passing `dropout` selects training mode.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<EncoderOutput> {
        let x = self.embeddings.forward(tape, ids)?;
        let mut x = maybe_dropout(tape, x, &mut dropout);
        for block in &self.blocks {
            x = block.forward(tape, x, &mut dropout)?;
        }
        let cls = tape.gather_rows(x, &[0])?;
        Ok(EncoderOutput { hidden: x, cls })
    }

    /// Evaluation-mode `[CLS]` embedding of `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, ids, None)?;
        Ok(tape.value(out.cls).to_vec())
    }

    /// Label logits `d̄ · W` for a `1×h` document embedding.
    pub fn classifier_logits(&self, tape: &mut Tape<'_>, cls: Var) -> Result<Var> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Contract("encoder has no classifier head".into()))?;
        let w = tape.param(head.weight)?;
        tape.matmul(cls, w)
    }

    /// Label distribution `softmax(W d̄)` of a document.
    pub fn classify(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, ids, None)?;
        let logits = self.classifier_logits(&mut tape, out.cls)?;
        let probs = tape.softmax(logits, false)?;
        Ok(tape.value(probs).to_vec())
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
        if let Some(c) = &self.classifier {
            meta.insert(LABELS_META.into(), serde_json::to_string(&c.labels)?);
        }
        Ok(Checkpoint {
            component: Component::Encoder,
            config: self.config,
            meta,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.component != Component::Encoder {
            return Err(Error::Data("checkpoint does not hold an encoder".into()));
        }
        let labels = ckpt
            .meta
            .get(LABELS_META)
            .map(|s| serde_json::from_str::<Vec<String>>(s))
            .transpose()?;
        EncoderModel::from_store(ckpt.config, ckpt.params, labels)
    }
}
