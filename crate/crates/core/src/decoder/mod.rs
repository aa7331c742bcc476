//! Autoregressive decoder conditioned on one frozen document embedding
//! through cross-attention.

mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use train::{
    evaluate_examples, train_decoder, weighted_ce_loss, DecoderEpoch, DecoderEvaluation,
    DecoderTrainConfig, LossMode, TrainingExample,
};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::model::layers::{
    maybe_dropout, Attention, Dropout, Embeddings, FeedForward, LayerNorm, LmHead,
};
use crate::model::{Checkpoint, Component, ModelConfig};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

/// Causal self-attention, cross-attention on the memory, feed-forward; each
/// followed by add & norm.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub self_attention: Attention,
    pub self_attention_norm: LayerNorm,
    pub cross_attention: Attention,
    pub cross_attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderBlock {
    fn init(store: &mut ParamStore, i: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
        let p = format!("blocks.{i}");
        Attention::init(store, &format!("{p}.self_attention"), cfg, rng)?;
        LayerNorm::init(store, &format!("{p}.self_attention_norm"), cfg.hidden_size)?;
        Attention::init(store, &format!("{p}.cross_attention"), cfg, rng)?;
        LayerNorm::init(store, &format!("{p}.cross_attention_norm"), cfg.hidden_size)?;
        FeedForward::init(store, &format!("{p}.ffn"), cfg, rng)?;
        LayerNorm::init(store, &format!("{p}.ffn_norm"), cfg.hidden_size)
    }

    fn bind(store: &ParamStore, i: usize, cfg: &ModelConfig) -> Result<Self> {
        let p = format!("blocks.{i}");
        let (h, eps) = (cfg.hidden_size, cfg.layer_norm_eps);
        Ok(DecoderBlock {
            self_attention: Attention::bind(store, &format!("{p}.self_attention"), cfg)?,
            self_attention_norm: LayerNorm::bind(
                store,
                &format!("{p}.self_attention_norm"),
                h,
                eps,
            )?,
            cross_attention: Attention::bind(store, &format!("{p}.cross_attention"), cfg)?,
            cross_attention_norm: LayerNorm::bind(
                store,
                &format!("{p}.cross_attention_norm"),
                h,
                eps,
            )?,
            ffn: FeedForward::bind(store, &format!("{p}.ffn"), cfg)?,
            ffn_norm: LayerNorm::bind(store, &format!("{p}.ffn_norm"), h, eps)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        memory: Var,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let a = self.self_attention.forward(tape, x, x, true)?;
        let a = maybe_dropout(tape, a, dropout);
        let x = tape.add(x, a)?;
        let x = self.self_attention_norm.forward(tape, x)?;
        let c = cross_attention(tape, &self.cross_attention, x, memory)?;
        let c = maybe_dropout(tape, c, dropout);
        let x = tape.add(x, c)?;
        let x = self.cross_attention_norm.forward(tape, x)?;
        let f = self.ffn.forward(tape, x)?;
        let f = maybe_dropout(tape, f, dropout);
        let x = tape.add(x, f)?;
        self.ffn_norm.forward(tape, x)
    }
}

/// Attention from `queries` (`t×h`) to a single memory row (`1×h`).
pub fn cross_attention(
    tape: &mut Tape<'_>,
    attention: &Attention,
    queries: Var,
    memory: Var,
) -> Result<Var> {
    let (qs, ms) = (tape.shape(queries), tape.shape(memory));
    if ms.len() != 2 || ms[0] != 1 || qs.len() != 2 || ms[1] != qs[1] {
        return Err(Error::Shape(format!(
            "cross-attention needs one memory row of width {}, got {ms:?}",
            qs.get(1).copied().unwrap_or(0)
        )));
    }
    attention.forward(tape, queries, memory, false)
}

/// Name of the encoder parameter a decoder parameter is copied from.
pub fn encoder_source(name: &str) -> Option<String> {
    if name.starts_with("embeddings.") {
        return Some(name.to_string());
    }
    if let Some(rest) = name.strip_prefix("lm_head.") {
        return Some(format!("mlm_head.{rest}"));
    }
    let rest = name.strip_prefix("blocks.")?;
    let (index, field) = rest.split_once('.')?;
    let mapped = if let Some(tail) = field
        .strip_prefix("self_attention_norm")
        .or_else(|| field.strip_prefix("cross_attention_norm"))
    {
        format!("attention_norm{tail}")
    } else if let Some(tail) = field
        .strip_prefix("self_attention")
        .or_else(|| field.strip_prefix("cross_attention"))
    {
        format!("attention{tail}")
    } else if field.starts_with("ffn") {
        field.to_string()
    } else {
        return None;
    };
    Some(format!("blocks.{index}.{mapped}"))
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    config: ModelConfig,
    params: ParamStore,
    pub embeddings: Embeddings,
    pub blocks: Vec<DecoderBlock>,
    pub lm_head: LmHead,
}

impl DecoderModel {
    /// Randomly initialized decoder.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        Embeddings::init(&mut store, "embeddings", &config, rng)?;
        for i in 0..config.num_blocks {
            DecoderBlock::init(&mut store, i, &config, rng)?;
        }
        LmHead::init(&mut store, "lm_head", &config, rng)?;
        DecoderModel::from_store(config, store)
    }

    /// Decoder whose every parameter is an independent copy of the matching
    /// encoder parameter; both attentions of a block copy that block's
    /// encoder self-attention. `config` may differ from the encoder's only
    /// in its dropout rate.
    pub fn from_encoder(encoder: &EncoderModel, config: ModelConfig) -> Result<Self> {
        let enc = *encoder.config();
        if (ModelConfig {
            dropout: enc.dropout,
            ..config
        }) != enc
        {
            return Err(Error::Config(format!(
                "decoder config {config:?} does not match the encoder's {enc:?}"
            )));
        }
        // Only the names and shapes of a fresh decoder are used.
        let template = DecoderModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut store = ParamStore::new();
        for (_, name, _) in template.params.iter() {
            let source = encoder_source(name)
                .ok_or_else(|| Error::Contract(format!("no encoder source for {name}")))?;
            let tensor = encoder
                .params()
                .by_name(&source)
                .ok_or_else(|| Error::Data(format!("encoder lacks parameter {source}")))?;
            let mut copy = tensor.clone();
            copy.clear_grad();
            store.add(name, copy)?;
        }
        DecoderModel::from_store(config, store)
    }

    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let embeddings = Embeddings::bind(&params, "embeddings", &config)?;
        let blocks = (0..config.num_blocks)
            .map(|i| DecoderBlock::bind(&params, i, &config))
            .collect::<Result<Vec<_>>>()?;
        let lm_head = LmHead::bind(&params, "lm_head", &config)?;
        Ok(DecoderModel {
            config,
            params,
            embeddings,
            blocks,
            lm_head,
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

    pub fn trainable(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    /// Next-token logits (`t×vocab`) for `ids` given a `1×h` memory.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        memory: Var,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let x = self.embeddings.forward(tape, ids)?;
        let mut x = maybe_dropout(tape, x, &mut dropout);
        for block in &self.blocks {
            x = block.forward(tape, x, memory, &mut dropout)?;
        }
        self.lm_head.forward(tape, x)
    }

    /// Evaluation-mode logits, row-major `t×vocab`.
    pub fn logits(&self, ids: &[usize], memory: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::with_params(&self.params);
        let m = tape.input(crate::numerics::Tensor::new(
            vec![1, memory.len()],
            memory.to_vec(),
        )?);
        let out = self.forward(&mut tape, ids, m, None)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            component: Component::Decoder,
            config: self.config,
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.component != Component::Decoder {
            return Err(Error::Data("checkpoint does not hold a decoder".into()));
        }
        DecoderModel::from_store(ckpt.config, ckpt.params)
    }
}
