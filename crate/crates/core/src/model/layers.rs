//! Parameter handles for the building blocks shared by encoder and decoder.
//!
//! Every layer is created in two steps: `init` registers freshly initialized
//! tensors under a name prefix, `bind` looks the same names up again. Models
//! are always assembled through `bind`, so a store loaded from a checkpoint
//! and a freshly initialized one go through the same path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Shape(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

/// Dropout source for training-mode forward passes.
pub struct Dropout<'r> {
    pub rate: f32,
    pub rng: &'r mut ChaCha8Rng,
}

pub(crate) fn maybe_dropout(tape: &mut Tape<'_>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => tape.dropout(x, d.rate, d.rng),
        _ => x,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f32,
        rng: &mut impl Rng,
    ) -> Result<()> {
        store.add_normal(format!("{prefix}.weight"), &[fan_in, fan_out], std, rng)?;
        store.add_filled(format!("{prefix}.bias"), &[fan_out], 0.0)?;
        Ok(())
    }

    pub fn bind(store: &ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: lookup(store, &format!("{prefix}.weight"), &[fan_in, fan_out])?,
            bias: lookup(store, &format!("{prefix}.bias"), &[fan_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
        store.add_filled(format!("{prefix}.gain"), &[width], 1.0)?;
        store.add_filled(format!("{prefix}.bias"), &[width], 0.0)?;
        Ok(())
    }

    pub fn bind(store: &ParamStore, prefix: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gain: lookup(store, &format!("{prefix}.gain"), &[width])?,
            bias: lookup(store, &format!("{prefix}.bias"), &[width])?,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain)?;
        let b = tape.param(self.bias)?;
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Multi-head scaled dot-product attention with query, key, value and
/// output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

pub const ATTENTION_PROJECTIONS: [&str; 4] = ["query", "key", "value", "output"];

impl Attention {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let h = cfg.hidden_size;
        for proj in ATTENTION_PROJECTIONS {
            Linear::init(store, &format!("{prefix}.{proj}"), h, h, cfg.init_std, rng)?;
        }
        Ok(())
    }

    pub fn bind(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden_size;
        let proj = |name: &str| Linear::bind(store, &format!("{prefix}.{name}"), h, h);
        Ok(Attention {
            query: proj("query")?,
            key: proj("key")?,
            value: proj("value")?,
            output: proj("output")?,
            num_heads: cfg.num_heads,
        })
    }

    /// Queries come from `queries` (`t×h`), keys and values from `memory`
    /// (`s×h`). With `causal`, query row `i` attends to memory rows `0..=i`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, memory)?;
        let v = self.value.forward(tape, memory)?;
        let width = tape.shape(q)[1];
        let head_dim = width / self.num_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let mut heads = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let start = head * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax(scores, causal)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        self.output.forward(tape, joined)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        Linear::init(
            store,
            &format!("{prefix}.inner"),
            cfg.hidden_size,
            cfg.ffn_size,
            cfg.init_std,
            rng,
        )?;
        Linear::init(
            store,
            &format!("{prefix}.outer"),
            cfg.ffn_size,
            cfg.hidden_size,
            cfg.init_std,
            rng,
        )
    }

    pub fn bind(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::bind(
                store,
                &format!("{prefix}.inner"),
                cfg.hidden_size,
                cfg.ffn_size,
            )?,
            outer: Linear::bind(
                store,
                &format!("{prefix}.outer"),
                cfg.ffn_size,
                cfg.hidden_size,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let hidden = self.inner.forward(tape, x)?;
        let hidden = tape.gelu(hidden);
        self.outer.forward(tape, hidden)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.inner.params(), self.outer.params()].concat()
    }
}

/// Token-prediction head: linear h→h, GELU, layer norm, linear h→vocab.
#[derive(Debug, Clone, Copy)]
pub struct LmHead {
    pub dense: Linear,
    pub norm: LayerNorm,
    pub projection: Linear,
}

impl LmHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let h = cfg.hidden_size;
        Linear::init(store, &format!("{prefix}.dense"), h, h, cfg.init_std, rng)?;
        LayerNorm::init(store, &format!("{prefix}.norm"), h)?;
        Linear::init(
            store,
            &format!("{prefix}.projection"),
            h,
            cfg.vocab_size,
            cfg.init_std,
            rng,
        )
    }

    pub fn bind(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden_size;
        Ok(LmHead {
            dense: Linear::bind(store, &format!("{prefix}.dense"), h, h)?,
            norm: LayerNorm::bind(store, &format!("{prefix}.norm"), h, cfg.layer_norm_eps)?,
            projection: Linear::bind(store, &format!("{prefix}.projection"), h, cfg.vocab_size)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = self.dense.forward(tape, x)?;
        let y = tape.gelu(y);
        let y = self.norm.forward(tape, y)?;
        self.projection.forward(tape, y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.dense.params(),
            self.norm.params(),
            self.projection.params(),
        ]
        .concat()
    }
}

/// Word plus learned position embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Embeddings {
    pub word: ParamId,
    pub position: ParamId,
    pub max_len: usize,
}

impl Embeddings {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        store.add_normal(
            format!("{prefix}.word"),
            &[cfg.vocab_size, cfg.hidden_size],
            cfg.init_std,
            rng,
        )?;
        store.add_normal(
            format!("{prefix}.position"),
            &[cfg.max_len, cfg.hidden_size],
            cfg.init_std,
            rng,
        )?;
        Ok(())
    }

    pub fn bind(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Embeddings {
            word: lookup(
                store,
                &format!("{prefix}.word"),
                &[cfg.vocab_size, cfg.hidden_size],
            )?,
            position: lookup(
                store,
                &format!("{prefix}.position"),
                &[cfg.max_len, cfg.hidden_size],
            )?,
            max_len: cfg.max_len,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if ids.len() > self.max_len {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds the maximum length {}",
                ids.len(),
                self.max_len
            )));
        }
        let word = tape.param(self.word)?;
        let position = tape.param(self.position)?;
        let w = tape.gather_rows(word, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.gather_rows(position, &positions)?;
        tape.add(w, p)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.word, self.position]
    }
}
