//! Teacher-forced reconstruction training with membership-weighted
//! cross-entropy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DecoderModel;
use crate::error::{Error, Result};
use crate::model::layers::Dropout;
use crate::numerics::{AdamW, AdamWConfig, Reduction, Tape, Tensor, Var};
use crate::seeding;
use crate::tokenizer::{EncodedDocument, SEP};

/// One document to reconstruct from its own embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub doc_id: String,
    /// `[start] x1 .. xn`
    pub input: Vec<usize>,
    /// `x1 .. xn [SEP]`
    pub target: Vec<usize>,
    pub memory: Vec<f32>,
    pub weight: f64,
}

impl TrainingExample {
    pub fn from_document(
        doc: &EncodedDocument,
        memory: Vec<f32>,
        weight: f64,
        start_token: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Data(format!(
                "weight {weight} of {:?} outside [0, 1]",
                doc.doc_id
            )));
        }
        let body = doc.body();
        let mut input = Vec::with_capacity(body.len() + 1);
        input.push(start_token);
        input.extend_from_slice(body);
        let mut target = body.to_vec();
        target.push(SEP);
        Ok(TrainingExample {
            doc_id: doc.doc_id.clone(),
            input,
            target,
            memory,
            weight,
        })
    }

    pub fn tokens(&self) -> usize {
        self.target.len()
    }
}

/// How the weighted token losses of a batch are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `Σ_docs w · Σ_tokens NLL` divided by the batch's token count.
    #[default]
    PerToken,
    /// `Σ_docs w · Σ_tokens NLL`.
    Raw,
}

impl LossMode {
    fn normalizer(self, batch: &[&TrainingExample]) -> f64 {
        match self {
            LossMode::Raw => 1.0,
            LossMode::PerToken => batch.iter().map(|e| e.tokens()).sum::<usize>().max(1) as f64,
        }
    }
}

fn memory_input(tape: &mut Tape<'_>, memory: &[f32]) -> Result<Var> {
    Ok(tape.input(Tensor::new(vec![1, memory.len()], memory.to_vec())?))
}

/// Summed next-token NLL of one example and its number of correct argmax
/// predictions.
fn example_loss(
    decoder: &DecoderModel,
    tape: &mut Tape<'_>,
    ex: &TrainingExample,
    dropout: Option<Dropout<'_>>,
) -> Result<(Var, usize)> {
    if ex.input.len() != ex.target.len() {
        return Err(Error::Shape(format!(
            "example {:?}: {} inputs for {} targets",
            ex.doc_id,
            ex.input.len(),
            ex.target.len()
        )));
    }
    let memory = memory_input(tape, &ex.memory)?;
    let logits = decoder.forward(tape, &ex.input, memory, dropout)?;
    let vocab = decoder.config().vocab_size;
    let correct = tape
        .value(logits)
        .chunks(vocab)
        .zip(&ex.target)
        .filter(|(row, &t)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == t
        })
        .count();
    let loss = tape.cross_entropy(logits, &ex.target, Reduction::Sum)?;
    Ok((loss, correct))
}

/// Membership-weighted cross-entropy of a batch in evaluation mode.
pub fn weighted_ce_loss(
    decoder: &DecoderModel,
    batch: &[TrainingExample],
    mode: LossMode,
) -> Result<f64> {
    let refs: Vec<&TrainingExample> = batch.iter().collect();
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::with_params(decoder.params());
        let (loss, _) = example_loss(decoder, &mut tape, ex, None)?;
        total += ex.weight * f64::from(tape.scalar(loss)?);
    }
    Ok(total / mode.normalizer(&refs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderEvaluation {
    /// Unweighted mean NLL per target token.
    pub loss: f64,
    /// Teacher-forced next-token accuracy.
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn evaluate_examples(
    decoder: &DecoderModel,
    examples: &[TrainingExample],
) -> Result<DecoderEvaluation> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let (mut total, mut correct, mut tokens) = (0.0f64, 0usize, 0usize);
    for ex in examples {
        let mut tape = Tape::with_params(decoder.params());
        let (loss, hits) = example_loss(decoder, &mut tape, ex, None)?;
        total += f64::from(tape.scalar(loss)?);
        correct += hits;
        tokens += ex.tokens();
    }
    Ok(DecoderEvaluation {
        loss: total / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss_mode: LossMode,
    /// Treat every membership weight as 1.
    pub unweighted: bool,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        DecoderTrainConfig {
            epochs: 40,
            batch_size: 16,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                warmup_steps: 20,
                ..AdamWConfig::default()
            },
            loss_mode: LossMode::PerToken,
            unweighted: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderEpoch {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Trains every decoder parameter on `train` and reports validation loss
/// and accuracy after each epoch.
pub fn train_decoder(
    decoder: &mut DecoderModel,
    train: &[TrainingExample],
    validation: &[TrainingExample],
    cfg: &DecoderTrainConfig,
) -> Result<Vec<DecoderEpoch>> {
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data(
            "decoder training needs training and validation examples".into(),
        ));
    }
    let mut opt = AdamW::new(cfg.optimizer, decoder.params(), decoder.trainable());
    let mut rng = seeding::stream(cfg.seed, "decoder", &[]);
    let rate = decoder.config().dropout;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut objective, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train[i]).collect();
            let norm = cfg.loss_mode.normalizer(&batch);
            let mut batch_loss = 0.0;
            for ex in &batch {
                let w = if cfg.unweighted { 1.0 } else { ex.weight };
                let grads = {
                    let mut tape = Tape::with_params(decoder.params());
                    let dropout = Dropout {
                        rate,
                        rng: &mut rng,
                    };
                    let (loss, _) = example_loss(decoder, &mut tape, ex, Some(dropout))?;
                    batch_loss += w * f64::from(tape.scalar(loss)?);
                    let scaled = tape.scale(loss, (w / norm) as f32);
                    tape.backward(scaled)?
                };
                decoder.params_mut().accumulate(&grads)?;
            }
            objective += batch_loss / norm;
            batches += 1;
            opt.step(decoder.params_mut())?;
            decoder.params_mut().zero_grad();
        }
        let val = evaluate_examples(decoder, validation)?;
        let record = DecoderEpoch {
            epoch,
            train_loss: objective / batches as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        };
        log::info!(
            "decoder epoch {epoch}: train {:.4}, validation loss {:.4}, validation accuracy {:.3}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy
        );
        history.push(record);
    }
    Ok(history)
}
