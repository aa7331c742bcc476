//! Masked-language-model pretraining and label fine-tuning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EncoderModel;
use crate::error::{Error, Result};
use crate::model::layers::Dropout;
use crate::numerics::{AdamW, AdamWConfig, ParamId, ParamStore, Reduction, Tape, Tensor, Var};
use crate::seeding;
use crate::tokenizer::{mask_for_mlm, EncodedDocument, MaskStrategy, MaskedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub mask_strategy: MaskStrategy,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 16,
            mask_rate: 0.15,
            mask_strategy: MaskStrategy::Replace,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                warmup_steps: 50,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmEpoch {
    pub epoch: usize,
    /// Mean negative log-likelihood per masked token.
    pub loss: f64,
    /// Fraction of masked tokens whose argmax prediction is correct.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmEvaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

fn check_nonempty(docs: &[EncodedDocument]) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sum of masked-token NLL for one corrupted sequence. Targets are read from
/// `original` at the masked positions only. Returns the loss variable and
/// the number of correct argmax predictions.
pub fn masked_token_loss(
    encoder: &EncoderModel,
    tape: &mut Tape<'_>,
    seq: &MaskedSequence,
    original: &[usize],
    dropout: Option<Dropout<'_>>,
) -> Result<(Var, usize)> {
    if seq.positions.is_empty() {
        return Err(Error::Data("no masked positions".into()));
    }
    let targets: Vec<usize> =
        seq.positions
            .iter()
            .map(|&p| {
                original.get(p).copied().ok_or_else(|| {
                    Error::Index(format!("masked position {p} outside the sequence"))
                })
            })
            .collect::<Result<_>>()?;
    let out = encoder.forward(tape, &seq.ids, dropout)?;
    let picked = tape.gather_rows(out.hidden, &seq.positions)?;
    let logits = encoder.mlm_head.forward(tape, picked)?;
    let vocab = encoder.config().vocab_size;
    let correct = tape
        .value(logits)
        .chunks(vocab)
        .zip(&targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    let loss = tape.cross_entropy(logits, &targets, Reduction::Sum)?;
    Ok((loss, correct))
}

/// Masked-token loss and accuracy of `encoder` on `docs` with masks drawn
/// from `rng`, in evaluation mode.
pub fn evaluate_mlm(
    encoder: &EncoderModel,
    docs: &[EncodedDocument],
    mask_rate: f64,
    strategy: MaskStrategy,
    rng: &mut impl Rng,
) -> Result<MlmEvaluation> {
    check_nonempty(docs)?;
    let vocab = encoder.config().vocab_size;
    let (mut total, mut correct, mut masked) = (0.0f64, 0usize, 0usize);
    for doc in docs {
        let seq = mask_for_mlm(doc, mask_rate, strategy, vocab, rng)?;
        let mut tape = Tape::with_params(encoder.params());
        let (loss, hits) = masked_token_loss(encoder, &mut tape, &seq, &doc.ids, None)?;
        total += f64::from(tape.scalar(loss)?);
        correct += hits;
        masked += seq.positions.len();
    }
    Ok(MlmEvaluation {
        loss: total / masked as f64,
        accuracy: correct as f64 / masked as f64,
        masked,
    })
}

/// Trains the encoder body and MLM head on `docs`. The loss of a batch is
/// the mean NLL over all of its masked tokens.
pub fn pretrain_mlm(
    encoder: &mut EncoderModel,
    docs: &[EncodedDocument],
    cfg: &PretrainConfig,
) -> Result<Vec<MlmEpoch>> {
    check_nonempty(docs)?;
    let batch_size = cfg.batch_size.max(1);
    let group = encoder.mlm_params();
    let mut opt = AdamW::new(cfg.optimizer, encoder.params(), group);
    let mut rng = seeding::stream(cfg.seed, "pretrain", &[]);
    let vocab = encoder.config().vocab_size;
    let rate = encoder.config().dropout;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct, mut masked) = (0.0f64, 0usize, 0usize);
        for batch in order.chunks(batch_size) {
            let seqs = batch
                .iter()
                .map(|&i| mask_for_mlm(&docs[i], cfg.mask_rate, cfg.mask_strategy, vocab, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch_masked: usize = seqs.iter().map(|s| s.positions.len()).sum();
            for (&i, seq) in batch.iter().zip(&seqs) {
                let grads = {
                    let mut tape = Tape::with_params(encoder.params());
                    let dropout = Dropout {
                        rate,
                        rng: &mut rng,
                    };
                    let (loss, hits) =
                        masked_token_loss(encoder, &mut tape, seq, &docs[i].ids, Some(dropout))?;
                    total += f64::from(tape.scalar(loss)?);
                    correct += hits;
                    let scaled = tape.scale(loss, 1.0 / batch_masked as f32);
                    tape.backward(scaled)?
                };
                encoder.params_mut().accumulate(&grads)?;
            }
            masked += batch_masked;
            opt.step(encoder.params_mut())?;
            encoder.params_mut().zero_grad();
        }
        let record = MlmEpoch {
            epoch,
            loss: total / masked as f64,
            accuracy: correct as f64 / masked as f64,
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4}, masked accuracy {:.3}",
            record.loss,
            record.accuracy
        );
        history.push(record);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Share of labeled documents held out to pick the best epoch.
    pub validation_fraction: f64,
    /// Train only the classifier on fixed embeddings.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 16,
            optimizer: AdamWConfig {
                learning_rate: 5e-4,
                warmup_steps: 10,
                ..AdamWConfig::default()
            },
            validation_fraction: 0.1,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean cross-entropy per training document during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    /// Epoch whose parameters were kept, 0 for the initial state.
    pub best_epoch: usize,
    pub train_size: usize,
    pub val_size: usize,
}

/// Deterministic split into (train, validation) indices. With fewer than
/// two documents both sides are the whole set.
fn split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let val = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    if val == 0 {
        return (order.clone(), order);
    }
    let train = order.split_off(val);
    (train, order)
}

struct Scored {
    loss: f64,
    accuracy: f64,
}

/// Cross-entropy of a classifier over precomputed embeddings or full
/// documents, depending on how the caller builds `logits`.
fn score<F>(items: &[usize], labels: &[usize], mut logits: F) -> Result<Scored>
where
    F: FnMut(usize) -> Result<Vec<f32>>,
{
    let (mut loss, mut hits) = (0.0f64, 0usize);
    for &i in items {
        let z = logits(i)?;
        let t = Tensor::new(vec![1, z.len()], z.clone())?;
        loss += f64::from(t.cross_entropy(&[labels[i]], Reduction::Sum)?);
        if argmax(&z) == labels[i] {
            hits += 1;
        }
    }
    Ok(Scored {
        loss: loss / items.len() as f64,
        accuracy: hits as f64 / items.len() as f64,
    })
}

fn document_labels(docs: &[EncodedDocument], num_labels: usize) -> Result<Vec<usize>> {
    docs.iter()
        .map(|d| match d.label {
            None => Err(Error::Data(format!("document {:?} has no label", d.doc_id))),
            Some(l) if l >= num_labels => Err(Error::Index(format!(
                "document {:?} has label id {l} but only {num_labels} labels exist",
                d.doc_id
            ))),
            Some(l) => Ok(l),
        })
        .collect()
}

/// Trains a softmax classifier over `labels` on top of the `[CLS]`
/// embedding, jointly with the encoder unless `freeze_encoder` is set, and
/// keeps the parameters of the epoch with the best validation accuracy.
pub fn fine_tune_classifier(
    encoder: &mut EncoderModel,
    docs: &[EncodedDocument],
    labels: Vec<String>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    check_nonempty(docs)?;
    let targets = document_labels(docs, labels.len())?;
    let mut rng = seeding::stream(cfg.seed, "finetune", &[]);
    encoder.set_classifier(labels, &mut rng)?;
    let weight = encoder.classifier().expect("just set").weight;
    let (mut train, val) = split(docs.len(), cfg.validation_fraction, &mut rng);

    let frozen: Option<Vec<Vec<f32>>> = if cfg.freeze_encoder {
        Some(
            docs.iter()
                .map(|d| encoder.embed(&d.ids))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let group = if frozen.is_some() {
        vec![weight]
    } else {
        let mut g = encoder.body_params();
        g.push(weight);
        g
    };
    let mut opt = AdamW::new(cfg.optimizer, encoder.params(), group);
    let evaluate = |encoder: &EncoderModel| match &frozen {
        Some(emb) => score(&val, &targets, |i| {
            head_logits(encoder.params(), weight, &emb[i])
        }),
        None => score(&val, &targets, |i| doc_logits(encoder, &docs[i].ids)),
    };

    let initial = evaluate(encoder)?;
    let mut best = (initial.accuracy, initial.loss, 0usize);
    let mut snapshot: ParamStore = encoder.params().clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let dropout_rate = encoder.config().dropout;

    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in train.chunks(cfg.batch_size.max(1)) {
            let inv = 1.0 / batch.len() as f32;
            for &i in batch {
                let grads = {
                    let mut tape = Tape::with_params(encoder.params());
                    let cls = match &frozen {
                        Some(emb) => {
                            tape.input(Tensor::new(vec![1, emb[i].len()], emb[i].clone())?)
                        }
                        None => {
                            let dropout = Dropout {
                                rate: dropout_rate,
                                rng: &mut rng,
                            };
                            encoder.forward(&mut tape, &docs[i].ids, Some(dropout))?.cls
                        }
                    };
                    let logits = encoder.classifier_logits(&mut tape, cls)?;
                    let loss = tape.cross_entropy(logits, &[targets[i]], Reduction::Sum)?;
                    total += f64::from(tape.scalar(loss)?);
                    let scaled = tape.scale(loss, inv);
                    tape.backward(scaled)?
                };
                encoder.params_mut().accumulate(&grads)?;
            }
            opt.step(encoder.params_mut())?;
            encoder.params_mut().zero_grad();
        }
        let scored = evaluate(encoder)?;
        let record = FinetuneEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: scored.loss,
            val_accuracy: scored.accuracy,
        };
        log::info!(
            "finetune epoch {epoch}: train loss {:.4}, val loss {:.4}, val accuracy {:.3}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy
        );
        history.push(record);
        let better =
            scored.accuracy > best.0 || (scored.accuracy == best.0 && scored.loss < best.1);
        if better {
            best = (scored.accuracy, scored.loss, epoch);
            snapshot = encoder.params().clone();
        }
    }
    *encoder.params_mut() = snapshot;
    Ok(FinetuneReport {
        epochs: history,
        best_epoch: best.2,
        train_size: train.len(),
        val_size: val.len(),
    })
}

fn head_logits(store: &ParamStore, weight: ParamId, embedding: &[f32]) -> Result<Vec<f32>> {
    let x = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
    Ok(x.matmul(store.get(weight))?.into_data())
}

fn doc_logits(encoder: &EncoderModel, ids: &[usize]) -> Result<Vec<f32>> {
    let mut tape = Tape::with_params(encoder.params());
    let out = encoder.forward(&mut tape, ids, None)?;
    let logits = encoder.classifier_logits(&mut tape, out.cls)?;
    Ok(tape.value(logits).to_vec())
}
