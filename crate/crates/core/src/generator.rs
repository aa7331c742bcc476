//! Summary decoding from cluster centers: top-K/top-p sampling of several
//! candidates, re-ranked by cosine similarity to the center.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderModel;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::metrics::cosine;
use crate::seeding;
use crate::tokenizer::{Vocabulary, CLS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Capped at the vocabulary size.
    pub top_k: usize,
    pub top_p: f64,
    pub num_candidates: usize,
    /// Generated tokens per summary, counting the closing `[SEP]`.
    pub max_summary_len: usize,
    pub temperature: f64,
    pub start_token: usize,
    /// Candidates kept per cluster after ranking.
    pub keep_top: usize,
    /// Drops kept candidates scoring below this, when set.
    pub min_score: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 50,
            top_p: 0.95,
            num_candidates: 10,
            max_summary_len: 48,
            temperature: 1.0,
            start_token: CLS,
            keep_top: 1,
            min_score: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.num_candidates == 0 || self.keep_top == 0 {
            return Err(Error::Config(
                "num_candidates and keep_top must be at least 1".into(),
            ));
        }
        if self.keep_top > self.num_candidates {
            return Err(Error::Config(format!(
                "keep_top {} exceeds num_candidates {}",
                self.keep_top, self.num_candidates
            )));
        }
        if self.max_summary_len == 0 || self.max_summary_len > max_len {
            return Err(Error::Config(format!(
                "max_summary_len {} outside 1..={max_len}",
                self.max_summary_len
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.start_token >= vocab_size {
            return Err(Error::Config(format!(
                "start token {} outside the vocabulary",
                self.start_token
            )));
        }
        Ok(())
    }
}

/// Keeps the `k` most probable tokens, then the shortest prefix of those
/// whose original mass reaches `p`, and renormalizes. Ties go to the lower
/// token id. With nothing removed the input is returned unchanged.
pub fn filter_top_k_top_p(probs: &[f64], k: usize, p: f64) -> Result<Vec<f64>> {
    if k == 0 || !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("invalid filter k={k}, p={p}")));
    }
    if probs.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Data(
            "distribution has negative or non-finite entries".into(),
        ));
    }
    if !probs.iter().any(|&x| x > 0.0) {
        return Err(Error::Data("distribution has no mass".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut mass = 0.0;
    let mut keep = 0;
    for &i in &order {
        mass += probs[i];
        keep += 1;
        if mass >= p {
            break;
        }
    }
    order.truncate(keep);
    let positive = probs.iter().filter(|&&x| x > 0.0).count();
    if order.iter().filter(|&&i| probs[i] > 0.0).count() == positive {
        return Ok(probs.to_vec());
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

/// Draws an index from a distribution with non-negative weights.
pub fn sample(dist: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let index = WeightedIndex::new(dist).map_err(|e| Error::Data(format!("cannot sample: {e}")))?;
    Ok(index.sample(rng))
}

/// Softmax over the tokens a summary may contain: every word plus `[SEP]`.
fn next_token_distribution(logits: &[f32], temperature: f64) -> Vec<f64> {
    let allowed = |id: usize| id == SEP || !Vocabulary::is_special(id);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(id, _)| allowed(id))
        .fold(f32::NEG_INFINITY, |m, (_, &x)| m.max(x));
    let exps: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(id, &x)| {
            if allowed(id) {
                ((f64::from(x) - f64::from(max)) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One sampled token sequence, without the start token.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ids: Vec<usize>,
    /// Filtered distribution of each step, for inspection.
    pub steps: Vec<Vec<f64>>,
}

impl Generation {
    /// Generated tokens before `[SEP]`.
    pub fn body(&self) -> &[usize] {
        match self.ids.last() {
            Some(&SEP) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Samples tokens conditioned on `center` until `[SEP]` or
/// `max_summary_len` tokens. Special tokens other than `[SEP]` are never
/// emitted, so the decoded text re-encodes to the same ids.
pub fn generate_summary(
    decoder: &DecoderModel,
    center: &[f32],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Generation> {
    let dcfg = decoder.config();
    cfg.validate(dcfg.vocab_size, dcfg.max_len)?;
    let mut prefix = vec![cfg.start_token];
    let mut steps = Vec::new();
    while prefix.len() <= cfg.max_summary_len {
        let logits = decoder.logits(&prefix, center)?;
        let last = &logits[(prefix.len() - 1) * dcfg.vocab_size..];
        let filtered = filter_top_k_top_p(
            &next_token_distribution(last, cfg.temperature),
            cfg.top_k.min(dcfg.vocab_size),
            cfg.top_p,
        )?;
        let token = sample(&filtered, rng)?;
        steps.push(filtered);
        prefix.push(token);
        if token == SEP {
            break;
        }
    }
    prefix.remove(0);
    Ok(Generation { ids: prefix, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCandidate {
    pub cluster: usize,
    /// 1-based position after ranking.
    pub rank: usize,
    /// Order in which the candidate was sampled.
    pub candidate: usize,
    pub score: f64,
    pub ids: Vec<usize>,
    pub text: String,
    /// Set when the decoder emitted `[SEP]` straight away.
    pub empty: bool,
}

impl SummaryCandidate {
    pub fn token_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id != SEP).count()
    }
}

/// Embeds a generated body through the frozen encoder as `[CLS] body [SEP]`.
pub fn embed_summary(encoder: &EncoderModel, body: &[usize]) -> Result<Vec<f32>> {
    let max_body = encoder.config().max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(body.len().min(max_body) + 2);
    ids.push(CLS);
    ids.extend_from_slice(&body[..body.len().min(max_body)]);
    ids.push(SEP);
    encoder.embed(&ids)
}

/// Samples `num_candidates` summaries for one cluster, each from its own
/// `(seed, cluster, candidate)` stream, and ranks them by cosine similarity
/// of their encoder embedding to the center.
pub fn summarize_cluster(
    decoder: &DecoderModel,
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    cluster: usize,
    center: &[f32],
    cfg: &SamplerConfig,
) -> Result<Vec<SummaryCandidate>> {
    let mut candidates = Vec::with_capacity(cfg.num_candidates);
    for candidate in 0..cfg.num_candidates {
        let mut rng = seeding::stream(cfg.seed, "summary", &[cluster as u64, candidate as u64]);
        let generation = generate_summary(decoder, center, cfg, &mut rng)?;
        let body = generation.body();
        let score = cosine(&embed_summary(encoder, body)?, center)?.clamp(-1.0, 1.0);
        candidates.push(SummaryCandidate {
            cluster,
            rank: 0,
            candidate,
            score,
            ids: generation.ids.clone(),
            text: vocab.decode(body),
            empty: body.is_empty(),
        });
    }
    rank_candidates(&mut candidates);
    Ok(candidates)
}

/// Sorts by non-increasing score, ties by sampling order, and assigns ranks.
pub fn rank_candidates(candidates: &mut [SummaryCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.candidate.cmp(&b.candidate))
    });
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rank = i + 1;
    }
}

/// The ranked candidates kept under `keep_top` and `min_score`.
pub fn retained<'a>(
    ranked: &'a [SummaryCandidate],
    cfg: &SamplerConfig,
) -> Vec<&'a SummaryCandidate> {
    ranked
        .iter()
        .take(cfg.keep_top)
        .filter(|c| cfg.min_score.is_none_or(|m| c.score >= m))
        .collect()
}

/// One line of the summaries file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub cluster: usize,
    pub rank: usize,
    pub score: f64,
    pub text: String,
    pub token_count: usize,
    pub seed: u64,
}

impl SummaryRecord {
    pub fn new(candidate: &SummaryCandidate, seed: u64) -> Self {
        SummaryRecord {
            cluster: candidate.cluster,
            rank: candidate.rank,
            score: candidate.score,
            text: candidate.text.clone(),
            token_count: candidate.token_count(),
            seed,
        }
    }
}

pub fn write_summaries(path: &Path, records: &[SummaryRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_summaries(path: &Path) -> Result<Vec<SummaryRecord>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
