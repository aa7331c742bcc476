//! Generated corpora with known structure, used by tests and the
//! `synth-corpus` command.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::seeding;

/// Documents that are runs of consecutive words `w0 w1 w2 ...` (wrapping
/// after the last word), so every word fixes both of its neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub docs: usize,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec {
            docs: 200,
            words: 150,
            min_len: 12,
            max_len: 30,
            seed: 0,
        }
    }
}

pub fn chain_word(i: usize) -> String {
    format!("w{i}")
}

pub fn successor_chain(spec: &ChainSpec) -> Result<Vec<CorpusRecord>> {
    if spec.words < 2 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!("invalid chain corpus spec {spec:?}")));
    }
    let mut rng = seeding::stream(spec.seed, "synthetic-chain", &[]);
    Ok((0..spec.docs)
        .map(|d| {
            let start = rng.random_range(0..spec.words);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let text = (0..len)
                .map(|k| chain_word((start + k) % spec.words))
                .collect::<Vec<_>>()
                .join(" ");
            CorpusRecord {
                id: format!("chain-{d:04}"),
                text,
                label: None,
            }
        })
        .collect())
}

/// Documents drawn from disjoint per-topic vocabularies, optionally
/// contaminated with words from a shared pool. Each document gets its own
/// contamination rate, uniform in `[0, max_noise]`, which spreads documents
/// from the topic core out to its fringe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub docs: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub shared_words: usize,
    pub max_noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub labeled: bool,
    pub seed: u64,
}

impl Default for TopicSpec {
    fn default() -> Self {
        TopicSpec {
            docs: 200,
            topics: 2,
            words_per_topic: 40,
            shared_words: 20,
            max_noise: 0.0,
            min_len: 10,
            max_len: 24,
            labeled: false,
            seed: 0,
        }
    }
}

pub fn topic_name(t: usize) -> String {
    format!("topic{t}")
}

pub fn topics(spec: &TopicSpec) -> Result<Vec<CorpusRecord>> {
    if spec.topics == 0
        || spec.words_per_topic == 0
        || spec.min_len == 0
        || spec.min_len > spec.max_len
    {
        return Err(Error::Config(format!("invalid topic corpus spec {spec:?}")));
    }
    if !(0.0..=1.0).contains(&spec.max_noise) || (spec.max_noise > 0.0 && spec.shared_words == 0) {
        return Err(Error::Config(
            "noise needs a rate in [0, 1] and a shared pool".into(),
        ));
    }
    let mut rng = seeding::stream(spec.seed, "synthetic-topics", &[]);
    Ok((0..spec.docs)
        .map(|d| {
            let topic = d % spec.topics;
            let noise = if spec.max_noise > 0.0 {
                rng.random_range(0.0..=spec.max_noise)
            } else {
                0.0
            };
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < noise {
                        format!("s{}", rng.random_range(0..spec.shared_words))
                    } else {
                        format!("t{topic}x{}", rng.random_range(0..spec.words_per_topic))
                    }
                })
                .collect();
            CorpusRecord {
                id: format!("doc-{d:04}"),
                text: words.join(" "),
                label: spec.labeled.then(|| topic_name(topic)),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize;

    #[test]
    fn chain_documents_follow_the_successor_rule() {
        let spec = ChainSpec {
            docs: 20,
            words: 7,
            ..ChainSpec::default()
        };
        for r in successor_chain(&spec).unwrap() {
            let ids: Vec<usize> = tokenize(&r.text)
                .iter()
                .map(|w| w[1..].parse().unwrap())
                .collect();
            assert!((spec.min_len..=spec.max_len).contains(&ids.len()));
            assert!(ids.windows(2).all(|p| p[1] == (p[0] + 1) % 7));
        }
        assert_eq!(
            successor_chain(&spec).unwrap(),
            successor_chain(&spec).unwrap()
        );
    }

    #[test]
    fn noiseless_topics_are_disjoint() {
        let spec = TopicSpec {
            docs: 30,
            labeled: true,
            ..TopicSpec::default()
        };
        for (d, r) in topics(&spec).unwrap().iter().enumerate() {
            let prefix = format!("t{}x", d % 2);
            assert!(tokenize(&r.text).iter().all(|w| w.starts_with(&prefix)));
            assert_eq!(r.label.as_deref(), Some(topic_name(d % 2).as_str()));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(successor_chain(&ChainSpec {
            words: 1,
            ..ChainSpec::default()
        })
        .is_err());
        assert!(topics(&TopicSpec {
            max_noise: 0.5,
            shared_words: 0,
            ..TopicSpec::default()
        })
        .is_err());
    }
}
