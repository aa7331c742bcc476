//! Word-level vocabulary, document encoding and MLM masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Lowercases `text` and splits it into alphanumeric runs and single
/// punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Canonical form of `text`: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::Data(format!(
                    "vocabulary must start with the special tokens; id {id} is not {special}"
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {tok:?} at id {id}")));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Token ids of `text` without framing, unknowns mapped to `[UNK]`.
    pub fn ids(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins the tokens of `ids`, dropping `[PAD]`, `[CLS]` and `[SEP]`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | CLS | SEP))
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let tokens = text.lines().map(str::to_owned).collect();
        Vocabulary::from_tokens(tokens).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Builds a vocabulary of at most `max_size` entries (specials included)
/// from the tokens occurring at least `min_count` times. Tokens are ranked
/// by descending frequency, ties broken lexicographically.
pub fn build_vocab<I, S>(corpus: I, max_size: usize, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size <= NUM_SPECIAL {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} leaves no room beyond the {NUM_SPECIAL} special tokens"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut texts = 0usize;
    for text in corpus {
        texts += 1;
        for tok in tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if texts == 0 || counts.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&tok.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIAL);

    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// A document as `[CLS] x1 .. xn [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedDocument {
    pub doc_id: String,
    pub ids: Vec<usize>,
    pub label: Option<usize>,
}

impl EncodedDocument {
    /// Tokens between the framing specials.
    pub fn body(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn body_len(&self) -> usize {
        self.ids.len() - 2
    }
}

/// Tokenizes `text`, truncates the body to `max_len - 2` tokens and frames
/// it with `[CLS]`/`[SEP]`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> EncodedDocument {
    let mut body = vocab.ids(text);
    body.truncate(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(CLS);
    ids.extend(body);
    ids.push(SEP);
    EncodedDocument {
        doc_id: String::new(),
        ids,
        label: None,
    }
}

/// How selected positions are corrupted for MLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Every selected token becomes `[MASK]`.
    #[default]
    Replace,
    /// 80% `[MASK]`, 10% random non-special token, 10% unchanged.
    Bert,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    /// Ascending body positions selected for prediction.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub originals: Vec<usize>,
}

/// Number of positions selected out of `body_len` at `rate`.
pub fn mask_count(body_len: usize, rate: f64) -> usize {
    ((rate * body_len as f64).round() as usize).clamp(1, body_len)
}

/// Selects `round(rate × body length)` (at least one) body positions
/// uniformly at random and corrupts them per `strategy`. `[CLS]`/`[SEP]`
/// are never selected.
pub fn mask_for_mlm(
    doc: &EncodedDocument,
    rate: f64,
    strategy: MaskStrategy,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedSequence> {
    let body_len = doc.ids.len().saturating_sub(2);
    if body_len == 0 {
        return Err(Error::Data(format!(
            "document {:?} has no tokens to mask",
            doc.doc_id
        )));
    }
    let count = mask_count(body_len, rate);
    let mut positions: Vec<usize> = index::sample(rng, body_len, count)
        .into_iter()
        .map(|p| p + 1)
        .collect();
    positions.sort_unstable();

    let mut ids = doc.ids.clone();
    let originals: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        ids[p] = match strategy {
            MaskStrategy::Replace => MASK,
            MaskStrategy::Bert => {
                let roll: f64 = rng.random();
                if roll < 0.8 || vocab_size <= NUM_SPECIAL {
                    MASK
                } else if roll < 0.9 {
                    rng.random_range(NUM_SPECIAL..vocab_size)
                } else {
                    ids[p]
                }
            }
        };
    }
    Ok(MaskedSequence {
        ids,
        positions,
        originals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, World!  it's"),
            ["hello", ",", "world", "!", "it", "'", "s"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn frequency_ranking() {
        let v = build_vocab(["a a b"], 100, 1).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert!(a < b);
        assert_eq!(v.token(CLS), Some("[CLS]"));
        assert!(v.id("[UNK]") == Some(1));
    }

    #[test]
    fn min_count_excludes_rare_tokens() {
        let v = build_vocab(["a a b"], 100, 2).unwrap();
        assert!(v.id("b").is_none());
        assert_eq!(
            encode("a b", &v, 10).ids,
            vec![CLS, v.id("a").unwrap(), UNK, SEP]
        );
    }

    #[test]
    fn capacity_limits_non_special_tokens() {
        let v = build_vocab(["a b c d e f g h i j"], 7, 1).unwrap();
        assert_eq!(v.len(), 7);
        // Equal counts: lexicographic order decides.
        assert_eq!(&v.tokens()[NUM_SPECIAL..], ["a", "b"]);
    }

    #[test]
    fn build_errors() {
        assert!(build_vocab(Vec::<String>::new(), 10, 1).is_err());
        assert!(build_vocab(["a"], 5, 1).is_err());
    }

    #[test]
    fn encode_framing_and_truncation() {
        let v = build_vocab(["x"], 10, 1).unwrap();
        assert_eq!(encode("", &v, 10).ids, vec![CLS, SEP]);
        let long = vec!["x"; 100].join(" ");
        let d = encode(&long, &v, 10);
        assert_eq!(d.ids.len(), 10);
        assert_eq!(d.body_len(), 8);
        assert_eq!((d.ids[0], d.ids[9]), (CLS, SEP));
    }

    #[test]
    fn mask_counts() {
        let v = build_vocab(["t"], 10, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let doc = encode(&vec!["t"; 20].join(" "), &v, 64);
        let m = mask_for_mlm(&doc, 0.15, MaskStrategy::Replace, v.len(), &mut rng).unwrap();
        assert_eq!(m.positions.len(), 3);
        let doc = encode("t t t", &v, 64);
        let m = mask_for_mlm(&doc, 0.15, MaskStrategy::Replace, v.len(), &mut rng).unwrap();
        assert_eq!(m.positions.len(), 1);
        let empty = encode("", &v, 64);
        assert!(mask_for_mlm(&empty, 0.15, MaskStrategy::Replace, v.len(), &mut rng).is_err());
    }

    #[test]
    fn masking_frequency_is_uniform() {
        let v = build_vocab(["t"], 10, 1).unwrap();
        let doc = encode(&vec!["t"; 20].join(" "), &v, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = [0usize; 22];
        let draws = 10_000;
        for _ in 0..draws {
            let m = mask_for_mlm(&doc, 0.15, MaskStrategy::Replace, v.len(), &mut rng).unwrap();
            for p in m.positions {
                hits[p] += 1;
            }
        }
        assert_eq!(hits[0] + hits[21], 0);
        for &h in &hits[1..21] {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.15).abs() <= 0.02, "{freq}");
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(["the cat sat on the mat ."], 50, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(picks in proptest::collection::vec(0usize..6, 0..12)) {
            let words = ["alpha", "beta", "gamma", "delta", ",", "."];
            let v = build_vocab([words.join(" ")], 64, 1).unwrap();
            let text: Vec<&str> = picks.iter().map(|&i| words[i]).collect();
            let text = text.join(" ");
            let doc = encode(&text, &v, 64);
            prop_assert_eq!(v.decode(&doc.ids), normalize(&text));
        }

        #[test]
        fn masking_changes_exactly_the_reported_positions(len in 1usize..40, seed in 0u64..1000) {
            let v = build_vocab(["q"], 10, 1).unwrap();
            let doc = encode(&vec!["q"; len].join(" "), &v, 64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mask_for_mlm(&doc, 0.15, MaskStrategy::Replace, v.len(), &mut rng).unwrap();
            for (i, (&a, &b)) in doc.ids.iter().zip(&m.ids).enumerate() {
                prop_assert_eq!(a != b, m.positions.contains(&i));
            }
            prop_assert_eq!(m.ids[0], CLS);
            prop_assert_eq!(*m.ids.last().unwrap(), SEP);
        }
    }
}
