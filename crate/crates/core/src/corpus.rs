//! Line-delimited JSON corpora: one `{"id", "text", "label"?}` object per line.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode, normalize, EncodedDocument, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Parses a corpus file. Blank lines are skipped; any other problem is
/// reported with its 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_corpus(&raw, path)
}

pub fn parse_corpus(raw: &str, path: &Path) -> Result<Vec<CorpusRecord>> {
    let at = |line: usize, message: String| Error::Line {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (index, text) in raw.lines().enumerate() {
        let line = index + 1;
        if text.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(text).map_err(|e| at(line, e.to_string()))?;
        if normalize(&record.text).is_empty() {
            return Err(at(line, format!("record {:?} has no text", record.id)));
        }
        if let Some(first) = seen.insert(record.id.clone(), line) {
            return Err(at(
                line,
                format!(
                    "duplicate id {:?}, first defined on line {first}",
                    record.id
                ),
            ));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "corpus contains no records".into(),
        });
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Sorted distinct labels. Fails if any record is unlabeled.
pub fn label_set(records: &[CorpusRecord]) -> Result<Vec<String>> {
    let mut labels = BTreeSet::new();
    for r in records {
        match &r.label {
            Some(l) => {
                labels.insert(l.clone());
            }
            None => return Err(Error::Data(format!("record {:?} has no label", r.id))),
        }
    }
    Ok(labels.into_iter().collect())
}

/// Encodes every record, attaching label ids when `labels` is given.
pub fn encode_corpus(
    records: &[CorpusRecord],
    vocab: &Vocabulary,
    max_len: usize,
    labels: Option<&[String]>,
) -> Result<Vec<EncodedDocument>> {
    records
        .iter()
        .map(|r| {
            let mut doc = encode(&r.text, vocab, max_len);
            doc.doc_id = r.id.clone();
            if let Some(labels) = labels {
                let name = r
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("record {:?} has no label", r.id)))?;
                let id = labels.iter().position(|l| l == name).ok_or_else(|| {
                    Error::Data(format!("record {:?} has unknown label {name:?}", r.id))
                })?;
                doc.label = Some(id);
            }
            Ok(doc)
        })
        .collect()
}
