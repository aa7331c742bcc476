//! ROUGE against references, embedding-similarity scores for corpora
//! without references, and cluster purity.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::clusterer::euclidean;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when one side was too short to contain a single unit.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        if candidate == 0 || reference == 0 {
            return RougeScore {
                degenerate: true,
                ..RougeScore::default()
            };
        }
        let precision = overlap as f64 / candidate as f64;
        let recall = overlap as f64 / reference as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
            degenerate: false,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap between a candidate and one reference.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::Config("ROUGE-N needs n ≥ 1".into()));
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |tokens: &[T]| tokens.len().saturating_sub(n - 1);
    Ok(RougeScore::from_counts(
        overlap,
        total(candidate),
        total(reference),
    ))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence ROUGE.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

/// Best score over several references, by F1 (first reference on ties).
pub fn best_of<F>(references: &[Vec<String>], mut score: F) -> Result<RougeScore>
where
    F: FnMut(&[String]) -> Result<RougeScore>,
{
    let mut best: Option<RougeScore> = None;
    for r in references {
        let s = score(r)?;
        if best.is_none_or(|b| s.f1 > b.f1) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::Data("no reference summaries".into()))
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Data("cosine of a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean over clusters of `cos(summary_c, center_c)`.
pub fn cosine_center(summaries: &[Vec<f32>], centers: &[Vec<f32>]) -> Result<f64> {
    if summaries.len() != centers.len() || summaries.is_empty() {
        return Err(Error::Shape(
            "one summary embedding per center is required".into(),
        ));
    }
    let total: f64 = summaries
        .iter()
        .zip(centers)
        .map(|(s, c)| cosine(s, c))
        .sum::<Result<f64>>()?;
    Ok(total / summaries.len() as f64)
}

/// One cluster as seen by [`cosine_top_k`].
#[derive(Debug, Clone)]
pub struct ClusterView<'a> {
    pub center: &'a [f32],
    pub summary: &'a [f32],
    /// `(doc_id, embedding)` of every member.
    pub members: Vec<(&'a str, &'a [f32])>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKScore {
    pub k: usize,
    pub value: f64,
    /// Clusters with at most `k` members, scored over all of them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub saturated: Vec<usize>,
}

/// Members of a cluster ordered by distance to its center, doc id on ties.
pub fn nearest_members<'a>(view: &ClusterView<'a>) -> Vec<(&'a str, &'a [f32])> {
    let mut ranked: Vec<(f64, &str, &[f32])> = view
        .members
        .iter()
        .map(|&(id, e)| (euclidean(e, view.center), id, e))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    ranked.into_iter().map(|(_, id, e)| (id, e)).collect()
}

/// Mean over clusters of the mean cosine between the summary and the `k`
/// members nearest to the center.
pub fn cosine_top_k(clusters: &[ClusterView<'_>], k: usize) -> Result<TopKScore> {
    if k == 0 {
        return Err(Error::Config("top-k cosine needs k ≥ 1".into()));
    }
    if clusters.is_empty() {
        return Err(Error::Data("no clusters to score".into()));
    }
    let mut total = 0.0;
    let mut saturated = Vec::new();
    for (c, view) in clusters.iter().enumerate() {
        if view.members.is_empty() {
            return Err(Error::Data(format!("cluster {c} is empty")));
        }
        if view.members.len() <= k {
            saturated.push(c);
        }
        let top = nearest_members(view);
        let top = &top[..k.min(top.len())];
        let sum: f64 = top
            .iter()
            .map(|(_, e)| cosine(view.summary, e))
            .sum::<Result<f64>>()?;
        total += sum / top.len() as f64;
    }
    Ok(TopKScore {
        k,
        value: total / clusters.len() as f64,
        saturated,
    })
}

/// `Σ_clusters max label count / n`.
pub fn cluster_purity<C: Eq + Hash, L: Eq + Hash>(assignment: &[C], gold: &[L]) -> Result<f64> {
    if assignment.len() != gold.len() {
        return Err(Error::Shape(
            "assignment and gold labels differ in length".into(),
        ));
    }
    if assignment.is_empty() {
        return Err(Error::Data("purity of an empty assignment".into()));
    }
    let mut table: HashMap<&C, HashMap<&L, usize>> = HashMap::new();
    for (c, l) in assignment.iter().zip(gold) {
        *table.entry(c).or_default().entry(l).or_insert(0) += 1;
    }
    let hits: usize = table
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / assignment.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge_1: RougeScore,
    pub rouge_2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Everything `evaluate` reports for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clusters: usize,
    /// Mean F1-based ROUGE over clusters that have references.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge: Option<RougeTriple>,
    pub cosine_center: f64,
    pub cosine_top_k: Vec<TopKScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purity: Option<f64>,
}

impl MetricsReport {
    /// Plain-text layout with one row per metric.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>10}", "metric", "value");
        let _ = writeln!(out, "{:<20} {:>10}", "clusters", self.clusters);
        if let Some(r) = &self.rouge {
            for (name, s) in [("R-1", r.rouge_1), ("R-2", r.rouge_2), ("R-L", r.rouge_l)] {
                let _ = writeln!(out, "{name:<20} {:>10.4}", 100.0 * s.f1);
            }
        }
        let _ = writeln!(out, "{:<20} {:>10.4}", "cosine_center", self.cosine_center);
        for t in &self.cosine_top_k {
            let name = format!("cosine_top-{}", t.k);
            let mark = if t.saturated.is_empty() { "" } else { " *" };
            let _ = writeln!(out, "{name:<20} {:>10.4}{mark}", t.value);
        }
        if let Some(p) = self.purity {
            let _ = writeln!(out, "{:<20} {:>10.4}", "purity", p);
        }
        if self.cosine_top_k.iter().any(|t| !t.saturated.is_empty()) {
            let _ = writeln!(out, "* k reaches the size of at least one cluster");
        }
        out
    }
}
