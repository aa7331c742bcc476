//! Hard document clustering on `[CLS]` embeddings, with membership weights
//! that shrink the influence of documents far from their cluster center.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::seeding;
use crate::tokenizer::EncodedDocument;

/// Clamp applied to distances so coincident points never divide by zero.
pub const DISTANCE_EPS: f64 = 1e-8;

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn check_points(points: &[Vec<f32>]) -> Result<usize> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no points to cluster".into()))?;
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape(
            "points must share one nonzero dimension".into(),
        ));
    }
    Ok(dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f32>>,
    pub iterations: usize,
    /// Within-cluster sum of squared distances after every centroid update.
    pub sse_history: Vec<f64>,
}

/// Index of the nearest centroid. Ties go to `current` when it is among the
/// nearest, otherwise to the lowest index.
fn nearest(point: &[f32], centroids: &[Vec<f32>], current: Option<usize>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    match current {
        Some(c) if sq_dist(point, &centroids[c]) == best.1 => c,
        _ => best.0,
    }
}

fn seed_plus_plus(points: &[Vec<f32>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).expect("positive total");
            }
            pick
        } else {
            // Every point coincides with a chosen one: pick any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn means(
    points: &[Vec<f32>],
    assignment: &[usize],
    k: usize,
    dim: usize,
) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment) {
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(p) {
            *s += f64::from(v);
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            s.into_iter()
                .map(|v| if n > 0 { (v / n as f64) as f32 } else { 0.0 })
                .collect()
        })
        .collect();
    (centroids, counts)
}

/// Centroids for `assignment`, moving the globally farthest point (from its
/// own centroid) into any empty cluster until none is empty.
fn update(points: &[Vec<f32>], assignment: &mut [usize], k: usize, dim: usize) -> Vec<Vec<f32>> {
    loop {
        let (centroids, counts) = means(points, assignment, k, dim);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return centroids;
        };
        let mut far = (usize::MAX, -1.0f64);
        for (i, p) in points.iter().enumerate() {
            let c = assignment[i];
            if counts[c] > 1 {
                let d = sq_dist(p, &centroids[c]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assignment[far.0] = empty;
    }
}

fn sse(points: &[Vec<f32>], assignment: &[usize], centroids: &[Vec<f32>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding and Euclidean distance. Stops
/// when assignments no longer change or after `max_iters` updates.
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> Result<KMeans> {
    let dim = check_points(points)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Data(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignment: Vec<usize> = points
        .iter()
        .map(|p| nearest(p, &centroids, None))
        .collect();
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        centroids = update(points, &mut assignment, k, dim);
        sse_history.push(sse(points, &assignment, &centroids));
        let next: Vec<usize> = points
            .iter()
            .zip(&assignment)
            .map(|(p, &c)| nearest(p, &centroids, Some(c)))
            .collect();
        if next == assignment || iterations >= max_iters.max(1) {
            break;
        }
        assignment = next;
    }
    Ok(KMeans {
        assignment,
        centroids,
        iterations,
        sse_history,
    })
}

/// `w_j = min_k dist(C, d_k) / dist(C, d_j)` with both distances clamped
/// below at [`DISTANCE_EPS`].
pub fn membership_weights(members: &[&[f32]], center: &[f32]) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::Data("cluster has no members".into()));
    }
    if members.iter().any(|m| m.len() != center.len()) {
        return Err(Error::Shape("member and center dimensions differ".into()));
    }
    let dists: Vec<f64> = members
        .iter()
        .map(|m| euclidean(m, center).max(DISTANCE_EPS))
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(dists.iter().map(|&d| min / d).collect())
}

/// Per-cluster weighted mean `Σ w_j d_j / Σ w_j`.
pub fn weighted_centers(
    embeddings: &[Vec<f32>],
    assignment: &[usize],
    weights: &[f64],
    k: usize,
) -> Result<Vec<Vec<f32>>> {
    let dim = check_points(embeddings)?;
    if assignment.len() != embeddings.len() || weights.len() != embeddings.len() {
        return Err(Error::Shape(
            "embeddings, assignment and weights differ in length".into(),
        ));
    }
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut mass = vec![0.0f64; k];
    for ((e, &c), &w) in embeddings.iter().zip(assignment).zip(weights) {
        if c >= k {
            return Err(Error::Index(format!("cluster {c} with k = {k}")));
        }
        mass[c] += w;
        for (s, &v) in sums[c].iter_mut().zip(e) {
            *s += w * f64::from(v);
        }
    }
    sums.into_iter()
        .zip(&mass)
        .enumerate()
        .map(|(c, (s, &m))| {
            if m <= 0.0 {
                return Err(Error::Data(format!("cluster {c} is empty")));
            }
            Ok(s.into_iter().map(|v| (v / m) as f32).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSource {
    KMeans,
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub doc_id: String,
    pub cluster: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub source: ClusterSource,
    pub members: Vec<Membership>,
    /// Weighted centers, one per cluster.
    pub centers: Vec<Vec<f32>>,
    /// k-means centroids, or unweighted member means on the label path.
    pub raw_centers: Vec<Vec<f32>>,
    /// Cluster names on the label path.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        source: ClusterSource,
        k: usize,
        dim: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        labels: Vec<String>,
    },
    Center {
        cluster: usize,
        center: Vec<f32>,
        raw_center: Vec<f32>,
    },
    Document(Membership),
}

impl ClusterSet {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Member indices of every cluster, in document order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, m) in self.members.iter().enumerate() {
            out[m.cluster].push(i);
        }
        out
    }

    pub fn assignment(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.cluster).collect()
    }

    /// Checks hard assignment, weights in (0, 1], unique ids, and on the
    /// k-means path a weight of exactly 1 in every non-empty cluster.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.raw_centers.len() != k {
            return Err(Error::Data(
                "cluster set needs k ≥ 1 centers and as many raw centers".into(),
            ));
        }
        let dim = self.centers[0].len();
        if self
            .centers
            .iter()
            .chain(&self.raw_centers)
            .any(|c| c.len() != dim)
        {
            return Err(Error::Shape("centers differ in dimension".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for m in &self.members {
            if !ids.insert(m.doc_id.as_str()) {
                return Err(Error::Data(format!(
                    "document {:?} appears twice",
                    m.doc_id
                )));
            }
            if m.cluster >= k {
                return Err(Error::Data(format!(
                    "document {:?} in cluster {} of {k}",
                    m.doc_id, m.cluster
                )));
            }
            if !(m.weight > 0.0 && m.weight <= 1.0) {
                return Err(Error::Data(format!(
                    "document {:?} has weight {}",
                    m.doc_id, m.weight
                )));
            }
        }
        if self.source == ClusterSource::KMeans {
            for (c, members) in self.clusters().iter().enumerate() {
                if !members.is_empty() && !members.iter().any(|&i| self.members[i].weight == 1.0) {
                    return Err(Error::Data(format!(
                        "cluster {c} has no document of weight 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut line = |r: &Record| -> Result<()> {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
            Ok(())
        };
        line(&Record::Header {
            source: self.source,
            k: self.k(),
            dim: self.centers.first().map_or(0, Vec::len),
            labels: self.labels.clone(),
        })?;
        for (c, (center, raw)) in self.centers.iter().zip(&self.raw_centers).enumerate() {
            line(&Record::Center {
                cluster: c,
                center: center.clone(),
                raw_center: raw.clone(),
            })?;
        }
        for m in &self.members {
            line(&Record::Document(m.clone()))?;
        }
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        fs::File::create(path)
            .map_err(io)?
            .write_all(&out)
            .map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let at = |line: usize, message: String| Error::Line {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = None;
        let mut centers: Vec<Option<(Vec<f32>, Vec<f32>)>> = Vec::new();
        let mut members = Vec::new();
        for (index, text) in raw.lines().enumerate() {
            let line = index + 1;
            if text.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(text).map_err(|e| at(line, e.to_string()))?;
            match record {
                Record::Header {
                    source,
                    k,
                    dim,
                    labels,
                } => {
                    if header.is_some() {
                        return Err(at(line, "second header".into()));
                    }
                    header = Some((source, dim, labels));
                    centers = vec![None; k];
                }
                Record::Center {
                    cluster,
                    center,
                    raw_center,
                } => {
                    let slot = centers.get_mut(cluster).ok_or_else(|| {
                        at(
                            line,
                            format!("center {cluster} before header or out of range"),
                        )
                    })?;
                    *slot = Some((center, raw_center));
                }
                Record::Document(m) => members.push(m),
            }
        }
        let (source, _, labels) = header.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing header record".into(),
        })?;
        let mut set = ClusterSet {
            source,
            members,
            centers: Vec::new(),
            raw_centers: Vec::new(),
            labels,
        };
        for (c, slot) in centers.into_iter().enumerate() {
            let (center, raw) = slot.ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("missing center {c}"),
            })?;
            set.centers.push(center);
            set.raw_centers.push(raw);
        }
        set.validate().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 2,
            max_iters: 100,
            seed: 0,
        }
    }
}

/// k-means, then weights against the raw centroids, then one weighted
/// center update.
pub fn cluster_embeddings(
    doc_ids: &[String],
    embeddings: &[Vec<f32>],
    cfg: &KMeansConfig,
) -> Result<ClusterSet> {
    if doc_ids.len() != embeddings.len() {
        return Err(Error::Shape(
            "one embedding per document is required".into(),
        ));
    }
    let mut rng = seeding::stream(cfg.seed, "kmeans", &[]);
    let km = kmeans(embeddings, cfg.k, cfg.max_iters, &mut rng)?;
    let mut weights = vec![0.0; embeddings.len()];
    for c in 0..cfg.k {
        let idx: Vec<usize> = (0..embeddings.len())
            .filter(|&i| km.assignment[i] == c)
            .collect();
        let members: Vec<&[f32]> = idx.iter().map(|&i| embeddings[i].as_slice()).collect();
        for (&i, w) in idx
            .iter()
            .zip(membership_weights(&members, &km.centroids[c])?)
        {
            weights[i] = w;
        }
    }
    let centers = weighted_centers(embeddings, &km.assignment, &weights, cfg.k)?;
    Ok(ClusterSet {
        source: ClusterSource::KMeans,
        members: doc_ids
            .iter()
            .zip(&km.assignment)
            .zip(&weights)
            .map(|((id, &cluster), &weight)| Membership {
                doc_id: id.clone(),
                cluster,
                weight,
            })
            .collect(),
        centers,
        raw_centers: km.centroids,
        labels: Vec::new(),
    })
}

/// Cluster and weight of one label distribution: argmax (lowest id on
/// ties) and the maximal probability.
pub fn label_membership(probs: &[f32]) -> Result<(usize, f64)> {
    if probs.is_empty() {
        return Err(Error::Data("empty label distribution".into()));
    }
    let mut best = 0;
    for (l, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = l;
        }
    }
    Ok((best, f64::from(probs[best])))
}

/// Assigns each document to its most probable label and weighs it by that
/// probability. Every label must receive at least one document.
pub fn cluster_label_probabilities(
    doc_ids: &[String],
    embeddings: &[Vec<f32>],
    probs: &[Vec<f32>],
    labels: Vec<String>,
) -> Result<ClusterSet> {
    if doc_ids.len() != embeddings.len() || probs.len() != embeddings.len() {
        return Err(Error::Shape(
            "one embedding and one distribution per document is required".into(),
        ));
    }
    let k = labels.len();
    let mut assignment = Vec::with_capacity(probs.len());
    let mut weights = Vec::with_capacity(probs.len());
    for p in probs {
        if p.len() != k {
            return Err(Error::Shape(format!(
                "distribution over {} labels, expected {k}",
                p.len()
            )));
        }
        let (c, w) = label_membership(p)?;
        assignment.push(c);
        weights.push(w);
    }
    let ones = vec![1.0; weights.len()];
    let raw_centers = weighted_centers(embeddings, &assignment, &ones, k).map_err(|e| {
        Error::Data(format!(
            "label clustering left a label without documents ({e})"
        ))
    })?;
    let centers = weighted_centers(embeddings, &assignment, &weights, k)?;
    Ok(ClusterSet {
        source: ClusterSource::Labels,
        members: doc_ids
            .iter()
            .zip(assignment.iter().zip(&weights))
            .map(|(id, (&cluster, &weight))| Membership {
                doc_id: id.clone(),
                cluster,
                weight,
            })
            .collect(),
        centers,
        raw_centers,
        labels,
    })
}

pub fn embed_documents(encoder: &EncoderModel, docs: &[EncodedDocument]) -> Result<Vec<Vec<f32>>> {
    docs.iter().map(|d| encoder.embed(&d.ids)).collect()
}

fn doc_ids(docs: &[EncodedDocument]) -> Vec<String> {
    docs.iter().map(|d| d.doc_id.clone()).collect()
}

pub fn cluster_without_labels(
    encoder: &EncoderModel,
    docs: &[EncodedDocument],
    cfg: &KMeansConfig,
) -> Result<ClusterSet> {
    let embeddings = embed_documents(encoder, docs)?;
    cluster_embeddings(&doc_ids(docs), &embeddings, cfg)
}

pub fn cluster_with_labels(encoder: &EncoderModel, docs: &[EncodedDocument]) -> Result<ClusterSet> {
    let head = encoder
        .classifier()
        .ok_or_else(|| Error::Contract("label clustering needs a fine-tuned classifier".into()))?;
    let labels = head.labels.clone();
    let embeddings = embed_documents(encoder, docs)?;
    let probs = docs
        .iter()
        .map(|d| encoder.classify(&d.ids))
        .collect::<Result<Vec<_>>>()?;
    cluster_label_probabilities(&doc_ids(docs), &embeddings, &probs, labels)
}
