//! Brute-force reimplementations of the closed-form pieces of the pipeline,
//! compared against the library on random small instances.

use clusum::clusterer::{label_membership, membership_weights, weighted_centers, DISTANCE_EPS};
use clusum::decoder::{weighted_ce_loss, DecoderModel, LossMode, TrainingExample};
use clusum::generator::filter_top_k_top_p;
use clusum::metrics::{rouge_l, rouge_n, RougeScore};
use clusum::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 1000;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    /// Largest disagreement; infinite when the library returned an error
    /// or a differently shaped result.
    pub max_error: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_error <= TOLERANCE
    }
}

struct Tracker {
    name: &'static str,
    instances: usize,
    max_error: f64,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Tracker {
            name,
            instances: 0,
            max_error: 0.0,
        }
    }

    fn compare(&mut self, got: &[f64], want: &[f64]) {
        self.instances += 1;
        if got.len() != want.len() {
            self.max_error = f64::INFINITY;
            return;
        }
        for (g, w) in got.iter().zip(want) {
            let err = (g - w).abs();
            self.max_error = self
                .max_error
                .max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }

    fn report(self) -> OracleReport {
        OracleReport {
            name: self.name,
            instances: self.instances,
            max_error: self.max_error,
        }
    }
}

fn rng(domain: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed ^ domain)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0f32..2.0)).collect())
        .collect()
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Each weight as the smallest ratio `d_k / d_j` over all members `k`.
pub fn membership_weight_oracle() -> OracleReport {
    let mut t = Tracker::new("membership weights");
    let mut rng = rng(1);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..8);
        let dim = rng.random_range(1..6);
        let mut members = random_points(&mut rng, n, dim);
        let center = random_points(&mut rng, 1, dim).remove(0);
        if rng.random_bool(0.2) {
            members[0] = center.clone();
        }
        let refs: Vec<&[f32]> = members.iter().map(Vec::as_slice).collect();
        let want: Vec<f64> = members
            .iter()
            .map(|m| {
                let dj = distance(m, &center).max(DISTANCE_EPS);
                members
                    .iter()
                    .map(|o| distance(o, &center).max(DISTANCE_EPS) / dj)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        match membership_weights(&refs, &center) {
            Ok(got) => t.compare(&got, &want),
            Err(_) => t.compare(&[], &want),
        }
    }
    t.report()
}

/// Weighted mean of each cluster, one coordinate at a time.
#[allow(clippy::needless_range_loop)]
pub fn weighted_center_oracle() -> OracleReport {
    let mut t = Tracker::new("weighted centers");
    let mut rng = rng(2);
    for _ in 0..INSTANCES {
        let k = rng.random_range(1..4);
        let n = rng.random_range(k..k + 8);
        let dim = rng.random_range(1..5);
        let points = random_points(&mut rng, n, dim);
        // the first k documents seed every cluster so none is empty
        let assignment: Vec<usize> = (0..n)
            .map(|i| if i < k { i } else { rng.random_range(0..k) })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut want = Vec::new();
        for c in 0..k {
            let mass: f64 = (0..n)
                .filter(|&i| assignment[i] == c)
                .map(|i| weights[i])
                .sum();
            for d in 0..dim {
                let s: f64 = (0..n)
                    .filter(|&i| assignment[i] == c)
                    .map(|i| weights[i] * points[i][d] as f64)
                    .sum();
                want.push((s / mass) as f32 as f64);
            }
        }
        match weighted_centers(&points, &assignment, &weights, k) {
            Ok(got) => t.compare(
                &got.concat().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &want,
            ),
            Err(_) => t.compare(&[], &want),
        }
    }
    t.report()
}

/// The first label whose probability no other label exceeds.
pub fn label_argmax_oracle() -> OracleReport {
    let mut t = Tracker::new("label argmax and weight");
    let mut rng = rng(3);
    for _ in 0..INSTANCES {
        let l = rng.random_range(1..7);
        // coarse values make ties common
        let raw: Vec<f32> = (0..l).map(|_| rng.random_range(1..5) as f32).collect();
        let total: f32 = raw.iter().sum();
        let probs: Vec<f32> = raw.iter().map(|v| v / total).collect();
        let best = (0..l)
            .find(|&i| (0..l).all(|j| probs[j] <= probs[i]))
            .expect("a maximum exists");
        let want = [best as f64, probs[best] as f64];
        match label_membership(&probs) {
            Ok((c, w)) => t.compare(&[c as f64, w], &want),
            Err(_) => t.compare(&[], &want),
        }
    }
    t.report()
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        num_blocks: 1,
        num_heads: 2,
        ffn_size: 16,
        max_len: 12,
        vocab_size: vocab,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
        init_std: 0.5,
    }
}

/// `-log softmax(row)[target]` in f64 straight from the definition.
fn nll(row: &[f32], target: usize) -> f64 {
    let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
    denom.ln() - row[target] as f64
}

/// `Σ_i w_i Σ_t -log p(y_t | y_<t, memory_i)` from the decoder's logits,
/// plus its per-token normalization.
pub fn weighted_loss_oracle() -> OracleReport {
    let mut t = Tracker::new("weighted cross-entropy");
    let mut rng = rng(4);
    let vocab = 14;
    let mut decoder = None;
    for i in 0..INSTANCES {
        if i % 100 == 0 {
            decoder = Some(DecoderModel::new(tiny_config(vocab), &mut rng).expect("decoder"));
        }
        let decoder = decoder.as_ref().expect("decoder");
        let batch: Vec<TrainingExample> = (0..rng.random_range(1..5))
            .map(|b| {
                let len = rng.random_range(1..10);
                let input: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                TrainingExample {
                    doc_id: format!("d{b}"),
                    input,
                    target,
                    memory: (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                    weight: if rng.random_bool(0.1) {
                        0.0
                    } else {
                        rng.random_range(0.0..=1.0)
                    },
                }
            })
            .collect();
        let mut raw = 0.0f64;
        let mut tokens = 0usize;
        for ex in &batch {
            let logits = decoder.logits(&ex.input, &ex.memory).expect("logits");
            let sum: f64 = ex
                .target
                .iter()
                .enumerate()
                .map(|(r, &y)| nll(&logits[r * vocab..(r + 1) * vocab], y))
                .sum();
            raw += ex.weight * sum;
            tokens += ex.target.len();
        }
        let want = [raw, raw / tokens as f64];
        let got = [
            weighted_ce_loss(decoder, &batch, LossMode::Raw),
            weighted_ce_loss(decoder, &batch, LossMode::PerToken),
        ];
        match got {
            [Ok(a), Ok(b)] => {
                // relative to the loss scale: the forward pass stores f32
                let scale = want[0].abs().max(1.0);
                t.compare(&[a / scale, b / scale], &[want[0] / scale, want[1] / scale]);
            }
            _ => t.compare(&[], &want),
        }
    }
    t.report()
}

/// Ranks every token by counting the tokens ahead of it, keeps the first
/// `k`, then grows the kept prefix one rank at a time until its mass
/// reaches `p`.
pub fn top_k_top_p_oracle() -> OracleReport {
    let mut t = Tracker::new("top-k/top-p filter");
    let mut rng = rng(5);
    for _ in 0..INSTANCES {
        let v = rng.random_range(1..10);
        let mut raw: Vec<f64> = (0..v).map(|_| rng.random_range(0..6) as f64).collect();
        if raw.iter().all(|&x| x == 0.0) {
            raw[0] = 1.0;
        }
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let k = rng.random_range(1..v + 2);
        let p = if rng.random_bool(0.2) {
            1.0
        } else {
            rng.random_range(0.01..1.0)
        };

        let rank = |i: usize| {
            (0..v)
                .filter(|&j| probs[j] > probs[i] || (probs[j] == probs[i] && j < i))
                .count()
        };
        let by_rank: Vec<usize> = (0..v.min(k))
            .map(|r| {
                (0..v)
                    .find(|&i| rank(i) == r)
                    .expect("ranks are a permutation")
            })
            .collect();
        let mut kept = Vec::new();
        let mut mass = 0.0;
        for &i in &by_rank {
            kept.push(i);
            mass += probs[i];
            if mass >= p {
                break;
            }
        }
        let all_positive_kept = (0..v)
            .filter(|&i| probs[i] > 0.0)
            .all(|i| kept.contains(&i));
        let want: Vec<f64> = if all_positive_kept {
            probs.clone()
        } else {
            (0..v)
                .map(|i| {
                    if kept.contains(&i) {
                        probs[i] / mass
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        match filter_top_k_top_p(&probs, k, p) {
            Ok(got) => t.compare(&got, &want),
            Err(_) => t.compare(&[], &want),
        }
    }
    t.report()
}

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| rng.random_range(b'a'..b'e')).collect()
}

fn scores(s: &RougeScore) -> [f64; 4] {
    [
        s.precision,
        s.recall,
        s.f1,
        if s.degenerate { 1.0 } else { 0.0 },
    ]
}

fn expected(overlap: usize, cand: usize, reference: usize) -> [f64; 4] {
    if cand == 0 || reference == 0 {
        return [0.0, 0.0, 0.0, 1.0];
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    let f = if overlap == 0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    [p, r, f, 0.0]
}

/// Clipped n-gram matches counted by scanning both n-gram lists for every
/// distinct candidate n-gram.
pub fn rouge_n_oracle() -> OracleReport {
    let mut t = Tracker::new("ROUGE-1/2 counting");
    let mut rng = rng(6);
    for i in 0..INSTANCES {
        let n = 1 + i % 2;
        let cand = random_tokens(&mut rng, 10);
        let reference = random_tokens(&mut rng, 10);
        let grams = |s: &[u8]| -> Vec<Vec<u8>> {
            if s.len() < n {
                Vec::new()
            } else {
                (0..=s.len() - n).map(|j| s[j..j + n].to_vec()).collect()
            }
        };
        let (cg, rg) = (grams(&cand), grams(&reference));
        let mut seen: Vec<&Vec<u8>> = Vec::new();
        let mut overlap = 0;
        for g in &cg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_cand = cg.iter().filter(|x| *x == g).count();
            let in_ref = rg.iter().filter(|x| *x == g).count();
            overlap += in_cand.min(in_ref);
        }
        let want = expected(overlap, cg.len(), rg.len());
        match rouge_n(&cand, &reference, n) {
            Ok(s) => t.compare(&scores(&s), &want),
            Err(_) => t.compare(&[], &want),
        }
    }
    t.report()
}

fn is_subsequence(needle: &[u8], hay: &[u8]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|c| it.any(|h| h == c))
}

/// Longest common subsequence by trying every subset of the candidate.
pub fn rouge_l_oracle() -> OracleReport {
    let mut t = Tracker::new("ROUGE-L");
    let mut rng = rng(7);
    for _ in 0..INSTANCES {
        let cand = random_tokens(&mut rng, 10);
        let reference = random_tokens(&mut rng, 10);
        let mut lcs = 0;
        for mask in 0u32..(1 << cand.len()) {
            let sub: Vec<u8> = (0..cand.len())
                .filter(|&j| mask & (1 << j) != 0)
                .map(|j| cand[j])
                .collect();
            if sub.len() > lcs && is_subsequence(&sub, &reference) {
                lcs = sub.len();
            }
        }
        let want = expected(lcs, cand.len(), reference.len());
        t.compare(&scores(&rouge_l(&cand, &reference)), &want);
    }
    t.report()
}

pub fn run_all() -> Vec<OracleReport> {
    vec![
        membership_weight_oracle(),
        weighted_center_oracle(),
        label_argmax_oracle(),
        weighted_loss_oracle(),
        top_k_top_p_oracle(),
        rouge_n_oracle(),
        rouge_l_oracle(),
    ]
}
