//! Finite-difference gradient checks for every differentiable tape
//! operation.
//!
//! Each case feeds random leaf tensors through one operation, contracts the
//! output with a fixed random weight vector `r` to get a scalar
//! `L = Σ op(x) · r`, and compares the tape's analytic gradient with central
//! differences taken two ways:
//!
//! * in float32, by re-running the tape itself on perturbed inputs;
//! * in float64, on an independent reference implementation of the op.

use clusum::numerics::{Reduction, Tape, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const MIN_COORDS: usize = 100;
pub const F32_TOLERANCE: f64 = 1e-2;
pub const F64_TOLERANCE: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
/// In float32 the floor is at least `F32_FLOOR`, raised to what the
/// difference quotient can resolve: a loss of magnitude `|L|` is only known
/// to about `eps_f32 · |L|`, so the quotient carries absolute noise of
/// roughly `eps_f32 · |L| / STEP`, and a relative tolerance of 1e-2 needs a
/// floor 100 times that.
pub const F32_FLOOR: f64 = 1e-1;
pub const F64_FLOOR: f64 = 1e-3;

type Engine = Box<dyn Fn(&mut Tape<'static>, &[Var]) -> Var>;
type Shadow = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    shapes: Vec<Vec<usize>>,
    engine: Engine,
    shadow: Shadow,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub coords: usize,
    pub max_rel_f32: f64,
    pub max_rel_f64: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.coords >= MIN_COORDS
            && self.max_rel_f32 <= F32_TOLERANCE
            && self.max_rel_f64 <= F64_TOLERANCE
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_inputs(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    shapes
        .iter()
        .map(|s| {
            (0..s.iter().product())
                .map(|_| rng.random_range(-1.5f32..1.5))
                .collect()
        })
        .collect()
}

fn engine_loss(case: &Case, inputs: &[Vec<f32>], weights: &[f32]) -> (f64, Vec<Vec<f32>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(d, s)| tape.variable(Tensor::new(s.clone(), d.clone()).unwrap()))
        .collect();
    let out = (case.engine)(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let r = tape.input(Tensor::new(shape, weights.to_vec()).unwrap());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    let value = f64::from(tape.scalar(loss).unwrap());
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, d)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; d.len()], <[f32]>::to_vec)
        })
        .collect();
    (value, grads)
}

fn shadow_loss(case: &Case, inputs: &[Vec<f64>], weights: &[f32]) -> f64 {
    let out = (case.shadow)(inputs);
    assert_eq!(
        out.len(),
        weights.len(),
        "{}: shadow output length",
        case.name
    );
    out.iter()
        .zip(weights)
        .map(|(y, &r)| y * f64::from(r))
        .sum()
}

pub fn check(case: &Case, seed: u64) -> CaseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = random_inputs(&case.shapes, &mut rng);
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&case.shapes)
            .map(|(d, s)| tape.variable(Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect();
        let out = (case.engine)(&mut tape, &vars);
        tape.value(out).len()
    };
    let weights: Vec<f32> = (0..out_len)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let (base_loss, analytic) = engine_loss(case, &inputs, &weights);
    let f32_floor = F32_FLOOR.max(100.0 * f64::from(f32::EPSILON) * base_loss.abs() / STEP);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j)))
        .collect();
    let picked: Vec<(usize, usize)> = index::sample(
        &mut rng,
        coords.len(),
        coords.len().min(MIN_COORDS.max(coords.len() / 2).min(200)),
    )
    .into_iter()
    .map(|k| coords[k])
    .collect();

    let shadow_inputs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|d| d.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut max_rel_f32 = 0.0f64;
    let mut max_rel_f64 = 0.0f64;
    for &(i, j) in &picked {
        let a = f64::from(analytic[i][j]);

        let mut plus = inputs.clone();
        plus[i][j] += STEP as f32;
        let mut minus = inputs.clone();
        minus[i][j] -= STEP as f32;
        let actual_step = f64::from(plus[i][j]) - f64::from(minus[i][j]);
        let fd32 = (engine_loss(case, &plus, &weights).0 - engine_loss(case, &minus, &weights).0)
            / actual_step;
        max_rel_f32 = max_rel_f32.max(rel(a, fd32, f32_floor));

        let mut plus = shadow_inputs.clone();
        plus[i][j] += STEP;
        let mut minus = shadow_inputs.clone();
        minus[i][j] -= STEP;
        let fd64 = (shadow_loss(case, &plus, &weights) - shadow_loss(case, &minus, &weights))
            / (2.0 * STEP);
        max_rel_f64 = max_rel_f64.max(rel(a, fd64, F64_FLOOR));
    }
    CaseReport {
        name: case.name,
        coords: picked.len(),
        max_rel_f32,
        max_rel_f64,
    }
}

// ---- float64 reference implementations ----

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn tr(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax64(x: &[f64], rows: usize, cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let visible = if causal { r + 1 } else { cols };
        let z: f64 = (0..visible).map(|c| x[r * cols + c].exp()).sum();
        for c in 0..visible {
            out[r * cols + c] = x[r * cols + c].exp() / z;
        }
    }
    out
}

fn layer_norm64(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let w = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        for (c, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * g[c] + b[c]);
        }
    }
    out
}

fn nll64(x: &[f64], targets: &[usize], vocab: usize) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &x[r * vocab..(r + 1) * vocab];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        })
        .collect()
}

pub fn cases() -> Vec<Case> {
    let targets = vec![3usize, 0, 6, 6, 1, 2, 5, 4, 0, 3, 2, 1];
    let gather_ids = vec![4usize, 0, 4, 7, 2, 2, 9, 1];
    let dropout_seed = 1234u64;
    let t_mean = targets.clone();
    let t_sum = targets.clone();
    let g_ids = gather_ids.clone();
    vec![
        Case {
            name: "matmul",
            shapes: vec![vec![8, 12], vec![12, 9]],
            engine: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            shadow: Box::new(|x| mm(&x[0], &x[1], 8, 12, 9)),
        },
        Case {
            name: "transpose",
            shapes: vec![vec![10, 13]],
            engine: Box::new(|t, v| t.transpose(v[0]).unwrap()),
            shadow: Box::new(|x| tr(&x[0], 10, 13)),
        },
        Case {
            name: "add",
            shapes: vec![vec![10, 10], vec![10, 10]],
            engine: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            shadow: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        },
        Case {
            name: "add_row",
            shapes: vec![vec![12, 10], vec![10]],
            engine: Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
            shadow: Box::new(|x| {
                x[0].iter()
                    .enumerate()
                    .map(|(i, a)| a + x[1][i % 10])
                    .collect()
            }),
        },
        Case {
            name: "mul",
            shapes: vec![vec![10, 10], vec![10, 10]],
            engine: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            shadow: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
        },
        Case {
            name: "scale",
            shapes: vec![vec![11, 11]],
            engine: Box::new(|t, v| t.scale(v[0], -0.75)),
            shadow: Box::new(|x| x[0].iter().map(|a| -0.75 * a).collect()),
        },
        Case {
            name: "gelu",
            shapes: vec![vec![12, 12]],
            engine: Box::new(|t, v| t.gelu(v[0])),
            shadow: Box::new(|x| x[0].iter().map(|&a| gelu64(a)).collect()),
        },
        Case {
            name: "softmax",
            shapes: vec![vec![12, 11]],
            engine: Box::new(|t, v| t.softmax(v[0], false).unwrap()),
            shadow: Box::new(|x| softmax64(&x[0], 12, 11, false)),
        },
        Case {
            name: "softmax_causal",
            shapes: vec![vec![14, 14]],
            engine: Box::new(|t, v| t.softmax(v[0], true).unwrap()),
            shadow: Box::new(|x| softmax64(&x[0], 14, 14, true)),
        },
        Case {
            name: "layer_norm",
            shapes: vec![vec![9, 12], vec![12], vec![12]],
            engine: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            shadow: Box::new(|x| layer_norm64(&x[0], &x[1], &x[2], 1e-5)),
        },
        Case {
            name: "gather_rows",
            shapes: vec![vec![10, 12]],
            engine: Box::new(move |t, v| t.gather_rows(v[0], &gather_ids).unwrap()),
            shadow: Box::new(move |x| {
                g_ids
                    .iter()
                    .flat_map(|&i| x[0][i * 12..(i + 1) * 12].to_vec())
                    .collect()
            }),
        },
        Case {
            name: "slice_cols",
            shapes: vec![vec![10, 16]],
            engine: Box::new(|t, v| t.slice_cols(v[0], 4, 8).unwrap()),
            shadow: Box::new(|x| x[0].chunks(16).flat_map(|r| r[4..12].to_vec()).collect()),
        },
        Case {
            name: "concat_cols",
            shapes: vec![vec![9, 5], vec![9, 7]],
            engine: Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
            shadow: Box::new(|x| {
                x[0].chunks(5)
                    .zip(x[1].chunks(7))
                    .flat_map(|(a, b)| a.iter().chain(b).copied().collect::<Vec<_>>())
                    .collect()
            }),
        },
        Case {
            name: "cross_entropy_sum",
            shapes: vec![vec![12, 9]],
            engine: Box::new(move |t, v| t.cross_entropy(v[0], &targets, Reduction::Sum).unwrap()),
            shadow: Box::new(move |x| vec![nll64(&x[0], &t_sum, 9).iter().sum()]),
        },
        Case {
            name: "cross_entropy_mean",
            shapes: vec![vec![12, 9]],
            engine: Box::new({
                let targets = t_mean.clone();
                move |t, v| t.cross_entropy(v[0], &targets, Reduction::Mean).unwrap()
            }),
            shadow: Box::new(move |x| vec![nll64(&x[0], &t_mean, 9).iter().sum::<f64>() / 12.0]),
        },
        Case {
            name: "sum",
            shapes: vec![vec![11, 10]],
            engine: Box::new(|t, v| t.sum(v[0])),
            shadow: Box::new(|x| vec![x[0].iter().sum()]),
        },
        Case {
            name: "dropout",
            shapes: vec![vec![12, 12]],
            engine: Box::new(move |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                t.dropout(v[0], 0.25, &mut rng)
            }),
            shadow: Box::new(move |x| {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                x[0].iter()
                    .map(|&a| {
                        if rng.random::<f32>() < 0.25 {
                            0.0
                        } else {
                            a / 0.75
                        }
                    })
                    .collect()
            }),
        },
        Case {
            name: "attention_composite",
            shapes: vec![vec![7, 8], vec![8, 8], vec![8, 8], vec![8, 8]],
            engine: Box::new(|t, v| {
                let q = t.matmul(v[0], v[1]).unwrap();
                let k = t.matmul(v[0], v[2]).unwrap();
                let val = t.matmul(v[0], v[3]).unwrap();
                let kt = t.transpose(k).unwrap();
                let s = t.matmul(q, kt).unwrap();
                let s = t.scale(s, 1.0 / 8f32.sqrt());
                let p = t.softmax(s, true).unwrap();
                let o = t.matmul(p, val).unwrap();
                t.gelu(o)
            }),
            shadow: Box::new(|x| {
                let q = mm(&x[0], &x[1], 7, 8, 8);
                let k = mm(&x[0], &x[2], 7, 8, 8);
                let v = mm(&x[0], &x[3], 7, 8, 8);
                let s: Vec<f64> = mm(&q, &tr(&k, 7, 8), 7, 8, 7)
                    .into_iter()
                    .map(|a| a / 8f64.sqrt())
                    .collect();
                let p = softmax64(&s, 7, 7, true);
                mm(&p, &v, 7, 7, 8).into_iter().map(gelu64).collect()
            }),
        },
    ]
}

pub fn run_all() -> Vec<CaseReport> {
    cases()
        .iter()
        .enumerate()
        .map(|(i, c)| check(c, 1000 + i as u64))
        .collect()
}
