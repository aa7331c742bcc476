//! Slice-level forward and backward kernels shared by the eager `Tensor`
//! operations and the recording tape. Reductions accumulate in f64.

/// sqrt(2 / pi), the tanh-approximation constant of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = f64::from(a_ip);
            let b_row = &b[p * n..(p + 1) * n];
            for (slot, &b_pj) in acc.iter_mut().zip(b_row) {
                *slot += a_ip * f64::from(b_pj);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row) as f32;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let a_pi = f64::from(a_pi);
            for (slot, &b_pj) in acc[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *slot += a_pi * f64::from(b_pj);
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax of a `rows×cols` matrix. With `causal`, entry `(i, j)`
/// for `j > i` is excluded and receives probability zero.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize, causal: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let width = if causal { (r + 1).min(cols) } else { cols };
        let row = &x[r * cols..r * cols + width];
        softmax_into(row, &mut out[r * cols..r * cols + width]);
    }
    out
}

/// Softmax of one slice into `out` (same length).
pub fn softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = f64::from(v - max).exp();
        *o = e as f32;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = (f64::from(*o) / denom) as f32;
    }
}

/// Given softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &[f32], dy: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let inner = dot(yr, dyr);
        for ((d, &yi), &dyi) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(dyr) {
            *d = (f64::from(yi) * (f64::from(dyi) - inner)) as f32;
        }
    }
    dx
}

/// Per-row statistics retained for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    rows: usize,
    width: usize,
    eps: f64,
) -> (Vec<f32>, NormStats) {
    let mut out = vec![0.0f32; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / width as f64;
        let var = row
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / width as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (c, o) in out[r * width..(r + 1) * width].iter_mut().enumerate() {
            let xhat = (f64::from(row[c]) - mean) * rstd;
            *o = (xhat * f64::from(gain[c]) + f64::from(bias[c])) as f32;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    x: &[f32],
    gain: &[f32],
    stats: &NormStats,
    dy: &[f32],
    rows: usize,
    width: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; x.len()];
    let mut dgain = vec![0.0f64; width];
    let mut dbias = vec![0.0f64; width];
    let mut xhat = vec![0.0f64; width];
    let mut dxhat = vec![0.0f64; width];
    for r in 0..rows {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..width {
            let i = r * width + c;
            xhat[c] = (f64::from(x[i]) - mean) * rstd;
            let g = f64::from(dy[i]);
            dgain[c] += g * xhat[c];
            dbias[c] += g;
            dxhat[c] = g * f64::from(gain[c]);
            sum_dxhat += dxhat[c];
            sum_dxhat_xhat += dxhat[c] * xhat[c];
        }
        let n = width as f64;
        for c in 0..width {
            dx[r * width + c] =
                (rstd / n * (n * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat)) as f32;
        }
    }
    (
        dx,
        dgain.into_iter().map(|v| v as f32).collect(),
        dbias.into_iter().map(|v| v as f32).collect(),
    )
}

/// GELU, tanh approximation:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

pub fn gelu_grad(x: f32) -> f32 {
    let x = f64::from(x);
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

/// Negative log-likelihood of `targets` under row-wise softmax of `logits`.
/// Returns the per-row losses and the softmax probabilities.
pub fn cross_entropy_rows(logits: &[f32], targets: &[usize], vocab: usize) -> (Vec<f64>, Vec<f32>) {
    let rows = targets.len();
    let mut probs = vec![0.0f32; logits.len()];
    let mut losses = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let denom: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
        let log_denom = denom.ln();
        for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = (f64::from(v - max).exp() / denom) as f32;
        }
        losses.push(log_denom - f64::from(row[t] - max));
    }
    (losses, probs)
}
