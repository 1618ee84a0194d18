//! Multi-head scaled dot-product attention with optional position masks.

use super::gemm;

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub queries: usize,
    pub keys: usize,
    pub dim: usize,
    pub value_dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
    fn head_value_dim(&self) -> usize {
        self.value_dim / self.heads
    }
}

/// Returns `(out [N, value_dim], probs [heads, N, M])`.
///
/// A masked-out key receives zero weight. A query with no admissible key
/// (or masked itself) produces a zero output row.
pub fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &AttnDims,
    key_mask: Option<&[bool]>,
    query_mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims { queries: n, keys: m, dim, value_dim, heads } = *dims;
    let dh = dims.head_dim();
    let dv = dims.head_value_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * n * m];
    let mut out = vec![0.0; n * value_dim];
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        gemm(n, dh, m, scale, &q[h * dh..], dim, 1, &k[h * dh..], 1, dim, 0.0, p, m, 1);
        for (i, row) in p.chunks_exact_mut(m).enumerate() {
            if query_mask.is_some_and(|qm| !qm[i]) {
                row.fill(0.0);
                continue;
            }
            match key_mask {
                None => softmax_row(row),
                Some(km) => {
                    for (s, keep) in row.iter_mut().zip(km) {
                        if !keep {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    softmax_row(row);
                }
            }
        }
        gemm(n, m, dv, 1.0, p, m, 1, &v[h * dv..], value_dim, 1, 0.0, &mut out[h * dv..], value_dim, 1);
    }
    (out, probs)
}

/// In-place softmax; `-inf` entries get zero weight and an all-`-inf`
/// row becomes all zeros.
fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for s in row.iter_mut() {
        *s = (*s - mx).exp();
        total += *s;
    }
    let inv = 1.0 / total;
    for s in row.iter_mut() {
        *s *= inv;
    }
}

pub struct AttnGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn backward(q: &[f64], k: &[f64], v: &[f64], probs: &[f64], dout: &[f64], dims: &AttnDims) -> AttnGrads {
    let AttnDims { queries: n, keys: m, dim, value_dim, heads } = *dims;
    let dh = dims.head_dim();
    let dv = dims.head_value_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dvv = vec![0.0; v.len()];
    let mut dp = vec![0.0; n * m];
    for h in 0..heads {
        let p = &probs[h * n * m..(h + 1) * n * m];
        // dV = Pᵀ dO ; dP = dO Vᵀ
        gemm(m, n, dv, 1.0, p, 1, m, &dout[h * dv..], value_dim, 1, 0.0, &mut dvv[h * dv..], value_dim, 1);
        gemm(n, dv, m, 1.0, &dout[h * dv..], value_dim, 1, &v[h * dv..], 1, value_dim, 0.0, &mut dp, m, 1);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (prow, drow) in p.chunks_exact(m).zip(dp.chunks_exact_mut(m)) {
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (d, pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - dot);
            }
        }
        gemm(n, m, dh, scale, &dp, m, 1, &k[h * dh..], dim, 1, 0.0, &mut dq[h * dh..], dim, 1);
        gemm(m, n, dh, scale, &dp, 1, m, &q[h * dh..], dim, 1, 0.0, &mut dk[h * dh..], dim, 1);
    }
    AttnGrads { q: dq, k: dk, v: dvv }
}
