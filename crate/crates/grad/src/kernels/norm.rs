//! Group and layer normalization.

/// Per-segment statistics kept from the forward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn segment_stats(x: &[f64], seg: usize, eps: f64) -> NormStats {
    let count = x.len() / seg;
    let mut mean = Vec::with_capacity(count);
    let mut inv_std = Vec::with_capacity(count);
    for s in x.chunks_exact(seg) {
        let m = s.iter().sum::<f64>() / seg as f64;
        let var = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / seg as f64;
        mean.push(m);
        inv_std.push(1.0 / (var + eps).sqrt());
    }
    NormStats { mean, inv_std }
}

/// `x`: [C, S] flattened, channels split into `groups` contiguous groups.
pub fn group_norm_forward(
    x: &[f64],
    channels: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let spatial = x.len() / channels;
    let seg = channels / groups * spatial;
    let stats = segment_stats(x, seg, eps);
    let mut y = vec![0.0; x.len()];
    for c in 0..channels {
        let gi = c * spatial / seg;
        let (m, is) = (stats.mean[gi], stats.inv_std[gi]);
        let r = c * spatial..(c + 1) * spatial;
        for (o, v) in y[r.clone()].iter_mut().zip(&x[r]) {
            *o = (v - m) * is * gamma[c] + beta[c];
        }
    }
    (y, stats)
}

pub struct AffineNormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn group_norm_backward(
    x: &[f64],
    channels: usize,
    groups: usize,
    gamma: &[f64],
    stats: &NormStats,
    dy: &[f64],
) -> AffineNormGrads {
    let spatial = x.len() / channels;
    let per_group = channels / groups;
    let seg = per_group * spatial;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let mut dx = vec![0.0; x.len()];
    for g in 0..groups {
        let (m, is) = (stats.mean[g], stats.inv_std[g]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in g * per_group..(g + 1) * per_group {
            let r = c * spatial..(c + 1) * spatial;
            for (v, d) in x[r.clone()].iter().zip(&dy[r]) {
                let xhat = (v - m) * is;
                dgamma[c] += d * xhat;
                dbeta[c] += d;
                let dxhat = d * gamma[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        let n = seg as f64;
        for c in g * per_group..(g + 1) * per_group {
            let r = c * spatial..(c + 1) * spatial;
            for ((o, v), d) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&dy[r]) {
                let xhat = (v - m) * is;
                *o = is / n * (n * d * gamma[c] - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    AffineNormGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// `x`: [N, d] flattened, normalized per row.
pub fn layer_norm_forward(x: &[f64], dim: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, NormStats) {
    let stats = segment_stats(x, dim, eps);
    let mut y = vec![0.0; x.len()];
    for (r, (row, out)) in x.chunks_exact(dim).zip(y.chunks_exact_mut(dim)).enumerate() {
        let (m, is) = (stats.mean[r], stats.inv_std[r]);
        for j in 0..dim {
            out[j] = (row[j] - m) * is * gamma[j] + beta[j];
        }
    }
    (y, stats)
}

pub fn layer_norm_backward(x: &[f64], dim: usize, gamma: &[f64], stats: &NormStats, dy: &[f64]) -> AffineNormGrads {
    let mut dgamma = vec![0.0; dim];
    let mut dbeta = vec![0.0; dim];
    let mut dx = vec![0.0; x.len()];
    let n = dim as f64;
    for (r, ((row, drow), out)) in x.chunks_exact(dim).zip(dy.chunks_exact(dim)).zip(dx.chunks_exact_mut(dim)).enumerate() {
        let (m, is) = (stats.mean[r], stats.inv_std[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..dim {
            let xhat = (row[j] - m) * is;
            dgamma[j] += drow[j] * xhat;
            dbeta[j] += drow[j];
            let dxhat = drow[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..dim {
            let xhat = (row[j] - m) * is;
            out[j] = is / n * (n * drow[j] * gamma[j] - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    AffineNormGrads { input: dx, gamma: dgamma, beta: dbeta }
}
