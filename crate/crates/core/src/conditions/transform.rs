//! Sampling-time perturbation of the lymph-node condition.
//!
//! Every node is transformed on its own. Candidates that touch an organ,
//! leave the patch, fragment, or touch another node are redrawn; after
//! `max_attempts` failures the original node is kept.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::anatomy::ConditionStack;
use crate::components::{label, Connectivity};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    /// Per-axis rotation range, degrees (±).
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-axis translation range, voxels (±).
    pub translation_vox: f64,
    /// Chance of an elastic instead of affine deformation.
    pub elastic_prob: f64,
    pub elastic_sigma: f64,
    pub elastic_max_disp: f64,
    /// Chance of deleting one node when there are several.
    pub remove_prob: f64,
    pub max_attempts: usize,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            scale_min: 0.8,
            scale_max: 1.2,
            translation_vox: 3.0,
            elastic_prob: 0.5,
            elastic_sigma: 4.0,
            elastic_max_disp: 2.0,
            remove_prob: 0.5,
            max_attempts: 10,
        }
    }
}

impl TransformParams {
    /// Ranges under which every transform is the identity.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_vox: 0.0,
            elastic_max_disp: 0.0,
            remove_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.rotation_deg >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.translation_vox >= 0.0
            && prob(self.elastic_prob)
            && prob(self.remove_prob)
            && self.elastic_sigma > 0.0
            && self.elastic_max_disp >= 0.0
            && self.max_attempts >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid transform ranges: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOutcome {
    Transformed { attempts: usize },
    /// Every attempt was rejected; the node is unchanged.
    KeptOriginal,
    Removed,
}

#[derive(Debug, Clone)]
pub struct TransformReport {
    pub outcomes: Vec<NodeOutcome>,
}

impl TransformReport {
    pub fn fallbacks(&self) -> usize {
        self.outcomes.iter().filter(|o| **o == NodeOutcome::KeptOriginal).count()
    }

    pub fn removed(&self) -> bool {
        self.outcomes.contains(&NodeOutcome::Removed)
    }
}

/// Inverse coordinate map from the output grid into the node's source frame.
enum Warp {
    Affine { centre: [f64; 3], inv: [[f64; 3]; 3], shift: [f64; 3] },
    Elastic { lo: [isize; 3], dims: [usize; 3], field: [Vec<f64>; 3] },
}

impl Warp {
    fn source(&self, p: [isize; 3]) -> [f64; 3] {
        let pf = p.map(|v| v as f64);
        match self {
            Warp::Affine { centre, inv, shift } => {
                let d: [f64; 3] = std::array::from_fn(|a| pf[a] - centre[a] - shift[a]);
                std::array::from_fn(|a| centre[a] + inv[a][0] * d[0] + inv[a][1] * d[1] + inv[a][2] * d[2])
            }
            Warp::Elastic { lo, dims, field } => {
                let q: [usize; 3] = std::array::from_fn(|a| (p[a] - lo[a]) as usize);
                let i = (q[0] * dims[1] + q[1]) * dims[2] + q[2];
                std::array::from_fn(|a| pf[a] + field[a][i])
            }
        }
    }
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles;
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul(&matmul(&rz, &ry), &rx)
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn uniform_sym(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r == 0.0 { 0.0 } else { rng.random_range(-r..=r) }
}

/// In-place separable Gaussian blur with edge clamping.
fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
        for u in 0..dims[others[0]] {
            for v in 0..dims[others[1]] {
                let base = u * strides[others[0]] + v * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| data[base + i * strides[axis]]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let j = (i as isize + k as isize - radius).clamp(0, n as isize - 1) as usize;
                        acc += w * line[j];
                    }
                    data[base + i * strides[axis]] = acc / norm;
                }
            }
        }
    }
}

struct Node {
    voxels: Vec<[isize; 3]>,
    centre: [f64; 3],
    radius: f64,
}

impl Node {
    fn new(voxels: Vec<[isize; 3]>) -> Self {
        let n = voxels.len() as f64;
        let centre = std::array::from_fn(|a| voxels.iter().map(|v| v[a] as f64).sum::<f64>() / n);
        let radius = voxels
            .iter()
            .map(|v| (0..3).map(|a| (v[a] as f64 - centre[a]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Self { voxels, centre, radius }
    }

    /// Output region large enough to contain any permitted warp of the node.
    fn render_box(&self, p: &TransformParams) -> ([isize; 3], [usize; 3]) {
        let reach = self.radius * p.scale_max.max(1.0) + p.translation_vox * 3f64.sqrt() + p.elastic_max_disp + 2.0;
        let lo: [isize; 3] = std::array::from_fn(|a| (self.centre[a] - reach).floor() as isize);
        let dims = std::array::from_fn(|a| ((self.centre[a] + reach).ceil() as isize - lo[a] + 1) as usize);
        (lo, dims)
    }
}

fn draw_warp(node: &Node, lo: [isize; 3], dims: [usize; 3], p: &TransformParams, rng: &mut ChaCha8Rng) -> Warp {
    if rng.random_bool(p.elastic_prob) {
        let n: usize = dims.iter().product();
        let field = std::array::from_fn(|_| {
            let mut f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            gaussian_blur(&mut f, dims, p.elastic_sigma);
            f
        });
        let peak = field.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > 0.0 { p.elastic_max_disp / peak } else { 0.0 };
        let field = field.map(|f| f.into_iter().map(|v| v * gain).collect());
        Warp::Elastic { lo, dims, field }
    } else {
        let angles = std::array::from_fn(|_| uniform_sym(rng, p.rotation_deg).to_radians());
        let scale = if p.scale_min == p.scale_max { p.scale_min } else { rng.random_range(p.scale_min..=p.scale_max) };
        let shift = std::array::from_fn(|_| uniform_sym(rng, p.translation_vox));
        let r = rotation(angles);
        // inverse of (scale · R) is Rᵀ / scale
        let inv = std::array::from_fn(|i| std::array::from_fn(|j| r[j][i] / scale));
        Warp::Affine { centre: node.centre, inv, shift }
    }
}

/// Renders the warped node by pulling each output voxel back to the source
/// and testing membership at the nearest source voxel.
fn render(node_mask: &[bool], shape: [usize; 3], lo: [isize; 3], dims: [usize; 3], warp: &Warp) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [lo[0] + z as isize, lo[1] + y as isize, lo[2] + x as isize];
                let s = warp.source(p);
                let q = s.map(|v| (v + 0.5).floor() as isize);
                if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < shape[a])
                    && node_mask[(q[0] as usize * shape[1] + q[1] as usize) * shape[2] + q[2] as usize]
                {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// True when `v` or any of its 26 neighbours is set in `occupied`.
fn touches(occupied: &[bool], shape: [usize; 3], v: [usize; 3]) -> bool {
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let q = [v[0] as isize + dz, v[1] as isize + dy, v[2] as isize + dx];
                if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < shape[a])
                    && occupied[(q[0] as usize * shape[1] + q[1] as usize) * shape[2] + q[2] as usize]
                {
                    return true;
                }
            }
        }
    }
    false
}

pub fn transform_condition(stack: &ConditionStack, seed: u64, params: &TransformParams) -> Result<(ConditionStack, TransformReport)> {
    params.validate()?;
    let shape = stack.shape();
    let mask: Vec<bool> = stack.ln_mask().iter().map(|v| *v != 0).collect();
    let comps = label(&mask, shape, Connectivity::TwentySix);
    if comps.count == 0 {
        return Err(Error::Data("lymph-node mask is empty; nothing to transform".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = |p: [usize; 3]| (p[0] * shape[1] + p[1]) * shape[2] + p[2];
    let coords = |i: usize| [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
    let removed = (comps.count >= 2 && rng.random_bool(params.remove_prob))
        .then(|| *(1..=comps.count as u32).collect::<Vec<_>>().choose(&mut rng).unwrap());

    let organs = stack.organ_occupancy();
    let mut placed = vec![false; mask.len()];
    // originals still waiting to be processed
    let mut pending: Vec<bool> = comps.labels.iter().map(|l| *l != 0 && Some(*l) != removed).collect();
    let mut outcomes = Vec::with_capacity(comps.count);

    for k in 1..=comps.count as u32 {
        if Some(k) == removed {
            outcomes.push(NodeOutcome::Removed);
            continue;
        }
        let own = comps.mask(k);
        for (p, o) in pending.iter_mut().zip(&own) {
            if *o {
                *p = false;
            }
        }
        let node = Node::new(comps.voxels(k).into_iter().map(|i| coords(i).map(|c| c as isize)).collect());
        let (lo, dims) = node.render_box(params);
        let mut accepted = None;
        for attempt in 1..=params.max_attempts {
            let warp = draw_warp(&node, lo, dims, params, &mut rng);
            let cand = render(&own, shape, lo, dims, &warp);
            if cand.is_empty() || cand.iter().any(|p| (0..3).any(|a| p[a] < 0 || p[a] as usize >= shape[a])) {
                continue;
            }
            let cand: Vec<[usize; 3]> = cand.into_iter().map(|p| p.map(|c| c as usize)).collect();
            if cand.iter().any(|p| organs[idx(*p)]) {
                continue;
            }
            if cand.iter().any(|p| touches(&placed, shape, *p) || touches(&pending, shape, *p)) {
                continue;
            }
            let mut cmask = vec![false; mask.len()];
            for p in &cand {
                cmask[idx(*p)] = true;
            }
            if label(&cmask, shape, Connectivity::TwentySix).count != 1 {
                continue;
            }
            accepted = Some((cand, attempt));
            break;
        }
        match accepted {
            Some((cand, attempts)) => {
                for p in cand {
                    placed[idx(p)] = true;
                }
                outcomes.push(NodeOutcome::Transformed { attempts });
            }
            None => {
                for v in node.voxels {
                    placed[idx(v.map(|c| c as usize))] = true;
                }
                outcomes.push(NodeOutcome::KeptOriginal);
            }
        }
    }
    let out = stack.with_ln_mask(placed.iter().map(|v| *v as u8).collect())?;
    Ok((out, TransformReport { outcomes }))
}
