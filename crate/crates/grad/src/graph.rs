use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::attention::{self, AttnDims};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, NormStats};
use crate::{Error, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    MulSpatial(Var, Var),
    Silu(Var),
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2(Var),
    Concat(Vec<Var>),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: NormStats },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64> },
    Sum(Var),
    MeanAbsDiff(Var, Var),
    BceWithLogits { logits: Var, target: Var },
    SoftDice { logits: Var, target: Var, smooth: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Every op appends a node; [`Graph::backward`] walks
/// the tape in reverse.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let val = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let der = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (val, der)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A graph for inference: nothing requires grad, `backward` is an error.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, &va, &vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, op, self.rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), self.rg(&[a]))
    }

    /// `x`: [C, ...] plus `b`: [C] broadcast over trailing axes.
    pub fn add_channel(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.shape()[0];
        if vb.len() != c {
            return Err(Error::Shape(format!("add_channel: {} channels vs bias {:?}", c, vb.shape())));
        }
        let per = vx.len() / c;
        let mut out = (*vx).clone();
        for (ch, bias) in out.data_mut().chunks_exact_mut(per).zip(vb.data()) {
            ch.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(out, Op::AddChannel(x, b), self.rg(&[x, b])))
    }

    /// `x`: [C, S...] times `g`: [S...] broadcast over channels.
    pub fn mul_spatial(&self, x: Var, g: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(g));
        if vx.shape()[1..] != *vg.shape() {
            return Err(Error::Shape(format!("mul_spatial: {:?} vs gate {:?}", vx.shape(), vg.shape())));
        }
        let per = vg.len();
        let mut out = (*vx).clone();
        for ch in out.data_mut().chunks_exact_mut(per) {
            ch.iter_mut().zip(vg.data()).for_each(|(v, s)| *v *= s);
        }
        Ok(self.push(out, Op::MulSpatial(x, g), self.rg(&[x, g])))
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), self.rg(&[x]))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x), self.rg(&[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.rg(&[x])))
    }

    /// Transpose of a 2D [a, b] tensor.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let &[a, b] = vx.shape() else {
            return Err(Error::Shape(format!("transpose expects 2D, got {:?}", vx.shape())));
        };
        let out = Tensor::new(&[b, a], transpose_data(vx.data(), a, b))?;
        Ok(self.push(out, Op::Transpose(x), self.rg(&[x])))
    }

    /// `x`: [Cin, D, H, W], `w`: [Cout, Cin, k, k, k], `b`: [Cout].
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::Shape(format!("conv3d: input {xs:?} weight {ws:?}")));
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            input: [xs[1], xs[2], xs[3]],
            kernel: ws[2],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::Shape(format!("conv3d: kernel {} too large for input {xs:?}", ws[2])));
        }
        let vb = b.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.len() != geom.cout {
                return Err(Error::Shape(format!("conv3d: bias {:?} for {} outputs", vb.shape(), geom.cout)));
            }
        }
        let y = conv::forward(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), &geom);
        let [od, oh, ow] = geom.output();
        let out = Tensor::new(&[geom.cout, od, oh, ow], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }, self.rg(&deps)))
    }

    /// Nearest-neighbour ×2 upsampling of [C, D, H, W].
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let &[c, d, h, w] = vx.shape() else {
            return Err(Error::Shape(format!("upsample2 expects 4D, got {:?}", vx.shape())));
        };
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let src = vx.data();
        let mut out = vec![0.0; c * d2 * h2 * w2];
        for ch in 0..c {
            for z in 0..d2 {
                for y in 0..h2 {
                    let srow = ((ch * d + z / 2) * h + y / 2) * w;
                    let drow = ((ch * d2 + z) * h2 + y) * w2;
                    for xx in 0..w2 {
                        out[drow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
        let out = Tensor::new(&[c, d2, h2, w2], out)?;
        Ok(self.push(out, Op::Upsample2(x), self.rg(&[x])))
    }

    /// Concatenate along axis 0; trailing shapes must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &vals {
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!("concat: {:?} vs trailing {:?}", v.shape(), tail)));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), self.rg(parts)))
    }

    /// Group normalization over [C, ...] with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.shape()[0];
        if groups == 0 || c % groups != 0 || vg.len() != c || vb.len() != c {
            return Err(Error::Shape(format!("group_norm: {c} channels, {groups} groups, gamma {:?}", vg.shape())));
        }
        let (y, stats) = norm::group_norm_forward(vx.data(), c, groups, vg.data(), vb.data(), eps);
        let out = Tensor::new(vx.shape(), y)?;
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, self.rg(&[x, gamma, beta])))
    }

    /// Layer normalization of each row of [N, d].
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let &[_, d] = vx.shape() else {
            return Err(Error::Shape(format!("layer_norm expects 2D, got {:?}", vx.shape())));
        };
        if vg.len() != d || vb.len() != d {
            return Err(Error::Shape(format!("layer_norm: width {d}, gamma {:?}", vg.shape())));
        }
        let (y, stats) = norm::layer_norm_forward(vx.data(), d, vg.data(), vb.data(), eps);
        let out = Tensor::new(vx.shape(), y)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, self.rg(&[x, gamma, beta])))
    }

    /// `x`: [N, in], `w`: [out, in], `b`: [out] → [N, out].
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (&[n, fin], &[fout, win]) = (vx.shape(), vw.shape()) else {
            return Err(Error::Shape(format!("linear: input {:?} weight {:?}", vx.shape(), vw.shape())));
        };
        if fin != win {
            return Err(Error::Shape(format!("linear: input width {fin} vs weight {:?}", vw.shape())));
        }
        let mut y = vec![0.0; n * fout];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != fout {
                return Err(Error::Shape(format!("linear: bias {:?} for {fout} outputs", vb.shape())));
            }
            for row in y.chunks_exact_mut(fout) {
                row.copy_from_slice(vb.data());
            }
        }
        crate::kernels::gemm(n, fin, fout, 1.0, vx.data(), fin, 1, vw.data(), 1, fin, 1.0, &mut y, fout, 1);
        let out = Tensor::new(&[n, fout], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, self.rg(&deps)))
    }

    /// Multi-head attention. `q`: [N, d], `k`: [M, d], `v`: [M, dv].
    ///
    /// `key_mask[j] == false` removes key `j`; `query_mask[i] == false`
    /// zeroes output row `i`.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
        query_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (&[n, d], &[m, dk], &[mv, dv]) = (vq.shape(), vk.shape(), vv.shape()) else {
            return Err(Error::Shape("attention expects 2D q, k, v".into()));
        };
        if d != dk || m != mv || heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: q {:?} k {:?} v {:?} heads {heads}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        if key_mask.is_some_and(|km| km.len() != m) || query_mask.is_some_and(|qm| qm.len() != n) {
            return Err(Error::Shape("attention: mask length mismatch".into()));
        }
        let dims = AttnDims { queries: n, keys: m, dim: d, value_dim: dv, heads };
        let (y, probs) = attention::forward(vq.data(), vk.data(), vv.data(), &dims, key_mask, query_mask);
        let out = Tensor::new(&[n, dv], y)?;
        let rg = self.rg(&[q, k, v]);
        let probs = if rg && self.record { probs } else { Vec::new() };
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, rg))
    }

    /// Sum of all elements; a scalar of shape [1].
    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), self.rg(&[x]))
    }

    /// Mean of |a − b| over all elements; a scalar of shape [1].
    pub fn mean_abs_diff(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mean_abs_diff", &va, &vb)?;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        Ok(self.push(out, Op::MeanAbsDiff(a, b), self.rg(&[a, b])))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against {0,1} `target`.
    pub fn bce_with_logits(&self, logits: Var, target: Var) -> Result<Var> {
        let (vl, vt) = (self.value(logits), self.value(target));
        same_shape("bce_with_logits", &vl, &vt)?;
        let s: f64 = vl
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(s / vl.len() as f64);
        Ok(self.push(out, Op::BceWithLogits { logits, target }, self.rg(&[logits])))
    }

    /// Soft Dice loss `1 − (2Σpt + s)/(Σp + Σt + s)` with `p = sigmoid(logits)`.
    pub fn soft_dice(&self, logits: Var, target: Var, smooth: f64) -> Result<Var> {
        let (vl, vt) = (self.value(logits), self.value(target));
        same_shape("soft_dice", &vl, &vt)?;
        let (mut inter, mut total) = (0.0, 0.0);
        for (&x, &t) in vl.data().iter().zip(vt.data()) {
            let p = sigmoid(x);
            inter += p * t;
            total += p + t;
        }
        let out = Tensor::scalar(1.0 - (2.0 * inter + smooth) / (total + smooth));
        Ok(self.push(out, Op::SoftDice { logits, target, smooth }, self.rg(&[logits])))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::NoGrad);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", nodes[loss.0].value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let val = |v: Var| nodes[v.0].value.clone();
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let mut send = |v: Var, g: Tensor| {
                if nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            };
            let shaped = |v: Var, data: Vec<f64>| Tensor::new(nodes[v.0].value.shape(), data);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, gout.clone());
                    send(*b, gout);
                }
                Op::Sub(a, b) => {
                    send(*b, gout.map(|v| -v));
                    send(*a, gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga: Vec<f64> = gout.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gout.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    send(*a, shaped(*a, ga)?);
                    send(*b, shaped(*b, gb)?);
                }
                Op::Scale(a, s) => send(*a, gout.map(|v| v * s)),
                Op::AddChannel(x, b) => {
                    let c = gout.shape()[0];
                    let per = gout.len() / c;
                    let gb: Vec<f64> = gout.data().chunks_exact(per).map(|ch| ch.iter().sum()).collect();
                    send(*b, shaped(*b, gb)?);
                    send(*x, gout);
                }
                Op::MulSpatial(x, g) => {
                    let (vx, vg) = (val(*x), val(*g));
                    let per = vg.len();
                    let mut gx = gout.clone();
                    for ch in gx.data_mut().chunks_exact_mut(per) {
                        ch.iter_mut().zip(vg.data()).for_each(|(v, s)| *v *= s);
                    }
                    let mut gg = vec![0.0; per];
                    for (gch, xch) in gout.data().chunks_exact(per).zip(vx.data().chunks_exact(per)) {
                        for ((acc, a), b) in gg.iter_mut().zip(gch).zip(xch) {
                            *acc += a * b;
                        }
                    }
                    send(*g, shaped(*g, gg)?);
                    send(*x, gx);
                }
                Op::Silu(x) => {
                    let vx = val(*x);
                    let d: Vec<f64> = gout
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    send(*x, shaped(*x, d)?);
                }
                Op::Gelu(x) => {
                    let vx = val(*x);
                    let d: Vec<f64> = gout.data().iter().zip(vx.data()).map(|(g, &v)| g * gelu_parts(v).1).collect();
                    send(*x, shaped(*x, d)?);
                }
                Op::Reshape(x) => send(*x, gout.reshape(nodes[x.0].value.shape())?),
                Op::Transpose(x) => {
                    let s = gout.shape().to_vec();
                    send(*x, shaped(*x, transpose_data(gout.data(), s[0], s[1]))?);
                }
                Op::Conv3d { x, w, b, geom } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let need_x = nodes[x.0].requires_grad;
                    let cg = conv::backward(vx.data(), vw.data(), gout.data(), geom, need_x);
                    if let Some(dx) = cg.input {
                        send(*x, shaped(*x, dx)?);
                    }
                    send(*w, shaped(*w, cg.weight)?);
                    if let Some(b) = b {
                        send(*b, shaped(*b, cg.bias)?);
                    }
                }
                Op::Upsample2(x) => {
                    let s = nodes[x.0].value.shape().to_vec();
                    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
                    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
                    let mut gx = vec![0.0; c * d * h * w];
                    let g = gout.data();
                    for ch in 0..c {
                        for z in 0..d2 {
                            for y in 0..h2 {
                                let drow = ((ch * d + z / 2) * h + y / 2) * w;
                                let srow = ((ch * d2 + z) * h2 + y) * w2;
                                for xx in 0..w2 {
                                    gx[drow + xx / 2] += g[srow + xx];
                                }
                            }
                        }
                    }
                    send(*x, shaped(*x, gx)?);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        let piece = gout.data()[off..off + n].to_vec();
                        off += n;
                        send(*p, shaped(*p, piece)?);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (vx, vg) = (val(*x), val(*gamma));
                    let c = vx.shape()[0];
                    let r = norm::group_norm_backward(vx.data(), c, *groups, vg.data(), stats, gout.data());
                    send(*x, shaped(*x, r.input)?);
                    send(*gamma, shaped(*gamma, r.gamma)?);
                    send(*beta, shaped(*beta, r.beta)?);
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (vx, vg) = (val(*x), val(*gamma));
                    let d = vx.shape()[1];
                    let r = norm::layer_norm_backward(vx.data(), d, vg.data(), stats, gout.data());
                    send(*x, shaped(*x, r.input)?);
                    send(*gamma, shaped(*gamma, r.gamma)?);
                    send(*beta, shaped(*beta, r.beta)?);
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (n, fin) = (vx.shape()[0], vx.shape()[1]);
                    let fout = vw.shape()[0];
                    let g = gout.data();
                    if nodes[x.0].requires_grad {
                        let mut gx = vec![0.0; n * fin];
                        crate::kernels::gemm(n, fout, fin, 1.0, g, fout, 1, vw.data(), fin, 1, 0.0, &mut gx, fin, 1);
                        send(*x, shaped(*x, gx)?);
                    }
                    let mut gw = vec![0.0; fout * fin];
                    crate::kernels::gemm(fout, n, fin, 1.0, g, 1, fout, vx.data(), fin, 1, 0.0, &mut gw, fin, 1);
                    send(*w, shaped(*w, gw)?);
                    if let Some(b) = b {
                        let mut gb = vec![0.0; fout];
                        for row in g.chunks_exact(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        send(*b, shaped(*b, gb)?);
                    }
                }
                Op::Attention { q, k, v, dims, probs } => {
                    let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                    let r = attention::backward(vq.data(), vk.data(), vv.data(), probs, gout.data(), dims);
                    send(*q, shaped(*q, r.q)?);
                    send(*k, shaped(*k, r.k)?);
                    send(*v, shaped(*v, r.v)?);
                }
                Op::Sum(x) => {
                    let g = gout.item();
                    send(*x, Tensor::full(nodes[x.0].value.shape(), g));
                }
                Op::MeanAbsDiff(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let scale = gout.item() / va.len() as f64;
                    let ga: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| scale * sign(x - y))
                        .collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    send(*a, shaped(*a, ga)?);
                    send(*b, shaped(*b, gb)?);
                }
                Op::BceWithLogits { logits, target } => {
                    let (vl, vt) = (val(*logits), val(*target));
                    let scale = gout.item() / vl.len() as f64;
                    let g: Vec<f64> = vl.data().iter().zip(vt.data()).map(|(&x, &t)| scale * (sigmoid(x) - t)).collect();
                    send(*logits, shaped(*logits, g)?);
                }
                Op::SoftDice { logits, target, smooth } => {
                    let (vl, vt) = (val(*logits), val(*target));
                    let (mut inter, mut total) = (0.0, 0.0);
                    for (&x, &t) in vl.data().iter().zip(vt.data()) {
                        let p = sigmoid(x);
                        inter += p * t;
                        total += p + t;
                    }
                    let num = 2.0 * inter + smooth;
                    let den = total + smooth;
                    let go = gout.item();
                    let g: Vec<f64> = vl
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(&x, &t)| {
                            let p = sigmoid(x);
                            let dl_dp = -(2.0 * t * den - num) / (den * den);
                            go * dl_dp * p * (1.0 - p)
                        })
                        .collect();
                    send(*logits, shaped(*logits, g)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose_data(src: &[f64], a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; a * b];
    for i in 0..a {
        for j in 0..b {
            out[j * a + i] = src[i * b + j];
        }
    }
    out
}
