//! Network building blocks. Each block declares its parameters by name and
//! runs forward against parameters bound into a graph.

use lnsynth_grad::{Bound, Tensor, Var};

use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// `U(−b, b)`
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) type Specs = Vec<ParamSpec>;

fn spec(specs: &mut Specs, name: String, shape: &[usize], init: Init) {
    specs.push(ParamSpec { name, shape: shape.to_vec(), init });
}

fn shape_err(stage: &str) -> impl Fn(lnsynth_grad::Error) -> Error + '_ {
    Error::at(stage)
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, zero_init: false }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn declare(&self, specs: &mut Specs) {
        let k = self.kernel;
        let bound = 1.0 / ((self.cin * k * k * k) as f64).sqrt();
        let init = if self.zero_init { Init::Zeros } else { Init::Uniform(bound) };
        spec(specs, format!("{}.weight", self.name), &[self.cout, self.cin, k, k, k], init);
        spec(specs, format!("{}.bias", self.name), &[self.cout], init);
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        p.graph().conv3d(x, w, Some(b), self.stride, self.kernel / 2).map_err(shape_err(&self.name))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize, bias: bool) -> Self {
        Self { name: name.into(), fin, fout, bias }
    }

    pub fn declare(&self, specs: &mut Specs) {
        let bound = 1.0 / (self.fin as f64).sqrt();
        spec(specs, format!("{}.weight", self.name), &[self.fout, self.fin], Init::Uniform(bound));
        if self.bias {
            spec(specs, format!("{}.bias", self.name), &[self.fout], Init::Uniform(bound));
        }
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(p.get(&format!("{}.bias", self.name))?) } else { None };
        p.graph().linear(x, w, b).map_err(shape_err(&self.name))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        Self { name: name.into(), channels, groups }
    }

    pub fn declare(&self, specs: &mut Specs) {
        spec(specs, format!("{}.gamma", self.name), &[self.channels], Init::Ones);
        spec(specs, format!("{}.beta", self.name), &[self.channels], Init::Zeros);
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Result<Var> {
        let g = p.get(&format!("{}.gamma", self.name))?;
        let b = p.get(&format!("{}.beta", self.name))?;
        p.graph().group_norm(x, g, b, self.groups, NORM_EPS).map_err(shape_err(&self.name))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn declare(&self, specs: &mut Specs) {
        spec(specs, format!("{}.gamma", self.name), &[self.dim], Init::Ones);
        spec(specs, format!("{}.beta", self.name), &[self.dim], Init::Zeros);
    }

    pub fn forward(&self, p: &Bound, x: Var) -> Result<Var> {
        let g = p.get(&format!("{}.gamma", self.name))?;
        let b = p.get(&format!("{}.beta", self.name))?;
        p.graph().layer_norm(x, g, b, NORM_EPS).map_err(shape_err(&self.name))
    }
}

/// GN → SiLU → conv, (+ time projection), GN → SiLU → conv, plus skip.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    name: String,
    norm1: GroupNorm,
    conv1: Conv,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, groups: usize, time_dim: Option<usize>) -> Self {
        Self {
            name: name.to_string(),
            norm1: GroupNorm::new(format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(format!("{name}.conv1"), cin, cout, 3, 1),
            time: time_dim.map(|e| Linear::new(format!("{name}.time"), e, cout, true)),
            norm2: GroupNorm::new(format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    pub fn declare(&self, specs: &mut Specs) {
        self.norm1.declare(specs);
        self.conv1.declare(specs);
        if let Some(t) = &self.time {
            t.declare(specs);
        }
        self.norm2.declare(specs);
        self.conv2.declare(specs);
        if let Some(s) = &self.skip {
            s.declare(specs);
        }
    }

    /// `temb_act` is the already-activated time embedding, shape [1, E].
    pub fn forward(&self, p: &Bound, x: Var, temb_act: Option<Var>) -> Result<Var> {
        let g = p.graph();
        let mut h = self.norm1.forward(p, x)?;
        h = self.conv1.forward(p, g.silu(h))?;
        if let (Some(lin), Some(t)) = (&self.time, temb_act) {
            let proj = lin.forward(p, t)?;
            let proj = g.reshape(proj, &[lin.fout]).map_err(shape_err(&self.name))?;
            h = g.add_channel(h, proj).map_err(shape_err(&self.name))?;
        }
        h = self.norm2.forward(p, h)?;
        h = self.conv2.forward(p, g.silu(h))?;
        let skip = match &self.skip {
            Some(s) => s.forward(p, x)?,
            None => x,
        };
        g.add(h, skip).map_err(shape_err(&self.name))
    }
}

/// How attention inside the spatial transformer is restricted.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnMasks<'a> {
    pub query: Option<&'a [bool]>,
    pub key: Option<&'a [bool]>,
}

/// GN → proj_in → [self-attn, cross-attn over mask tokens, FFN] → proj_out.
/// Returns the branch output only; the caller decides how it is added.
#[derive(Debug, Clone)]
pub(crate) struct SpatialTransformer {
    name: String,
    channels: usize,
    heads: usize,
    norm: GroupNorm,
    proj_in: Conv,
    ln1: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_out: Linear,
    ln2: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_out: Linear,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Conv,
}

impl SpatialTransformer {
    pub fn new(name: &str, channels: usize, heads: usize, context_dim: usize, groups: usize) -> Self {
        let c = channels;
        let lin = |n: &str, i, o, b| Linear::new(format!("{name}.{n}"), i, o, b);
        let ln = |n: &str| LayerNorm { name: format!("{name}.{n}"), dim: c };
        Self {
            name: name.to_string(),
            channels: c,
            heads,
            norm: GroupNorm::new(format!("{name}.norm"), c, groups),
            proj_in: Conv::new(format!("{name}.proj_in"), c, c, 1, 1),
            ln1: ln("ln1"),
            self_q: lin("attn1.q", c, c, false),
            self_k: lin("attn1.k", c, c, false),
            self_v: lin("attn1.v", c, c, false),
            self_out: lin("attn1.out", c, c, true),
            ln2: ln("ln2"),
            cross_q: lin("attn2.q", c, c, false),
            cross_k: lin("attn2.k", context_dim, c, false),
            cross_v: lin("attn2.v", context_dim, c, false),
            cross_out: lin("attn2.out", c, c, true),
            ln3: ln("ln3"),
            ff1: lin("ff.0", c, 4 * c, true),
            ff2: lin("ff.2", 4 * c, c, true),
            proj_out: Conv::new(format!("{name}.proj_out"), c, c, 1, 1).zeroed(),
        }
    }

    pub fn declare(&self, specs: &mut Specs) {
        self.norm.declare(specs);
        self.proj_in.declare(specs);
        self.ln1.declare(specs);
        for l in [&self.self_q, &self.self_k, &self.self_v, &self.self_out] {
            l.declare(specs);
        }
        self.ln2.declare(specs);
        for l in [&self.cross_q, &self.cross_k, &self.cross_v, &self.cross_out] {
            l.declare(specs);
        }
        self.ln3.declare(specs);
        self.ff1.declare(specs);
        self.ff2.declare(specs);
        self.proj_out.declare(specs);
    }

    /// `h`: [C, d, h, w]; `tokens`: [N, context_dim] with N = d·h·w.
    pub fn forward(&self, p: &Bound, h: Var, tokens: Var, masks: AttnMasks) -> Result<Var> {
        let g = p.graph();
        let e = shape_err(&self.name);
        let shape = g.shape(h);
        let n: usize = shape[1..].iter().product();
        let mut x = self.norm.forward(p, h)?;
        x = self.proj_in.forward(p, x)?;
        x = g.reshape(x, &[self.channels, n]).map_err(&e)?;
        x = g.transpose(x).map_err(&e)?;

        let a = self.ln1.forward(p, x)?;
        let (q, k, v) = (self.self_q.forward(p, a)?, self.self_k.forward(p, a)?, self.self_v.forward(p, a)?);
        let att = g.attention(q, k, v, self.heads, masks.key, masks.query).map_err(&e)?;
        x = g.add(x, self.self_out.forward(p, att)?).map_err(&e)?;

        let a = self.ln2.forward(p, x)?;
        let q = self.cross_q.forward(p, a)?;
        let (k, v) = (self.cross_k.forward(p, tokens)?, self.cross_v.forward(p, tokens)?);
        let att = g.attention(q, k, v, self.heads, masks.key, masks.query).map_err(&e)?;
        x = g.add(x, self.cross_out.forward(p, att)?).map_err(&e)?;

        let a = self.ln3.forward(p, x)?;
        let f = g.gelu(self.ff1.forward(p, a)?);
        x = g.add(x, self.ff2.forward(p, f)?).map_err(&e)?;

        x = g.transpose(x).map_err(&e)?;
        x = g.reshape(x, &shape).map_err(&e)?;
        self.proj_out.forward(p, x)
    }
}

/// Sinusoidal embedding of a scalar timestep, [1, dim].
pub(crate) fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Tensor::new(&[1, dim], out).expect("embedding shape")
}
