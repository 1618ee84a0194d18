//! Mask-conditioned 3D U-Net noise predictor.
//!
//! Global conditioning concatenates the one-hot anatomy and the lymph-node
//! mask to the noisy image. Local conditioning encodes the lymph-node mask
//! into tokens that a spatial transformer cross-attends to; its output is
//! added back only where the (pooled) mask is set.

mod blocks;
mod unet;

use std::collections::BTreeMap;

use lnsynth_grad::{uniform, Bound, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionStack;
use crate::volume::{Geometry, ScalarVolume};
use crate::{Error, Result};

use blocks::{timestep_embedding, AttnMasks, Conv, Init, Linear, ParamSpec, Specs, SpatialTransformer};
pub(crate) use unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Transformer output gated by the pooled lymph-node mask.
    LD,
    /// Attention restricted to lymph-node positions; output added ungated.
    LA,
    /// Plain attention, ungated.
    GA,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LD" => Ok(Self::LD),
            "LA" => Ok(Self::LA),
            "GA" => Ok(Self::GA),
            other => Err(Error::Config(format!("unknown attention mode `{other}` (expected LD, LA or GA)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub patch_shape: [usize; 3],
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    /// C: one-hot anatomy channels.
    pub anatomy_channels: usize,
    /// Grid edge at which the spatial transformer runs.
    pub attention_resolution: usize,
    pub time_embed_dim: usize,
    pub attention_mode: AttentionMode,
    pub num_heads: usize,
    /// Width of the mask tokens.
    pub context_dim: usize,
    pub mask_encoder_channels: usize,
    pub norm_groups: usize,
    /// Concatenate the lymph-node mask to the input.
    pub concat_ln_mask: bool,
    /// Concatenate the anatomy channels to the input.
    pub concat_anatomy: bool,
    /// Mask encoder + spatial transformer branch.
    pub local_detail: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch_shape: [128; 3],
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2, 4],
            num_res_blocks: 2,
            anatomy_channels: 14,
            attention_resolution: 16,
            time_embed_dim: 128,
            attention_mode: AttentionMode::LD,
            num_heads: 4,
            context_dim: 64,
            mask_encoder_channels: 16,
            norm_groups: 8,
            concat_ln_mask: true,
            concat_anatomy: true,
            local_detail: true,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Input channel count, C + 2.
    pub fn in_channels(&self) -> usize {
        self.anatomy_channels + 2
    }

    /// U-Net level whose grid edge equals the attention resolution.
    pub fn attention_level(&self) -> Option<usize> {
        (0..self.levels()).find(|l| self.patch_shape[0] >> l == self.attention_resolution)
    }

    pub fn attention_grid(&self) -> [usize; 3] {
        [self.attention_resolution; 3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let levels = self.levels();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be a nonempty list of positive integers".into());
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be even and positive, got {}", self.base_channels));
        }
        if self.num_res_blocks == 0 || self.anatomy_channels == 0 || self.time_embed_dim == 0 {
            return bad("num_res_blocks, anatomy_channels and time_embed_dim must be positive".into());
        }
        let factor = 1 << (levels - 1);
        if self.patch_shape.iter().any(|&p| p == 0 || p % factor != 0) {
            return bad(format!("patch_shape {:?} must be divisible by 2^(levels-1) = {factor}", self.patch_shape));
        }
        if self.norm_groups == 0 || self.channels().iter().any(|c| c % self.norm_groups != 0) {
            return bad(format!("channel widths {:?} must be divisible by norm_groups {}", self.channels(), self.norm_groups));
        }
        if self.local_detail {
            let p = self.patch_shape;
            if p[0] != p[1] || p[1] != p[2] {
                return bad(format!("local detail conditioning needs a cubic patch, got {p:?}"));
            }
            let Some(level) = self.attention_level() else {
                return bad(format!(
                    "attention_resolution {} is not a U-Net grid size for patch {:?} with {levels} levels",
                    self.attention_resolution, self.patch_shape
                ));
            };
            if p[0] % self.attention_resolution != 0 || (p[0] / self.attention_resolution) != 1 << level {
                return bad("attention_resolution must be the patch edge divided by a power of two".into());
            }
            let ch = self.channels()[level];
            if self.num_heads == 0 || ch % self.num_heads != 0 {
                return bad(format!("{ch} channels at the attention level are not divisible by {} heads", self.num_heads));
            }
            if self.context_dim == 0 || self.mask_encoder_channels == 0 {
                return bad("context_dim and mask_encoder_channels must be positive".into());
            }
        }
        Ok(())
    }
}

/// Strided-convolution encoder τ_θ from the lymph-node mask to tokens.
#[derive(Debug, Clone)]
struct MaskEncoder {
    conv_in: Conv,
    down: Vec<Conv>,
    out: Conv,
    context_dim: usize,
}

impl MaskEncoder {
    fn new(cfg: &DenoiserConfig) -> Self {
        let c = cfg.mask_encoder_channels;
        let steps = (cfg.patch_shape[0] / cfg.attention_resolution).trailing_zeros() as usize;
        Self {
            conv_in: Conv::new("mask_encoder.conv_in", 1, c, 3, 1),
            down: (0..steps).map(|i| Conv::new(format!("mask_encoder.down.{i}"), c, c, 3, 2)).collect(),
            out: Conv::new("mask_encoder.out", c, cfg.context_dim, 1, 1),
            context_dim: cfg.context_dim,
        }
    }

    fn declare(&self, specs: &mut Specs) {
        self.conv_in.declare(specs);
        self.down.iter().for_each(|d| d.declare(specs));
        self.out.declare(specs);
    }

    /// `m`: [1, d, h, w] → tokens [N, context_dim].
    fn forward(&self, p: &Bound, m: Var) -> Result<Var> {
        let g = p.graph();
        let mut h = g.silu(self.conv_in.forward(p, m)?);
        for d in &self.down {
            h = g.silu(d.forward(p, h)?);
        }
        h = self.out.forward(p, h)?;
        let n: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[self.context_dim, n]).map_err(Error::at("mask_encoder"))?;
        g.transpose(h).map_err(Error::at("mask_encoder"))
    }
}

/// Max-pools a binary mask onto a coarser grid: a cell is set iff any
/// voxel it covers is set.
pub fn gate_mask_from_lnmask(mask: &[u8], shape: [usize; 3], target: [usize; 3]) -> Result<Vec<u8>> {
    if mask.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("gate mask", "mask length does not match its shape"));
    }
    if mask.iter().any(|v| *v > 1) {
        return Err(Error::Data("lymph-node mask must be binary".into()));
    }
    if (0..3).any(|a| target[a] == 0 || shape[a] % target[a] != 0) {
        return Err(Error::Invalid(format!("gate resolution {target:?} does not divide mask grid {shape:?}")));
    }
    let f: [usize; 3] = std::array::from_fn(|a| shape[a] / target[a]);
    let mut out = vec![0u8; target.iter().product()];
    for (i, v) in mask.iter().enumerate() {
        if *v != 0 {
            let p = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
            out[((p[0] / f[0]) * target[1] + p[1] / f[1]) * target[2] + p[2] / f[2]] = 1;
        }
    }
    Ok(out)
}

/// `[x_t | c_a one-hot (C) | c_m]`, channels first. Channels of a disabled
/// concatenation are left at zero so the input width stays C + 2.
pub fn assemble_input(x_t: &[f64], cond: &ConditionStack, concat_anatomy: bool, concat_ln_mask: bool) -> Result<Tensor> {
    let n = cond.voxels();
    if x_t.len() != n {
        return Err(Error::shape("assemble_input", format!("{} image voxels vs {n} condition voxels", x_t.len())));
    }
    let c = cond.channels();
    let mut data = Vec::with_capacity((c + 2) * n);
    data.extend_from_slice(x_t);
    if concat_anatomy {
        data.extend(cond.anatomy().iter().map(|v| *v as f64));
    } else {
        data.resize((c + 1) * n, 0.0);
    }
    if concat_ln_mask {
        data.extend(cond.ln_mask().iter().map(|v| *v as f64));
    } else {
        data.resize((c + 2) * n, 0.0);
    }
    let [d, h, w] = cond.shape();
    Ok(Tensor::new(&[c + 2, d, h, w], data)?)
}

/// Network definition derived from a [`DenoiserConfig`].
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    unet: UNet,
    time: [Linear; 2],
    mask_encoder: Option<MaskEncoder>,
    transformers: BTreeMap<String, SpatialTransformer>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let e = config.time_embed_dim;
        let level = if config.local_detail { config.attention_level() } else { None };
        let unet = UNet::new(config.in_channels(), 1, &ch, config.num_res_blocks, config.norm_groups, Some(e), level);
        let transformers = match level {
            Some(l) => unet
                .attention_stages()
                .into_iter()
                .map(|name| {
                    let st = SpatialTransformer::new(&name, ch[l], config.num_heads, config.context_dim, config.norm_groups);
                    (name, st)
                })
                .collect(),
            None => BTreeMap::new(),
        };
        Ok(Self {
            time: [Linear::new("time.lin1", config.base_channels, e, true), Linear::new("time.lin2", e, e, true)],
            mask_encoder: config.local_detail.then(|| MaskEncoder::new(&config)),
            unet,
            transformers,
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = Specs::new();
        for t in &self.time {
            t.declare(&mut specs);
        }
        self.unet.declare(&mut specs);
        if let Some(m) = &self.mask_encoder {
            m.declare(&mut specs);
        }
        for st in self.transformers.values() {
            st.declare(&mut specs);
        }
        specs
    }

    /// Parameter names and shapes; a function of the config alone.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let mut inv: Vec<_> = self.specs().into_iter().map(|s| (s.name, s.shape)).collect();
        inv.sort();
        inv
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        init_from_specs(&self.specs(), seed)
    }

    pub fn transformer_stages(&self) -> Vec<String> {
        self.unet.attention_stages()
    }

    pub fn is_mask_encoder_param(name: &str) -> bool {
        name.starts_with("mask_encoder.")
    }

    fn check_cond(&self, cond: &ConditionStack) -> Result<()> {
        if cond.shape() != self.config.patch_shape {
            return Err(Error::shape("input", format!("condition grid {:?} vs patch {:?}", cond.shape(), self.config.patch_shape)));
        }
        if cond.channels() != self.config.anatomy_channels {
            return Err(Error::shape("input", format!("{} anatomy channels vs configured {}", cond.channels(), self.config.anatomy_channels)));
        }
        Ok(())
    }

    /// Mask tokens `[N, context_dim]`.
    pub fn encode_mask(&self, params: &ParamStore, ln_mask: &[u8]) -> Result<Tensor> {
        let enc = self.mask_encoder.as_ref().ok_or_else(|| Error::Invalid("local detail branch is disabled".into()))?;
        if ln_mask.iter().any(|v| *v > 1) {
            return Err(Error::Data("lymph-node mask must be binary".into()));
        }
        let [d, h, w] = self.config.patch_shape;
        if ln_mask.len() != d * h * w {
            return Err(Error::shape("mask_encoder", format!("{} mask voxels for patch {:?}", ln_mask.len(), self.config.patch_shape)));
        }
        let g = Graph::inference();
        let p = Bound::new(&g, params, false);
        let m = g.constant(Tensor::new(&[1, d, h, w], ln_mask.iter().map(|v| *v as f64).collect())?);
        let out = enc.forward(&p, m)?;
        Ok((*g.value(out)).clone())
    }

    /// One spatial transformer stage on its own: `h` is [C, r, r, r] at the
    /// attention resolution, `tokens` [r³, context_dim], `gate` binary [r³].
    pub fn spatial_transformer_block(
        &self,
        params: &ParamStore,
        stage: &str,
        h: &Tensor,
        tokens: &Tensor,
        gate: &[u8],
        mode: AttentionMode,
    ) -> Result<Tensor> {
        let st = self
            .transformers
            .get(stage)
            .ok_or_else(|| Error::Invalid(format!("no spatial transformer stage `{stage}`")))?;
        let r = self.config.attention_resolution;
        if h.shape().len() != 4 || h.shape()[1..] != [r, r, r] || gate.len() != r * r * r {
            return Err(Error::shape(stage, format!("features {:?}, gate {} at attention grid {r}", h.shape(), gate.len())));
        }
        let g = Graph::inference();
        let p = Bound::new(&g, params, false);
        let hv = g.constant(h.clone());
        let tv = g.constant(tokens.clone());
        let gate_f: Vec<f64> = gate.iter().map(|v| *v as f64).collect();
        let gate_b: Vec<bool> = gate.iter().map(|v| *v != 0).collect();
        let gv = g.constant(Tensor::new(&[r, r, r], gate_f)?);
        let out = apply_transformer(&p, st, hv, tv, gv, &gate_b, mode, stage)?;
        Ok((*g.value(out)).clone())
    }

    /// Builds ε̂ on `p`'s graph. Returns a [1, d, h, w] node.
    pub(crate) fn forward_graph(&self, p: &Bound, x_t: &[f64], cond: &ConditionStack, t: usize, transformer: bool) -> Result<Var> {
        self.check_cond(cond)?;
        if t == 0 {
            return Err(Error::Timestep { t, max: usize::MAX });
        }
        let g = p.graph();
        let cfg = &self.config;
        let x = g.constant(assemble_input(x_t, cond, cfg.concat_anatomy, cfg.concat_ln_mask)?);
        let emb = g.constant(timestep_embedding(t as f64, cfg.base_channels));
        let temb = g.silu(self.time[0].forward(p, emb)?);
        let temb = g.silu(self.time[1].forward(p, temb)?);
        let branch = match (&self.mask_encoder, transformer) {
            (Some(enc), true) => {
                let [d, h, w] = cfg.patch_shape;
                let m = g.constant(Tensor::new(&[1, d, h, w], cond.ln_mask().iter().map(|v| *v as f64).collect())?);
                let tokens = enc.forward(p, m)?;
                let r = cfg.attention_grid();
                let gate = gate_mask_from_lnmask(cond.ln_mask(), cfg.patch_shape, r)?;
                let gate_b: Vec<bool> = gate.iter().map(|v| *v != 0).collect();
                let gate_v = g.constant(Tensor::new(&r, gate.iter().map(|v| *v as f64).collect())?);
                Some((tokens, gate_v, gate_b))
            }
            _ => None,
        };
        match &branch {
            Some((tokens, gate_v, gate_b)) => {
                let mut hook = |stage: &str, h: Var| -> Result<Var> {
                    let st = &self.transformers[stage];
                    apply_transformer(p, st, h, *tokens, *gate_v, gate_b, cfg.attention_mode, stage)
                };
                self.unet.forward(p, x, Some(temb), Some(&mut hook))
            }
            None => self.unet.forward(p, x, Some(temb), None),
        }
    }

    /// ε̂ for one noisy patch.
    pub fn forward(&self, params: &ParamStore, x_t: &ScalarVolume, cond: &ConditionStack, t: usize) -> Result<ScalarVolume> {
        self.forward_inner(params, x_t, cond, t, true)
    }

    /// Same as [`Denoiser::forward`] with the spatial-transformer branch removed.
    pub fn forward_without_transformer(&self, params: &ParamStore, x_t: &ScalarVolume, cond: &ConditionStack, t: usize) -> Result<ScalarVolume> {
        self.forward_inner(params, x_t, cond, t, false)
    }

    fn forward_inner(&self, params: &ParamStore, x_t: &ScalarVolume, cond: &ConditionStack, t: usize, transformer: bool) -> Result<ScalarVolume> {
        if x_t.shape() != cond.shape() {
            return Err(Error::shape("input", format!("image grid {:?} vs condition grid {:?}", x_t.shape(), cond.shape())));
        }
        let out = self.predict(params, &x_t.to_f64(), cond, t, transformer)?;
        ScalarVolume::new(*x_t.geometry(), out.into_iter().map(|v| v as f32).collect())
    }

    /// ε̂ in f64, flat.
    pub(crate) fn predict(&self, params: &ParamStore, x_t: &[f64], cond: &ConditionStack, t: usize, transformer: bool) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let p = Bound::new(&g, params, false);
        let out = self.forward_graph(&p, x_t, cond, t, transformer)?;
        let v = g.value(out);
        drop(p);
        drop(g);
        Ok(std::rc::Rc::try_unwrap(v).map(Tensor::into_data).unwrap_or_else(|v| v.data().to_vec()))
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_transformer(
    p: &Bound,
    st: &SpatialTransformer,
    h: Var,
    tokens: Var,
    gate: Var,
    gate_b: &[bool],
    mode: AttentionMode,
    stage: &str,
) -> Result<Var> {
    let g = p.graph();
    let masks = match mode {
        AttentionMode::LA => AttnMasks { query: Some(gate_b), key: Some(gate_b) },
        AttentionMode::LD | AttentionMode::GA => AttnMasks { query: None, key: None },
    };
    let out = st.forward(p, h, tokens, masks)?;
    let out = match mode {
        AttentionMode::LD => g.mul_spatial(out, gate).map_err(Error::at(stage))?,
        AttentionMode::LA | AttentionMode::GA => out,
    };
    g.add(h, out).map_err(Error::at(stage))
}

pub(crate) fn init_from_specs(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in specs {
        let t = match s.init {
            Init::Uniform(b) => uniform(&s.shape, b, &mut rng),
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::ones(&s.shape),
        };
        store.insert(s.name.clone(), t);
    }
    store
}

/// Config, raw parameters θ ∪ τ_θ, and their moving average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserState {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub ema: ParamStore,
}

/// Which parameter copy a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    #[default]
    Ema,
    Raw,
}

impl DenoiserState {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let net = Denoiser::new(config.clone())?;
        let params = net.init_params(seed);
        Ok(Self { config, ema: params.clone(), params })
    }

    pub fn network(&self) -> Result<Denoiser> {
        Denoiser::new(self.config.clone())
    }

    pub fn weights(&self, which: Weights) -> &ParamStore {
        match which {
            Weights::Ema => &self.ema,
            Weights::Raw => &self.params,
        }
    }

    /// Checks that stored parameters match what the config declares.
    pub fn verify(&self) -> Result<()> {
        let want = self.network()?.inventory();
        for store in [&self.params, &self.ema] {
            let mut have = store.inventory();
            have.sort();
            if have != want {
                return Err(Error::Config("checkpoint parameters do not match its denoiser config".into()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, which: Weights, x_t: &ScalarVolume, cond: &ConditionStack, t: usize) -> Result<ScalarVolume> {
        self.network()?.forward(self.weights(which), x_t, cond, t)
    }
}

/// Geometry of a patch with unit spacing.
pub fn patch_geometry(cfg: &DenoiserConfig) -> Geometry {
    Geometry::unit(cfg.patch_shape)
}
