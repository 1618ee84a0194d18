//! Encoder/decoder backbone with one skip connection per resolution level.

use lnsynth_grad::{Bound, Var};

use super::blocks::{Conv, GroupNorm, ResBlock, Specs};
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Level {
    res: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    res: Vec<ResBlock>,
    up: Option<Conv>,
}

/// Hook invoked at every point where the feature grid is at the attention
/// level: encoder, bottleneck and decoder. Receives the stage name.
pub(crate) type AttentionHook<'h> = dyn FnMut(&str, Var) -> Result<Var> + 'h;

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    levels: usize,
    attention_level: Option<usize>,
    conv_in: Conv,
    down: Vec<Level>,
    mid: [ResBlock; 2],
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

impl UNet {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        channels: &[usize],
        res_blocks: usize,
        groups: usize,
        time_dim: Option<usize>,
        attention_level: Option<usize>,
    ) -> Self {
        let levels = channels.len();
        let mut down = Vec::new();
        let mut prev = channels[0];
        for (l, &ch) in channels.iter().enumerate() {
            let res = (0..res_blocks)
                .map(|i| ResBlock::new(&format!("down.{l}.res.{i}"), if i == 0 { prev } else { ch }, ch, groups, time_dim))
                .collect();
            let d = (l + 1 < levels).then(|| Conv::new(format!("down.{l}.downsample"), ch, ch, 3, 2));
            down.push(Level { res, down: d });
            prev = ch;
        }
        let deep = channels[levels - 1];
        let mid = [
            ResBlock::new("mid.res.0", deep, deep, groups, time_dim),
            ResBlock::new("mid.res.1", deep, deep, groups, time_dim),
        ];
        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let ch = channels[l];
            let res = (0..res_blocks)
                .map(|i| ResBlock::new(&format!("up.{l}.res.{i}"), if i == 0 { 2 * ch } else { ch }, ch, groups, time_dim))
                .collect();
            let u = (l > 0).then(|| Conv::new(format!("up.{l}.upsample"), ch, channels[l - 1], 3, 1));
            up.push(UpLevel { res, up: u });
        }
        Self {
            levels,
            attention_level,
            conv_in: Conv::new("conv_in", in_ch, channels[0], 3, 1),
            down,
            mid,
            up,
            out_norm: GroupNorm::new("out.norm", channels[0], groups),
            out_conv: Conv::new("out.conv", channels[0], out_ch, 3, 1),
        }
    }

    pub fn declare(&self, specs: &mut Specs) {
        self.conv_in.declare(specs);
        for lv in &self.down {
            lv.res.iter().for_each(|r| r.declare(specs));
            if let Some(d) = &lv.down {
                d.declare(specs);
            }
        }
        self.mid.iter().for_each(|r| r.declare(specs));
        for lv in &self.up {
            lv.res.iter().for_each(|r| r.declare(specs));
            if let Some(u) = &lv.up {
                u.declare(specs);
            }
        }
        self.out_norm.declare(specs);
        self.out_conv.declare(specs);
    }

    /// Names of the attention stages in forward order.
    pub fn attention_stages(&self) -> Vec<String> {
        let Some(a) = self.attention_level else { return Vec::new() };
        let mut out = vec![format!("down.{a}.attn")];
        if a == self.levels - 1 {
            out.push("mid.attn".into());
        }
        out.push(format!("up.{a}.attn"));
        out
    }

    pub fn forward(&self, p: &Bound, x: Var, temb_act: Option<Var>, hook: Option<&mut AttentionHook>) -> Result<Var> {
        let g = p.graph();
        let mut noop = |_: &str, h: Var| -> Result<Var> { Ok(h) };
        let hook: &mut AttentionHook = match hook {
            Some(h) => h,
            None => &mut noop,
        };
        let at = |l: usize| self.attention_level == Some(l);
        let mut h = self.conv_in.forward(p, x)?;
        let mut skips = Vec::with_capacity(self.levels);
        for (l, lv) in self.down.iter().enumerate() {
            for r in &lv.res {
                h = r.forward(p, h, temb_act)?;
            }
            if at(l) {
                h = hook(&format!("down.{l}.attn"), h)?;
            }
            skips.push(h);
            if let Some(d) = &lv.down {
                h = d.forward(p, h)?;
            }
        }
        h = self.mid[0].forward(p, h, temb_act)?;
        if at(self.levels - 1) {
            h = hook("mid.attn", h)?;
        }
        h = self.mid[1].forward(p, h, temb_act)?;
        for (lv, l) in self.up.iter().zip((0..self.levels).rev()) {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip]).map_err(Error::at(&format!("up.{l}.concat")))?;
            for r in &lv.res {
                h = r.forward(p, h, temb_act)?;
            }
            if at(l) {
                h = hook(&format!("up.{l}.attn"), h)?;
            }
            if let Some(u) = &lv.up {
                h = g.upsample2(h).map_err(Error::at(&format!("up.{l}.upsample")))?;
                h = u.forward(p, h)?;
            }
        }
        h = self.out_norm.forward(p, h)?;
        self.out_conv.forward(p, g.silu(h))
    }
}
