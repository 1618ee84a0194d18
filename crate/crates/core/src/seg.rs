//! Minimal 3D segmentation harness: a plain U-Net trained with Dice + BCE
//! on real, synthetic or mixed patch streams, and sliding-window inference.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lnsynth_grad::{Adam, Bound, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{extract_patch, roi_bounds};
use crate::denoiser::{init_from_specs, UNet};
use crate::volume::{Bounds, LabelVolume, ScalarVolume};
use crate::{nifti, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "synt")]
    Synt,
    #[serde(rename = "real+synt")]
    RealSynt,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Self::Real),
            "synt" => Ok(Self::Synt),
            "real+synt" => Ok(Self::RealSynt),
            other => Err(Error::Config(format!("unknown strategy `{other}` (expected real, synt or real+synt)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::Synt => "synt",
            Self::RealSynt => "real+synt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub patch_shape: [usize; 3],
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    pub norm_groups: usize,
    pub iterations: u64,
    pub lr: f64,
    pub dice_smooth: f64,
    /// Chance a training patch is centred on a lymph-node voxel.
    pub foreground_prob: f64,
    /// Sliding-window overlap fraction in [0, 1).
    pub overlap: f64,
    pub threshold: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            patch_shape: [64; 3],
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks: 1,
            norm_groups: 4,
            iterations: 2_000,
            lr: 1e-3,
            dice_smooth: 1.0,
            foreground_prob: 0.67,
            overlap: 0.5,
            threshold: 0.5,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn desk() -> Self {
        Self { patch_shape: [16; 3], base_channels: 8, channel_multipliers: vec![1, 2], iterations: 60, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        let bad = |m: String| Err(Error::Config(format!("segmentation: {m}")));
        if levels == 0 || self.channel_multipliers.contains(&0) || self.base_channels == 0 || self.num_res_blocks == 0 {
            return bad("network widths and depths must be positive".into());
        }
        let f = 1 << (levels - 1);
        if self.patch_shape.iter().any(|p| *p == 0 || p % f != 0) {
            return bad(format!("patch_shape {:?} must be divisible by {f}", self.patch_shape));
        }
        if self.norm_groups == 0 || self.channel_multipliers.iter().any(|m| (m * self.base_channels) % self.norm_groups != 0) {
            return bad("channel widths must be divisible by norm_groups".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.foreground_prob) {
            return bad("lr must be positive, overlap in [0, 1), foreground_prob in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.threshold) || self.dice_smooth < 0.0 {
            return bad("threshold must lie in [0, 1) and dice_smooth be nonnegative".into());
        }
        Ok(())
    }

    fn network(&self) -> UNet {
        let ch: Vec<usize> = self.channel_multipliers.iter().map(|m| m * self.base_channels).collect();
        UNet::new(1, 1, &ch, self.num_res_blocks, self.norm_groups, None, None)
    }
}

/// Image normalized to [-1, 1] with its binary lymph-node label.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: ScalarVolume,
    pub label: LabelVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SampleRef {
    Real(usize),
    Synt(usize),
}

/// One epoch's sample list before shuffling.
///
/// * real: each real case once
/// * synt: `m · n_ref` synthetic draws, `n_ref` = real count when real
///   cases exist, otherwise the synthetic pool size
/// * real+synt: each real case once plus `m · n_real` synthetic draws
pub fn epoch_plan(strategy: Strategy, n_real: usize, n_synt: usize, multiplier: usize) -> Result<Vec<SampleRef>> {
    if multiplier == 0 {
        return Err(Error::Config("synthetic multiplier must be at least 1".into()));
    }
    let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Data(format!("strategy {strategy} needs {what}"))) };
    let synt = |count: usize| (0..count).map(|k| SampleRef::Synt(k % n_synt)).collect::<Vec<_>>();
    Ok(match strategy {
        Strategy::Real => {
            need(n_real > 0, "real cases")?;
            (0..n_real).map(SampleRef::Real).collect()
        }
        Strategy::Synt => {
            need(n_synt > 0, "synthetic cases")?;
            let n_ref = if n_real > 0 { n_real } else { n_synt };
            synt(multiplier * n_ref)
        }
        Strategy::RealSynt => {
            need(n_real > 0 && n_synt > 0, "both real and synthetic cases")?;
            let mut v: Vec<SampleRef> = (0..n_real).map(SampleRef::Real).collect();
            v.extend(synt(multiplier * n_real));
            v
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegModel {
    pub config: SegConfig,
    pub params: ParamStore,
    pub strategy: Strategy,
    pub multiplier: usize,
    pub adam: Adam,
    pub iteration: u64,
}

impl SegModel {
    pub fn init(config: SegConfig, strategy: Strategy, multiplier: usize) -> Result<Self> {
        config.validate()?;
        let mut specs = Vec::new();
        config.network().declare(&mut specs);
        let params = init_from_specs(&specs, config.seed);
        let adam = Adam::new(config.lr, 0.9, 0.999, 1e-8);
        Ok(Self { config, params, strategy, multiplier, adam, iteration: 0 })
    }

    pub fn verify(&self) -> Result<()> {
        let mut specs = Vec::new();
        self.config.network().declare(&mut specs);
        let mut want: Vec<_> = specs.into_iter().map(|s| (s.name, s.shape)).collect();
        want.sort();
        let mut have = self.params.inventory();
        have.sort();
        if want != have {
            return Err(Error::Config("segmentation checkpoint does not match its network config".into()));
        }
        Ok(())
    }

    /// Logits for one patch.
    fn logits(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let p = Bound::new(&g, &self.params, false);
        let [d, h, w] = self.config.patch_shape;
        let x = g.constant(Tensor::new(&[1, d, h, w], patch.to_vec())?);
        let out = self.config.network().forward(&p, x, None, None)?;
        let v = g.value(out).data().to_vec();
        Ok(v)
    }
}

/// Picks a patch start: centred on a random node voxel with probability
/// `foreground_prob`, uniformly placed otherwise.
fn draw_patch(sample: &SegSample, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let grid = sample.image.shape();
    let patch = cfg.patch_shape;
    let fg: Vec<usize> = if rng.random_bool(cfg.foreground_prob) {
        sample.label.data().iter().enumerate().filter(|(_, v)| **v != 0).map(|(i, _)| i).collect()
    } else {
        Vec::new()
    };
    let start: [isize; 3] = if let Some(&i) = fg.get(rng.random_range(0..fg.len().max(1))) {
        let c = sample.image.geometry().coords(i);
        std::array::from_fn(|a| {
            let s = c[a] as isize - patch[a] as isize / 2;
            if grid[a] >= patch[a] { s.clamp(0, (grid[a] - patch[a]) as isize) } else { s.min(0).max(grid[a] as isize - patch[a] as isize) }
        })
    } else {
        std::array::from_fn(|a| {
            if grid[a] >= patch[a] {
                rng.random_range(0..=grid[a] - patch[a]) as isize
            } else {
                -(((patch[a] - grid[a]) / 2) as isize)
            }
        })
    };
    let img = extract_patch(sample.image.data(), grid, start, patch, -1.0f32);
    let lab = extract_patch(sample.label.data(), grid, start, patch, 0u16);
    (img.into_iter().map(|v| v as f64).collect(), lab.into_iter().map(|v| (v != 0) as u8 as f64).collect())
}

/// Trains until `config.iterations`; returns the per-iteration loss.
pub fn train_segmenter(
    model: &mut SegModel,
    real: &[SegSample],
    synt: &[SegSample],
    log: &mut dyn Write,
    checkpoint: &mut dyn FnMut(&SegModel) -> Result<()>,
) -> Result<Vec<f64>> {
    let cfg = model.config.clone();
    let plan = epoch_plan(model.strategy, real.len(), synt.len(), model.multiplier)?;
    for s in real.iter().chain(synt) {
        if !s.image.geometry().matches(s.label.geometry()) {
            return Err(Error::Data(format!("case {}: image and label grids differ", s.id)));
        }
    }
    let io = |e| Error::Data(format!("cannot write training log: {e}"));
    writeln!(log, "# strategy {} multiplier {} epoch_length {}", model.strategy, model.multiplier, plan.len()).map_err(io)?;
    writeln!(log, "# iteration, loss, lr, wall_ms").map_err(io)?;
    let net = cfg.network();
    let [d, h, w] = cfg.patch_shape;
    let mut losses = Vec::new();
    let mut order = Vec::new();
    while model.iteration < cfg.iterations {
        let it = model.iteration + 1;
        let started = Instant::now();
        let pos = (model.iteration as usize) % plan.len();
        if pos == 0 || order.is_empty() {
            let epoch = model.iteration / plan.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0xA24B_AED4_963E_E407));
            order = plan.clone();
            order.shuffle(&mut rng);
        }
        let sample = match order[pos] {
            SampleRef::Real(i) => &real[i],
            SampleRef::Synt(j) => &synt[j],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ it.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (img, lab) = draw_patch(sample, &cfg, &mut rng);
        let g = Graph::new();
        let p = Bound::new(&g, &model.params, true);
        let x = g.constant(Tensor::new(&[1, d, h, w], img)?);
        let logits = net.forward(&p, x, None, None)?;
        let target = g.constant(Tensor::new(&[1, d, h, w], lab)?);
        let dice = g.soft_dice(logits, target, cfg.dice_smooth).map_err(Error::at("loss"))?;
        let bce = g.bce_with_logits(logits, target).map_err(Error::at("loss"))?;
        let loss = g.add(dice, bce).map_err(Error::at("loss"))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite segmentation loss at iteration {it}")));
        }
        let grads = p.grads(&g.backward(loss)?);
        drop(p);
        model.adam.step(&mut model.params, &grads)?;
        model.iteration = it;
        losses.push(value);
        writeln!(log, "{it}, {value:.6}, {}, {}", cfg.lr, started.elapsed().as_millis()).map_err(io)?;
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            checkpoint(model)?;
        }
    }
    if !losses.is_empty() {
        checkpoint(model)?;
    }
    log.flush().map_err(io)?;
    Ok(losses)
}

fn window_starts(n: usize, patch: usize, step: usize) -> Vec<isize> {
    if n <= patch {
        return vec![-(((patch - n) / 2) as isize)];
    }
    let mut v: Vec<isize> = (0..=n - patch).step_by(step).map(|s| s as isize).collect();
    if *v.last().unwrap() != (n - patch) as isize {
        v.push((n - patch) as isize);
    }
    v
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Averaged foreground probability over overlapping windows within `region`.
pub fn probability_map(model: &SegModel, image: &ScalarVolume, region: &Bounds) -> Result<Vec<f64>> {
    let sub = image.crop(region)?;
    let grid = sub.shape();
    let patch = model.config.patch_shape;
    let step: [usize; 3] =
        std::array::from_fn(|a| ((patch[a] as f64 * (1.0 - model.config.overlap)).round() as usize).max(1));
    let starts: [Vec<isize>; 3] = std::array::from_fn(|a| window_starts(grid[a], patch[a], step[a]));
    let n = sub.data().len();
    let mut acc = vec![0.0; n];
    let mut hits = vec![0u32; n];
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let start = [z, y, x];
                let img = extract_patch(sub.data(), grid, start, patch, -1.0f32);
                let logits = model.logits(&img.into_iter().map(|v| v as f64).collect::<Vec<_>>())?;
                for pz in 0..patch[0] {
                    for py in 0..patch[1] {
                        for px in 0..patch[2] {
                            let q = [z + pz as isize, y + py as isize, x + px as isize];
                            if (0..3).any(|a| q[a] < 0 || q[a] as usize >= grid[a]) {
                                continue;
                            }
                            let i = (q[0] as usize * grid[1] + q[1] as usize) * grid[2] + q[2] as usize;
                            acc[i] += sigmoid(logits[(pz * patch[1] + py) * patch[2] + px]);
                            hits[i] += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(acc.iter().zip(&hits).map(|(a, h)| a / *h as f64).collect())
}

/// Binary prediction on the image grid. With `roi`, only the lymph-node
/// box grown by the given margin is segmented; everything else is
/// background.
pub fn infer_segmenter(model: &SegModel, image: &ScalarVolume, roi: Option<(&LabelVolume, f64)>) -> Result<LabelVolume> {
    model.verify()?;
    let region = match roi {
        Some((mask, mm)) => {
            if !mask.geometry().matches(image.geometry()) {
                return Err(Error::shape("infer_segmenter", "ROI mask grid differs from image"));
            }
            if mask.count_nonzero() == 0 {
                Bounds::full(image.shape())
            } else {
                roi_bounds(mask, mm)?
            }
        }
        None => Bounds::full(image.shape()),
    };
    let probs = probability_map(model, image, &region)?;
    let geom = image.geometry();
    let mut out = LabelVolume::zeros(*geom);
    let s = region.shape();
    for (i, p) in probs.iter().enumerate() {
        if *p > model.config.threshold {
            let c = [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]];
            let idx = geom.index([c[0] + region.lo[0], c[1] + region.lo[1], c[2] + region.lo[2]]);
            out.data_mut()[idx] = 1;
        }
    }
    Ok(out)
}

/// Writes `imagesTr/`, `labelsTr/`, `dataset.json` and `splits_final.json`
/// in the layout common medical segmentation frameworks read.
pub fn export_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    let images = dir.join("imagesTr");
    let labels = dir.join("labelsTr");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        nifti::write_scalar(&images.join(format!("{}_0000.nii.gz", s.id)), &s.image)?;
        nifti::write_labels(&labels.join(format!("{}.nii.gz", s.id)), &s.label)?;
    }
    let meta = serde_json::json!({
        "channel_names": { "0": "CT" },
        "labels": { "background": 0, "lymph_node": 1 },
        "numTraining": samples.len(),
        "file_ending": ".nii.gz",
    });
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let splits = serde_json::json!([{ "train": ids, "val": [] }]);
    for (name, v) in [("dataset.json", meta), ("splits_final.json", splits)] {
        let p = dir.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap() + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
