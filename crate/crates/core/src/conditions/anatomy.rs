//! Anatomical condition masks and the channel stack fed to the denoiser.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::components::{label, Connectivity};
use crate::volume::{Bounds, Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnatomyConfig {
    /// Raw segmenter labels kept as organs; relabelled densely in sorted order.
    pub organ_labels: Vec<u16>,
    /// Pre-window intensities below this are air.
    pub air_threshold: f64,
    /// Total label count C: organs + air + body.
    pub channels: usize,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        Self { organ_labels: (1..=12).collect(), air_threshold: -500.0, channels: 14 }
    }
}

impl AnatomyConfig {
    pub fn organ_count(&self) -> usize {
        let mut labels = self.organ_labels.clone();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    pub fn air_label(&self) -> u16 {
        self.organ_count() as u16 + 1
    }

    pub fn body_label(&self) -> u16 {
        self.organ_count() as u16 + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.organ_labels.contains(&0) {
            return Err(Error::Config("organ_labels must not contain background label 0".into()));
        }
        if self.organ_count() + 2 != self.channels {
            return Err(Error::Config(format!(
                "{} organ labels + air + body = {} labels, but anatomy channels = {}",
                self.organ_count(),
                self.organ_count() + 2,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Organs keep their (dense) label; remaining voxels below the air
/// threshold become air, and the largest 6-connected non-air region becomes
/// body.
pub fn build_anatomy_mask(raw: &LabelVolume, image: &ScalarVolume, cfg: &AnatomyConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    if !raw.geometry().matches(image.geometry()) {
        return Err(Error::shape("build_anatomy_mask", "raw labels and image grids differ"));
    }
    let mut organs = cfg.organ_labels.clone();
    organs.sort_unstable();
    organs.dedup();
    let remap: BTreeMap<u16, u16> = organs.iter().enumerate().map(|(i, l)| (*l, i as u16 + 1)).collect();
    let thr = cfg.air_threshold;
    let tissue: Vec<bool> = image.data().iter().map(|v| (*v as f64) >= thr).collect();
    let comps = label(&tissue, image.shape(), Connectivity::Six);
    let body = comps.largest();
    let (air_l, body_l) = (cfg.air_label(), cfg.body_label());
    let data = raw
        .data()
        .iter()
        .zip(&tissue)
        .zip(&comps.labels)
        .map(|((r, t), c)| match remap.get(r) {
            Some(dense) => *dense,
            None if !t => air_l,
            None if Some(*c) == body => body_l,
            None => 0,
        })
        .collect();
    let mut table = BTreeMap::new();
    for (raw_label, dense) in &remap {
        let name = raw.label_table.get(raw_label).cloned().unwrap_or_else(|| format!("organ_{raw_label}"));
        table.insert(*dense, name);
    }
    table.insert(air_l, "air".to_string());
    table.insert(body_l, "body".to_string());
    Ok(LabelVolume::new(*image.geometry(), data)?.with_table(table))
}

/// Channel `k − 1` is the indicator of label `k`; background has no channel.
pub fn one_hot(mask: &LabelVolume, channels: usize) -> Result<Vec<u8>> {
    let n = mask.data().len();
    let mut out = vec![0u8; channels * n];
    for (i, l) in mask.data().iter().enumerate() {
        let l = *l as usize;
        if l > channels {
            return Err(Error::Data(format!("label {l} exceeds channel count {channels}")));
        }
        if l > 0 {
            out[(l - 1) * n + i] = 1;
        }
    }
    Ok(out)
}

/// Condition `c = c_a* ⊕ c_m` on one patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionStack {
    shape: [usize; 3],
    channels: usize,
    organ_channels: usize,
    anatomy: Vec<u8>,
    ln_mask: Vec<u8>,
}

impl ConditionStack {
    /// `anatomy` is channels-first `[channels, shape]`; the first
    /// `organ_channels` channels are organs.
    pub fn new(shape: [usize; 3], channels: usize, organ_channels: usize, anatomy: Vec<u8>, ln_mask: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if anatomy.len() != channels * n || ln_mask.len() != n {
            return Err(Error::shape(
                "condition stack",
                format!("{} anatomy / {} mask values for {channels} channels on {shape:?}", anatomy.len(), ln_mask.len()),
            ));
        }
        if organ_channels > channels {
            return Err(Error::Invalid("organ channel count exceeds channel count".into()));
        }
        if anatomy.iter().chain(&ln_mask).any(|v| *v > 1) {
            return Err(Error::Data("condition channels must be binary".into()));
        }
        Ok(Self { shape, channels, organ_channels, anatomy, ln_mask })
    }

    pub fn from_volumes(anatomy: &LabelVolume, ln_mask: &LabelVolume, cfg: &AnatomyConfig) -> Result<Self> {
        if !anatomy.geometry().matches(ln_mask.geometry()) {
            return Err(Error::shape("condition stack", "anatomy and lymph-node grids differ"));
        }
        if !ln_mask.is_binary() {
            return Err(Error::Data("lymph-node mask is not binary".into()));
        }
        let oh = one_hot(anatomy, cfg.channels)?;
        let ln = ln_mask.data().iter().map(|v| *v as u8).collect();
        Self::new(anatomy.shape(), cfg.channels, cfg.organ_count(), oh, ln)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> usize {
        self.ln_mask.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn organ_channels(&self) -> usize {
        self.organ_channels
    }

    pub fn anatomy(&self) -> &[u8] {
        &self.anatomy
    }

    pub fn anatomy_channel(&self, c: usize) -> &[u8] {
        let n = self.voxels();
        &self.anatomy[c * n..(c + 1) * n]
    }

    pub fn ln_mask(&self) -> &[u8] {
        &self.ln_mask
    }

    pub fn with_ln_mask(&self, ln_mask: Vec<u8>) -> Result<Self> {
        Self::new(self.shape, self.channels, self.organ_channels, self.anatomy.clone(), ln_mask)
    }

    /// Union of the organ channels.
    pub fn organ_occupancy(&self) -> Vec<bool> {
        let n = self.voxels();
        let mut occ = vec![false; n];
        for c in 0..self.organ_channels {
            for (o, v) in occ.iter_mut().zip(&self.anatomy[c * n..(c + 1) * n]) {
                *o |= *v != 0;
            }
        }
        occ
    }

    pub fn ln_volume(&self, geom: Geometry) -> Result<LabelVolume> {
        LabelVolume::new(geom, self.ln_mask.iter().map(|v| *v as u16).collect())
    }

    /// Collapses the one-hot channels back to a label grid (highest channel
    /// wins where channels overlap).
    pub fn anatomy_labels(&self, geom: Geometry) -> Result<LabelVolume> {
        let n = self.voxels();
        let mut data = vec![0u16; n];
        for c in 0..self.channels {
            for (d, v) in data.iter_mut().zip(&self.anatomy[c * n..(c + 1) * n]) {
                if *v != 0 {
                    *d = c as u16 + 1;
                }
            }
        }
        LabelVolume::new(geom, data)
    }
}

/// Patch-sized window for a prepared case: centred on the lymph-node box
/// (with optional jitter) and clamped to the grid. Axes shorter than the
/// patch are padded afterwards by [`extract_patch`].
pub fn patch_window(grid: [usize; 3], ln_box: &Bounds, patch: [usize; 3], jitter: [isize; 3]) -> [isize; 3] {
    std::array::from_fn(|a| {
        let centre = (ln_box.lo[a] + ln_box.hi[a]) as isize / 2 + jitter[a];
        let start = centre - patch[a] as isize / 2;
        if grid[a] >= patch[a] {
            start.clamp(0, (grid[a] - patch[a]) as isize)
        } else {
            -(((patch[a] - grid[a]) / 2) as isize)
        }
    })
}

/// Copies a patch starting at `start` (may be negative or overhang); voxels
/// outside the source take `fill`.
pub fn extract_patch<T: Copy>(data: &[T], grid: [usize; 3], start: [isize; 3], patch: [usize; 3], fill: T) -> Vec<T> {
    let mut out = Vec::with_capacity(patch.iter().product());
    for z in 0..patch[0] {
        for y in 0..patch[1] {
            for x in 0..patch[2] {
                let p = [start[0] + z as isize, start[1] + y as isize, start[2] + x as isize];
                let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < grid[a]);
                out.push(if inside {
                    data[(p[0] as usize * grid[1] + p[1] as usize) * grid[2] + p[2] as usize]
                } else {
                    fill
                });
            }
        }
    }
    out
}
