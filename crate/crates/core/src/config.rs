//! Run configuration, read from one TOML file per run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditions::{AnatomyConfig, TransformParams};
use crate::denoiser::{DenoiserConfig, Weights};
use crate::diffusion::TrainOptions;
use crate::schedule::{NoiseSchedule, SigmaMode};
use crate::seg::SegConfig;
use crate::{Error, Result};

pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// ROI growth around the lymph-node box for training data.
    pub roi_expansion_mm: f64,
    /// ROI growth used when segmenting test cases.
    pub test_roi_expansion_mm: f64,
    pub spacing_mm: [f64; 3],
    /// Intensity window `[lo, hi]` mapped onto [-1, 1].
    pub window: [f64; 2],
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { roi_expansion_mm: 100.0, test_roi_expansion_mm: 50.0, spacing_mm: [1.0; 3], window: [-120.0, 240.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub offset: f64,
    pub sigma: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 300, offset: 0.008, sigma: SigmaMode::Posterior }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.steps, self.offset, self.sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub weights: Weights,
    /// Clamp each step's x̂0 estimate to the normalized intensity range.
    pub clip_denoised: bool,
    pub transform: TransformParams,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { weights: Weights::Ema, clip_denoised: true, transform: TransformParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub prepare: PrepareConfig,
    pub anatomy: AnatomyConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub training: TrainOptions,
    pub sampling: SamplingConfig,
    pub segmentation: SegConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the full configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.anatomy.validate()?;
        self.denoiser.validate()?;
        self.training.validate()?;
        self.sampling.transform.validate()?;
        self.segmentation.validate()?;
        self.schedule.build()?;
        let p = &self.prepare;
        if !(p.window[0] < p.window[1]) {
            return Err(Error::Config(format!("prepare.window must satisfy lo < hi, got {:?}", p.window)));
        }
        if p.spacing_mm.iter().any(|s| !(*s > 0.0)) || !(p.roi_expansion_mm >= 0.0) || !(p.test_roi_expansion_mm >= 0.0) {
            return Err(Error::Config("prepare spacing must be positive and ROI expansions nonnegative".into()));
        }
        if self.denoiser.anatomy_channels != self.anatomy.channels {
            return Err(Error::Config(format!(
                "denoiser.anatomy_channels ({}) must equal anatomy.channels ({})",
                self.denoiser.anatomy_channels, self.anatomy.channels
            )));
        }
        Ok(())
    }

    /// Small settings for 32³ phantoms on a CPU.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.anatomy = AnatomyConfig { organ_labels: vec![1, 2, 3], air_threshold: -500.0, channels: 5 };
        cfg.schedule.steps = 100;
        cfg.denoiser = DenoiserConfig {
            patch_shape: [32; 3],
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks: 1,
            anatomy_channels: 5,
            attention_resolution: 8,
            time_embed_dim: 32,
            num_heads: 2,
            context_dim: 16,
            mask_encoder_channels: 8,
            norm_groups: 4,
            ..DenoiserConfig::default()
        };
        cfg.training.iterations = 2_000;
        cfg.training.lr = 1e-3;
        cfg.training.checkpoint_every = 500;
        cfg.segmentation = SegConfig::desk();
        cfg
    }
}
