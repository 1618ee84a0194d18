#![allow(dead_code)]

pub mod metric_oracle;
pub mod oracle;

use lnsynth_core::conditions::ConditionStack;
use lnsynth_core::denoiser::{AttentionMode, DenoiserConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8³ patch, two levels, transformer at 4³.
pub fn tiny_config(anatomy_channels: usize) -> DenoiserConfig {
    DenoiserConfig {
        patch_shape: [8; 3],
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        num_res_blocks: 1,
        anatomy_channels,
        attention_resolution: 4,
        time_embed_dim: 8,
        attention_mode: AttentionMode::LD,
        num_heads: 2,
        context_dim: 4,
        mask_encoder_channels: 4,
        norm_groups: 2,
        ..DenoiserConfig::default()
    }
}

/// Anatomy with disjoint random labels (implicit background) and a
/// lymph-node mask filled with probability `ln_p`.
pub fn random_condition(shape: [usize; 3], channels: usize, ln_p: f64, seed: u64) -> ConditionStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut anatomy = vec![0u8; channels * n];
    for i in 0..n {
        let l = rng.random_range(0..=channels);
        if l > 0 {
            anatomy[(l - 1) * n + i] = 1;
        }
    }
    let ln = (0..n).map(|_| rng.random_bool(ln_p) as u8).collect();
    ConditionStack::new(shape, channels, channels.saturating_sub(2), anatomy, ln).unwrap()
}

pub fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}
