//! Cosine noise schedule and the per-timestep coefficients derived from it.
//!
//! Timesteps are `1..=T` at the API surface and stored 0-based.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// σ_t² = β̃_t
    #[default]
    Posterior,
    /// σ_t² = β_t
    Beta,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    sigma: Vec<f64>,
    mode: SigmaMode,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    (((t / steps + s) / (1.0 + s)) * FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize, s: f64, mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one timestep".into()));
        }
        if !s.is_finite() || s <= 0.0 || s >= 0.1 {
            return Err(Error::Invalid(format!("cosine offset s must lie in (0, 0.1), got {s}")));
        }
        let n = steps as f64;
        let f0 = cosine_f(0.0, n, s);
        let beta: Vec<f64> = (1..=steps)
            .map(|t| {
                let prev = cosine_f((t - 1) as f64, n, s) / f0;
                let cur = cosine_f(t as f64, n, s) / f0;
                (1.0 - cur / prev).clamp(0.0, MAX_BETA)
            })
            .collect();
        Self::from_betas(beta, mode)
    }

    /// Builds every derived vector from β. ᾱ is accumulated as an exact
    /// running product of α so the cumulative-product identity holds.
    pub fn from_betas(beta: Vec<f64>, mode: SigmaMode) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Invalid("schedule needs at least one timestep".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var: Vec<f64> = (0..beta.len())
            .map(|i| if i == 0 { 0.0 } else { (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i] })
            .collect();
        let sigma = match mode {
            SigmaMode::Posterior => posterior_var.iter().map(|v| v.sqrt()).collect(),
            SigmaMode::Beta => beta.iter().map(|b| b.sqrt()).collect(),
        };
        Ok(Self { beta, alpha, alpha_bar, posterior_var, sigma, mode })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn mode(&self) -> SigmaMode {
        self.mode
    }

    pub fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// ᾱ_{t−1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 { 1.0 } else { self.alpha_bar[t - 2] }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    /// Sampling noise scale; the final step (t = 1) never adds noise.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 1 { 0.0 } else { self.sigma[t - 1] }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_var
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}
