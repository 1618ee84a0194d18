//! Forward noising, reverse sampling, the ε-prediction objective and the
//! training loop.

use std::io::Write;
use std::time::Instant;

use lnsynth_grad::{Adam, Bound, Ema, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionStack;
use crate::denoiser::{Denoiser, DenoiserState, Weights};
use crate::schedule::NoiseSchedule;
use crate::volume::{Geometry, ScalarVolume};
use crate::{Error, Result};

fn same_grid(op: &str, a: &ScalarVolume, b: &ScalarVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &ScalarVolume, b: &ScalarVolume, f: impl Fn(f64, f64) -> f64) -> Result<ScalarVolume> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x as f64, *y as f64) as f32).collect();
    ScalarVolume::new(*a.geometry(), data)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
pub fn q_sample(x0: &ScalarVolume, t: usize, eps: &ScalarVolume, sched: &NoiseSchedule) -> Result<ScalarVolume> {
    same_grid("q_sample", x0, eps)?;
    sched.check(t)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    zip_map(x0, eps, |x, e| a * x + b * e)
}

fn q_sample_f64(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

fn p_step_f64(x: &mut [f64], eps_hat: &[f64], z: Option<&[f64]>, t: usize, sched: &NoiseSchedule) {
    let alpha = sched.alpha(t);
    let inv = 1.0 / alpha.sqrt();
    let c = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.sigma(t);
    for (i, (xi, e)) in x.iter_mut().zip(eps_hat).enumerate() {
        let noise = z.map_or(0.0, |z| sigma * z[i]);
        *xi = inv * (*xi - c * e) + noise;
    }
}

/// `x_{t−1} = (1/√α_t)(x_t − (1−α_t)/√(1−ᾱ_t)·ε̂) + σ_t·z`. At t = 1 the
/// noise term is dropped whatever `z` holds.
pub fn p_sample_step(
    x_t: &ScalarVolume,
    eps_hat: &ScalarVolume,
    t: usize,
    z: &ScalarVolume,
    sched: &NoiseSchedule,
) -> Result<ScalarVolume> {
    same_grid("p_sample_step", x_t, eps_hat)?;
    same_grid("p_sample_step", x_t, z)?;
    sched.check(t)?;
    let mut x = x_t.to_f64();
    let z = z.to_f64();
    p_step_f64(&mut x, &eps_hat.to_f64(), Some(&z), t, sched);
    ScalarVolume::new(*x_t.geometry(), x.into_iter().map(|v| v as f32).collect())
}

/// Mean of q(x_{t−1} | x_t, x0).
pub fn posterior_mean(x_t: &ScalarVolume, x0: &ScalarVolume, t: usize, sched: &NoiseSchedule) -> Result<ScalarVolume> {
    same_grid("posterior_mean", x_t, x0)?;
    sched.check(t)?;
    let (ab, ab_prev, beta) = (sched.alpha_bar(t), sched.alpha_bar_prev(t), sched.beta(t));
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    zip_map(x0, x_t, |a, b| c0 * a + ct * b)
}

/// Mean absolute difference.
pub fn training_loss(eps: &ScalarVolume, eps_hat: &ScalarVolume) -> Result<f64> {
    same_grid("training_loss", eps, eps_hat)?;
    let n = eps.data().len();
    let s: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(s / n as f64)
}

/// Anything that predicts ε̂ from a noisy patch.
pub trait EpsilonModel {
    fn predict_eps(&self, x_t: &[f64], cond: &ConditionStack, t: usize) -> Result<Vec<f64>>;
}

/// A network plus the parameter copy it should run with.
pub struct NetworkModel<'a> {
    pub net: &'a Denoiser,
    pub params: &'a lnsynth_grad::ParamStore,
}

impl<'a> NetworkModel<'a> {
    pub fn new(net: &'a Denoiser, state: &'a DenoiserState, which: Weights) -> Self {
        Self { net, params: state.weights(which) }
    }
}

impl EpsilonModel for NetworkModel<'_> {
    fn predict_eps(&self, x_t: &[f64], cond: &ConditionStack, t: usize) -> Result<Vec<f64>> {
        self.net.predict(self.params, x_t, cond, t, true)
    }
}

/// Wraps a model so each ε̂ is replaced by the noise implied by
/// `clamp(x̂0, −1, 1)`, where `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`. Feeding that to
/// the reverse step gives the posterior mean around the clamped estimate.
pub struct ClampedX0<'a, M: EpsilonModel> {
    pub inner: M,
    pub sched: &'a NoiseSchedule,
}

impl<M: EpsilonModel> EpsilonModel for ClampedX0<'_, M> {
    fn predict_eps(&self, x_t: &[f64], cond: &ConditionStack, t: usize) -> Result<Vec<f64>> {
        let mut eps = self.inner.predict_eps(x_t, cond, t)?;
        let (a, b) = (self.sched.alpha_bar(t).sqrt(), (1.0 - self.sched.alpha_bar(t)).sqrt());
        for (e, x) in eps.iter_mut().zip(x_t) {
            let x0 = ((x - b * *e) / a).clamp(-1.0, 1.0);
            *e = (x - a * x0) / b;
        }
        Ok(eps)
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs t = T..1 from `x_T`. `noise(t)` supplies z for t ≥ 2.
pub fn reverse_process(
    model: &dyn EpsilonModel,
    cond: &ConditionStack,
    sched: &NoiseSchedule,
    x_big_t: Vec<f64>,
    mut noise: impl FnMut(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    if x_big_t.len() != cond.voxels() {
        return Err(Error::shape("sample_loop", "initial noise does not match condition grid"));
    }
    let mut x = x_big_t;
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.predict_eps(&x, cond, t)?;
        if eps_hat.len() != x.len() {
            return Err(Error::shape("sample_loop", format!("model returned {} values for {} voxels", eps_hat.len(), x.len())));
        }
        let z = (t > 1).then(|| noise(t));
        p_step_f64(&mut x, &eps_hat, z.as_deref(), t, sched);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample values at timestep {t}")));
        }
    }
    Ok(x)
}

/// Ancestral sampling from `N(0, I)`. Draw order from the seeded stream:
/// x_T first, then z_T, …, z_2, each a full grid in buffer order.
pub fn sample_loop(model: &dyn EpsilonModel, cond: &ConditionStack, sched: &NoiseSchedule, seed: u64, geom: Geometry) -> Result<ScalarVolume> {
    if geom.shape != cond.shape() {
        return Err(Error::shape("sample_loop", format!("output grid {:?} vs condition {:?}", geom.shape, cond.shape())));
    }
    let n = cond.voxels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_big_t = normals(&mut rng, n);
    let x = reverse_process(model, cond, sched, x_big_t, |_| normals(&mut rng, n))?;
    ScalarVolume::new(geom, x.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 45_000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.995,
            checkpoint_every: 1_000,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && (0.0..=1.0).contains(&self.ema_decay);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2, self.adam_eps)
    }
}

/// Supplies `(x0, condition)` training patches.
pub trait PatchSource {
    fn next_patch(&mut self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionStack)>;
}

/// Everything needed to continue training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSession {
    pub state: DenoiserState,
    pub adam: Adam,
    pub iteration: u64,
}

impl TrainSession {
    pub fn new(state: DenoiserState, opts: &TrainOptions) -> Self {
        Self { state, adam: opts.adam(), iteration: 0 }
    }
}

/// One gradient of the L1 objective on a single patch; returns
/// `(loss, per-parameter gradients)`.
pub fn loss_and_grads(
    net: &Denoiser,
    params: &lnsynth_grad::ParamStore,
    x0: &[f64],
    cond: &ConditionStack,
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    sched.check(t)?;
    let x_t = q_sample_f64(x0, t, eps, sched);
    let g = Graph::new();
    let p = Bound::new(&g, params, true);
    let out = net.forward_graph(&p, &x_t, cond, t, true)?;
    let target = g.constant(Tensor::new(&g.shape(out), eps.to_vec())?);
    let loss = g.mean_abs_diff(out, target).map_err(Error::at("loss"))?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Default::default()));
    }
    let grads = g.backward(loss)?;
    Ok((value, p.grads(&grads)))
}

/// Runs `opts.iterations − session.iteration` more steps. Writes one
/// `iteration, loss, lr, wall_ms` line per step and calls `checkpoint`
/// every `checkpoint_every` iterations and at the end.
pub fn train(
    session: &mut TrainSession,
    source: &mut dyn PatchSource,
    sched: &NoiseSchedule,
    opts: &TrainOptions,
    log: &mut dyn Write,
    checkpoint: &mut dyn FnMut(&TrainSession) -> Result<()>,
) -> Result<Vec<f64>> {
    opts.validate()?;
    let net = session.state.network()?;
    let io = |e| Error::Data(format!("cannot write training log: {e}"));
    writeln!(
        log,
        "# optimizer adam lr={} beta1={} beta2={} eps={} ema_decay={} batch_size=1",
        opts.lr, opts.beta1, opts.beta2, opts.adam_eps, opts.ema_decay
    )
    .map_err(io)?;
    writeln!(log, "# iteration, loss, lr, wall_ms").map_err(io)?;
    let mut ema = Ema::from_parts(session.state.ema.clone(), opts.ema_decay);
    let mut losses = Vec::new();
    let n = session.state.config.patch_shape.iter().product();
    let steps = sched.steps();
    while session.iteration < opts.iterations {
        let started = Instant::now();
        let it = session.iteration + 1;
        // seeded per iteration so a resumed run matches an uninterrupted one
        let mut step_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ it.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (x0, cond) = source.next_patch(&mut step_rng)?;
        if x0.len() != n {
            return Err(Error::shape("train", format!("patch of {} voxels, expected {n}", x0.len())));
        }
        let t = step_rng.random_range(1..=steps);
        let eps = normals(&mut step_rng, n);
        let (loss, grads) = loss_and_grads(&net, &session.state.params, &x0, &cond, t, &eps, sched)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {it} (t = {t})")));
        }
        session.adam.step(&mut session.state.params, &grads)?;
        if !session.state.params.all_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after iteration {it}")));
        }
        ema.update(&session.state.params);
        session.state.ema = ema.params().clone();
        session.iteration = it;
        losses.push(loss);
        writeln!(log, "{it}, {loss:.6}, {}, {}", opts.lr, started.elapsed().as_millis()).map_err(io)?;
        if opts.checkpoint_every > 0 && it % opts.checkpoint_every == 0 {
            checkpoint(session)?;
        }
    }
    if !losses.is_empty() && (opts.checkpoint_every == 0 || session.iteration % opts.checkpoint_every != 0) {
        checkpoint(session)?;
    }
    log.flush().map_err(io)?;
    Ok(losses)
}

/// Exponentially smoothed copy of a loss curve.
pub fn smooth(losses: &[f64], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for l in losses {
        let v = match acc {
            None => *l,
            Some(a) => factor * a + (1.0 - factor) * l,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}
