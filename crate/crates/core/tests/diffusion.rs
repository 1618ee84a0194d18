mod common;

use lnsynth_core::conditions::ConditionStack;
use lnsynth_core::denoiser::{DenoiserState, Weights};
use lnsynth_core::diffusion::{
    p_sample_step, posterior_mean, q_sample, reverse_process, sample_loop, smooth, train, training_loss, ClampedX0,
    EpsilonModel, NetworkModel, PatchSource, TrainOptions, TrainSession,
};
use lnsynth_core::schedule::{NoiseSchedule, SigmaMode};
use lnsynth_core::volume::{Geometry, ScalarVolume};
use lnsynth_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn vol(shape: [usize; 3], data: Vec<f64>) -> ScalarVolume {
    ScalarVolume::new(Geometry::unit(shape), data.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn cosine(steps: usize) -> NoiseSchedule {
    NoiseSchedule::cosine(steps, 0.008, SigmaMode::Posterior).unwrap()
}

struct ZeroEps;

impl EpsilonModel for ZeroEps {
    fn predict_eps(&self, x_t: &[f64], _: &ConditionStack, _: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; x_t.len()])
    }
}

fn empty_condition(shape: [usize; 3]) -> ConditionStack {
    let n = shape.iter().product();
    ConditionStack::new(shape, 1, 0, vec![0; n], vec![0; n]).unwrap()
}

#[test]
fn q_sample_zero_noise_and_zero_signal() {
    let sched = cosine(20);
    let x0 = vol([2, 2, 2], common::normals(8, 1));
    let eps = vol([2, 2, 2], common::normals(8, 2));
    let zero = vol([2, 2, 2], vec![0.0; 8]);
    let t = 7;
    let a = q_sample(&x0, t, &zero, &sched).unwrap();
    let b = q_sample(&zero, t, &eps, &sched).unwrap();
    for i in 0..8 {
        assert_eq!(a.data()[i], (sched.alpha_bar(t).sqrt() * x0.data()[i] as f64) as f32);
        assert_eq!(b.data()[i], ((1.0 - sched.alpha_bar(t)).sqrt() * eps.data()[i] as f64) as f32);
    }
}

#[test]
fn q_sample_validates_inputs() {
    let sched = cosine(5);
    let x0 = vol([2, 2, 2], vec![0.0; 8]);
    let other = vol([2, 2, 1], vec![0.0; 4]);
    assert!(matches!(q_sample(&x0, 1, &other, &sched), Err(Error::Shape { .. })));
    assert!(matches!(q_sample(&x0, 0, &x0, &sched), Err(Error::Timestep { .. })));
    assert!(matches!(q_sample(&x0, 6, &x0, &sched), Err(Error::Timestep { .. })));
}

#[test]
fn p_sample_at_t1_inverts_q_sample() {
    let sched = cosine(300);
    let x0 = vol([4, 4, 4], common::normals(64, 3));
    let eps = vol([4, 4, 4], common::normals(64, 4));
    let z = vol([4, 4, 4], common::normals(64, 5));
    let x1 = q_sample(&x0, 1, &eps, &sched).unwrap();
    let back = p_sample_step(&x1, &eps, 1, &z, &sched).unwrap();
    for (a, b) in back.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn p_sample_with_zero_prediction_and_noise_rescales() {
    let sched = cosine(10);
    let x = vol([2, 2, 2], common::normals(8, 6));
    let zero = vol([2, 2, 2], vec![0.0; 8]);
    let out = p_sample_step(&x, &zero, 4, &zero, &sched).unwrap();
    for (o, v) in out.data().iter().zip(x.data()) {
        assert_eq!(*o, (*v as f64 / sched.alpha(4).sqrt()) as f32);
    }
}

#[test]
fn p_sample_matches_scalar_arithmetic_on_three_steps() {
    let betas = vec![0.1, 0.2, 0.3];
    let sched = NoiseSchedule::from_betas(betas.clone(), SigmaMode::Posterior).unwrap();
    let (x, e, z) = (0.7, -0.4, 1.3);
    for t in 1..=3 {
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let ab: f64 = alpha[..t].iter().product();
        let ab_prev: f64 = alpha[..t - 1].iter().product();
        let var = if t == 1 { 0.0 } else { (1.0 - ab_prev) / (1.0 - ab) * betas[t - 1] };
        let want = (x - betas[t - 1] / (1.0 - ab).sqrt() * e) / alpha[t - 1].sqrt() + var.sqrt() * z;
        let one = |v: f64| vol([1, 1, 1], vec![v]);
        let got = p_sample_step(&one(x), &one(e), t, &one(z), &sched).unwrap();
        assert!((got.data()[0] as f64 - want).abs() < 1e-6, "t = {t}");
    }
}

proptest! {
    #[test]
    fn true_noise_step_lands_on_posterior_mean(t in 1usize..=100, seed in 0u64..1000) {
        let sched = cosine(100);
        let x0 = vol([2, 2, 2], common::normals(8, seed));
        let eps = vol([2, 2, 2], common::normals(8, seed + 1));
        let zero = vol([2, 2, 2], vec![0.0; 8]);
        let x_t = q_sample(&x0, t, &eps, &sched).unwrap();
        let step = p_sample_step(&x_t, &eps, t, &zero, &sched).unwrap();
        let mu = posterior_mean(&x_t, &x0, t, &sched).unwrap();
        for (a, b) in step.data().iter().zip(mu.data()) {
            prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }
}

#[test]
fn training_loss_cases() {
    let a = vol([4, 4, 4], common::normals(64, 7));
    let b = vol([4, 4, 4], common::normals(64, 8));
    assert_eq!(training_loss(&a, &a).unwrap(), 0.0);
    let ones = vol([2, 2, 2], vec![1.0; 8]);
    let zeros = vol([2, 2, 2], vec![0.0; 8]);
    assert_eq!(training_loss(&ones, &zeros).unwrap(), 1.0);
    let mut want = 0.0;
    for i in 0..64 {
        want += (a.data()[i] as f64 - b.data()[i] as f64).abs();
    }
    assert!((training_loss(&a, &b).unwrap() - want / 64.0).abs() < 1e-12);
    assert!(training_loss(&a, &ones).is_err());
}

#[test]
fn zero_predictor_sampling_follows_the_scalar_recursion() {
    let sched = cosine(12);
    let shape = [2, 2, 2];
    let cond = empty_condition(shape);
    let out = sample_loop(&ZeroEps, &cond, &sched, 42, Geometry::unit(shape)).unwrap();
    // draw order: x_T, then z_T, ..., z_2
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut x: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=12).rev() {
        let z: Vec<f64> = if t > 1 { (0..8).map(|_| rng.sample(StandardNormal)).collect() } else { vec![0.0; 8] };
        for i in 0..8 {
            x[i] = x[i] / sched.alpha(t).sqrt() + sched.sigma(t) * z[i];
        }
    }
    for (a, b) in out.data().iter().zip(&x) {
        assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn single_step_sampling_only_rescales() {
    let sched = cosine(1);
    let shape = [2, 2, 2];
    let x1 = common::normals(8, 9);
    let out = reverse_process(&ZeroEps, &empty_condition(shape), &sched, x1.clone(), |_| unreachable!()).unwrap();
    for (o, x) in out.iter().zip(&x1) {
        assert!((o - x / sched.alpha(1).sqrt()).abs() < 1e-12);
    }
}

/// Predicts the ε that maps `x_t` back to a fixed `x0`.
struct Oracle(Vec<f64>, NoiseSchedule);

impl EpsilonModel for Oracle {
    fn predict_eps(&self, x_t: &[f64], _: &ConditionStack, t: usize) -> Result<Vec<f64>> {
        let ab = self.1.alpha_bar(t);
        Ok(x_t.iter().zip(&self.0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
    }
}

#[test]
fn clamping_leaves_in_range_estimates_alone() {
    let sched = cosine(20);
    let x0: Vec<f64> = common::normals(8, 1).into_iter().map(|v| v.clamp(-0.9, 0.9)).collect();
    let cond = empty_condition([2, 2, 2]);
    let x_t = common::normals(8, 2);
    for t in [1, 7, 20] {
        let raw = Oracle(x0.clone(), sched.clone()).predict_eps(&x_t, &cond, t).unwrap();
        let clamped = ClampedX0 { inner: Oracle(x0.clone(), sched.clone()), sched: &sched }.predict_eps(&x_t, &cond, t).unwrap();
        for (a, b) in raw.iter().zip(&clamped) {
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "t = {t}: {a} vs {b}");
        }
    }
}

#[test]
fn clamping_pulls_estimates_into_range() {
    let sched = cosine(20);
    let x0 = vec![-3.0, -1.0, 0.0, 0.5, 1.0, 2.0, 40.0, -0.2];
    let model = ClampedX0 { inner: Oracle(x0.clone(), sched.clone()), sched: &sched };
    let out = sample_loop(&model, &empty_condition([2, 2, 2]), &sched, 5, Geometry::unit([2, 2, 2])).unwrap();
    for (o, x) in out.data().iter().zip(&x0) {
        assert!((*o as f64 - x.clamp(-1.0, 1.0)).abs() < 1e-5, "{o} vs {x}");
    }
    let zero = ClampedX0 { inner: ZeroEps, sched: &sched };
    let out = sample_loop(&zero, &empty_condition([2, 2, 2]), &sched, 5, Geometry::unit([2, 2, 2])).unwrap();
    assert!(out.data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
}

#[test]
fn network_sampling_is_deterministic() {
    let cfg = common::tiny_config(2);
    let state = DenoiserState::init(cfg.clone(), 3).unwrap();
    let net = state.network().unwrap();
    let model = NetworkModel::new(&net, &state, Weights::Ema);
    let cond = common::random_condition(cfg.patch_shape, 2, 0.2, 1);
    let sched = cosine(5);
    let a = sample_loop(&model, &cond, &sched, 11, Geometry::unit(cfg.patch_shape)).unwrap();
    let b = sample_loop(&model, &cond, &sched, 11, Geometry::unit(cfg.patch_shape)).unwrap();
    let c = sample_loop(&model, &cond, &sched, 12, Geometry::unit(cfg.patch_shape)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

struct Fixed {
    x0: Vec<f64>,
    cond: ConditionStack,
}

impl PatchSource for Fixed {
    fn next_patch(&mut self, _: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionStack)> {
        Ok((self.x0.clone(), self.cond.clone()))
    }
}

fn fixed_source(seed: u64) -> Fixed {
    let cond = common::random_condition([8; 3], 2, 0.1, seed);
    let x0 = cond.ln_mask().iter().map(|v| if *v != 0 { 0.5 } else { -0.2 }).collect();
    Fixed { x0, cond }
}

#[test]
fn zero_iterations_leave_the_state_alone() {
    let state = DenoiserState::init(common::tiny_config(2), 0).unwrap();
    let opts = TrainOptions { iterations: 0, ..TrainOptions::default() };
    let mut session = TrainSession::new(state.clone(), &opts);
    let mut calls = 0;
    let losses = train(&mut session, &mut fixed_source(0), &cosine(10), &opts, &mut Vec::new(), &mut |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert!(losses.is_empty());
    assert_eq!(calls, 0);
    assert_eq!(session.state.params, state.params);
    assert_eq!(session.state.ema, state.ema);
}

#[test]
fn default_optimizer_settings_reach_the_log() {
    let opts = TrainOptions { iterations: 3, checkpoint_every: 2, ..TrainOptions::default() };
    assert_eq!((opts.lr, opts.beta1, opts.beta2, opts.ema_decay), (1e-4, 0.9, 0.999, 0.995));
    let mut session = TrainSession::new(DenoiserState::init(common::tiny_config(2), 0).unwrap(), &opts);
    let mut log = Vec::new();
    let mut saved = Vec::new();
    train(&mut session, &mut fixed_source(1), &cosine(10), &opts, &mut log, &mut |s| {
        saved.push(s.iteration);
        Ok(())
    })
    .unwrap();
    let log = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines[0].contains("lr=0.0001 beta1=0.9 beta2=0.999"), "{}", lines[0]);
    assert!(lines[0].contains("batch_size=1"));
    assert_eq!(lines[1], "# iteration, loss, lr, wall_ms");
    assert_eq!(lines.len(), 5);
    for (i, l) in lines[2..].iter().enumerate() {
        let fields: Vec<&str> = l.split(", ").collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[1].parse::<f64>().unwrap() >= 0.0);
        assert_eq!(fields[2], "0.0001");
    }
    assert_eq!(saved, vec![2, 3]);
    assert_ne!(session.state.params, session.state.ema);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let state = DenoiserState::init(common::tiny_config(2), 5).unwrap();
    let sched = cosine(10);
    let full_opts = TrainOptions { iterations: 4, lr: 1e-3, ..TrainOptions::default() };
    let mut full = TrainSession::new(state.clone(), &full_opts);
    let a = train(&mut full, &mut fixed_source(2), &sched, &full_opts, &mut std::io::sink(), &mut |_| Ok(())).unwrap();

    let half_opts = TrainOptions { iterations: 2, ..full_opts.clone() };
    let mut part = TrainSession::new(state, &half_opts);
    let mut b = train(&mut part, &mut fixed_source(2), &sched, &half_opts, &mut std::io::sink(), &mut |_| Ok(())).unwrap();
    b.extend(train(&mut part, &mut fixed_source(2), &sched, &full_opts, &mut std::io::sink(), &mut |_| Ok(())).unwrap());
    assert_eq!(a, b);
    assert_eq!(full.state.params, part.state.params);
    assert_eq!(full.state.ema, part.state.ema);
}

#[test]
fn non_finite_loss_names_the_iteration() {
    let mut src = fixed_source(3);
    src.x0[0] = f64::NAN;
    let opts = TrainOptions { iterations: 3, ..TrainOptions::default() };
    let mut session = TrainSession::new(DenoiserState::init(common::tiny_config(2), 0).unwrap(), &opts);
    let err = train(&mut session, &mut src, &cosine(10), &opts, &mut std::io::sink(), &mut |_| Ok(())).unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("iteration 1"), "{msg}"),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn overfitting_one_phantom_patch_halves_the_loss() {
    use lnsynth_core::config::RunConfig;
    use lnsynth_core::dataset::{centred_patch, prepare_case};
    use lnsynth_core::phantom::{generate_phantom, PhantomSpec};

    let run = RunConfig::desk();
    let ph = generate_phantom(&PhantomSpec { grid: [32; 3], seed: 4, ..PhantomSpec::default() }).unwrap();
    let case = prepare_case("p", &ph.image, &ph.anatomy_raw, &ph.ln_mask, &run.prepare, &run.anatomy).unwrap();
    let mut cfg = run.denoiser.clone();
    cfg.base_channels = 4;
    cfg.norm_groups = 2;
    let patch = centred_patch(&case, cfg.patch_shape, &run.anatomy).unwrap();
    let mut src = Fixed { x0: patch.image, cond: patch.condition };
    let opts = TrainOptions { iterations: 200, lr: 1e-3, ..TrainOptions::default() };
    let mut session = TrainSession::new(DenoiserState::init(cfg, 0).unwrap(), &opts);
    let losses = train(&mut session, &mut src, &run.schedule.build().unwrap(), &opts, &mut std::io::sink(), &mut |_| Ok(())).unwrap();
    let smoothed = smooth(&losses, 0.95);
    assert!(*smoothed.last().unwrap() < 0.5 * losses[0], "first {} final smoothed {}", losses[0], smoothed.last().unwrap());
}
