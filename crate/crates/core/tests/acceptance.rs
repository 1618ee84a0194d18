//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 6`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::metric_oracle::{assd_oracle, components_oracle, node_recall_oracle};
use common::oracle::{oracle_config, scramble, st_inputs, transformer_oracle};
use lnsynth_core::components::{label, Connectivity};
use lnsynth_core::conditions::{transform_condition, AnatomyConfig, ConditionStack, NodeOutcome, TransformParams};
use lnsynth_core::config::RunConfig;
use lnsynth_core::dataset::{centred_patch, prepare_case, PatchSampler, PreparedCase};
use lnsynth_core::denoiser::{assemble_input, patch_geometry, AttentionMode, Denoiser, DenoiserState, Weights};
use lnsynth_core::diffusion::{loss_and_grads, p_sample_step, q_sample, sample_loop, smooth, train, ClampedX0, NetworkModel, TrainSession};
use lnsynth_core::metrics::{assd_masks, evaluate_dataset, node_recall_masks, voxel_overlap_metrics, EvalCase};
use lnsynth_core::phantom::{generate_phantom, PhantomSpec};
use lnsynth_core::schedule::{NoiseSchedule, SigmaMode};
use lnsynth_core::seg::{epoch_plan, infer_segmenter, train_segmenter, SampleRef, SegConfig, SegModel, SegSample, Strategy};
use lnsynth_core::volume::{Geometry, LabelVolume, ScalarVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for steps in [100, 300, 1000] {
        let s = NoiseSchedule::cosine(steps, 0.008, SigmaMode::Posterior).map_err(|e| e.to_string())?;
        let mut prod = 1.0;
        for t in 1..=steps {
            prod *= 1.0 - s.beta(t);
            let ab = s.alpha_bar(t);
            worst = worst.max((ab - prod).abs() / prod);
            ensure!(s.beta(t) <= 0.999, "beta_{t} = {} above the clip at T = {steps}", s.beta(t));
            if t > 1 {
                ensure!(ab < s.alpha_bar(t - 1), "alpha_bar not decreasing at t = {t}, T = {steps}");
            }
        }
    }
    ensure!(worst <= 1e-12, "cumulative product off by {worst:e} relative");
    let s300 = NoiseSchedule::cosine(300, 0.008, SigmaMode::Posterior).unwrap();
    ensure!(s300.alpha_bar(300) < 0.01, "alpha_bar_300 = {}", s300.alpha_bar(300));
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.2} s");
    Ok(format!("product error {worst:.1e}, alpha_bar_300 = {:.1e}, {secs:.3} s", s300.alpha_bar(300)))
}

fn volume(shape: [usize; 3], seed: u64, scale: f64) -> ScalarVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
    ScalarVolume::new(Geometry::unit(shape), data).unwrap()
}

/// Per-voxel mean and variance over draws stored draw-major.
fn moments(draws: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = draws.len() as f64;
    (0..draws[0].len())
        .map(|v| {
            let m = draws.iter().map(|d| d[v]).sum::<f64>() / n;
            let var = draws.iter().map(|d| (d[v] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var)
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let shape = [2; 3];
    let zero = ScalarVolume::filled(Geometry::unit(shape), 0.0);

    let sched = NoiseSchedule::cosine(100, 0.008, SigmaMode::Posterior).unwrap();
    let x0 = volume(shape, 1, 0.6);
    let eps = volume(shape, 2, 1.0);
    let x1 = q_sample(&x0, 1, &eps, &sched).unwrap();
    let back = p_sample_step(&x1, &eps, 1, &zero, &sched).unwrap();
    let inv = x0.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    ensure!(inv < 1e-5, "t = 1 inversion off by {inv:e}");

    const DRAWS: usize = 10_000;
    let mut worst_z = 0.0f64;
    for (k, (t, steps)) in [(1usize, 10usize), (5, 10), (40, 100), (150, 300)].into_iter().enumerate() {
        let sched = NoiseSchedule::cosine(steps, 0.008, SigmaMode::Posterior).unwrap();
        let x0: Vec<f64> = x0.data().iter().map(|v| *v as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let closed: Vec<Vec<f64>> =
            (0..DRAWS).map(|_| x0.iter().map(|x| a * x + b * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let stepwise: Vec<Vec<f64>> = (0..DRAWS)
            .map(|_| {
                let mut x = x0.clone();
                for s in 1..=t {
                    let (ra, rb) = (sched.alpha(s).sqrt(), sched.beta(s).sqrt());
                    for v in x.iter_mut() {
                        *v = ra * *v + rb * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                x
            })
            .collect();
        let n = DRAWS as f64;
        for ((mc, vc), (ms, vs)) in moments(&closed).into_iter().zip(moments(&stepwise)) {
            let z_mean = (mc - ms).abs() / (vc / n + vs / n).sqrt();
            let z_var = (vc - vs).abs() / (2.0 * vc * vc / (n - 1.0) + 2.0 * vs * vs / (n - 1.0)).sqrt();
            worst_z = worst_z.max(z_mean).max(z_var);
            ensure!(z_mean < 3.0 && z_var < 3.0, "t = {t}, T = {steps}: closed form and stepwise differ by {z_mean:.2} / {z_var:.2} SE");
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("inversion error {inv:.1e}, largest gap {worst_z:.2} SE over 4 (t, T) pairs, {secs:.1} s"))
}

fn criterion_3() -> Outcome {
    let cond = common::random_condition([128; 3], 14, 0.01, 1);
    let x = vec![0.0; 128 * 128 * 128];
    let input = assemble_input(&x, &cond, true, true).map_err(|e| e.to_string())?;
    ensure!(input.shape() == [16, 128, 128, 128], "assembled shape {:?}", input.shape());
    drop(input);

    let net = Denoiser::new(common::tiny_config(2)).unwrap();
    let mut params = net.init_params(3);
    scramble(&mut params, 3, 0.4);
    let empty = common::random_condition([8; 3], 2, 0.0, 4);
    let xv = volume([8; 3], 5, 1.0);
    let with = net.forward(&params, &xv, &empty, 7).unwrap();
    let without = net.forward_without_transformer(&params, &xv, &empty, 7).unwrap();
    ensure!(with.data() == without.data(), "empty lymph-node mask changed the output");
    let net = Denoiser::new(oracle_config()).unwrap();
    let (params, stage, h, tokens) = st_inputs(&net, 10);
    let zero = net.spatial_transformer_block(&params, &stage, &h, &tokens, &[0; 8], AttentionMode::LD).unwrap();
    ensure!(zero.data() == h.data(), "closed gate changed the transformer input");

    let net = Denoiser::new(oracle_config()).unwrap();
    let (params, stage, h, tokens) = st_inputs(&net, 11);
    let ld = net.spatial_transformer_block(&params, &stage, &h, &tokens, &[1; 8], AttentionMode::LD).unwrap();
    let ga = net.spatial_transformer_block(&params, &stage, &h, &tokens, &[0; 8], AttentionMode::GA).unwrap();
    ensure!(ld.data() == ga.data(), "LD with a saturated gate differs from GA");

    let gate = [1u8, 1, 0, 1, 0, 0, 0, 1];
    let got = net.spatial_transformer_block(&params, &stage, &h, &tokens, &gate, AttentionMode::LD).unwrap();
    let st = transformer_oracle(&params, &stage, &h, &tokens, net.config().norm_groups);
    let err = got
        .data()
        .iter()
        .enumerate()
        .map(|(i, g)| (g - (h.data()[i] + gate[i % 8] as f64 * st[i])).abs())
        .fold(0.0, f64::max);
    ensure!(err < 1e-5, "transformer differs from the dense oracle by {err:e}");
    Ok(format!("16 input channels at 128^3, bitwise no-op and saturation, oracle error {err:.1e}"))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let net = Denoiser::new(common::tiny_config(2)).unwrap();
    let mut params = net.init_params(1);
    scramble(&mut params, 1, 0.3);
    let cond = common::random_condition([8; 3], 2, 0.15, 2);
    let x0 = common::normals(512, 3).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>();
    let eps = common::normals(512, 4);
    let sched = NoiseSchedule::cosine(50, 0.008, SigmaMode::Posterior).unwrap();
    let t = 20;
    let (_, grads) = loss_and_grads(&net, &params, &x0, &cond, t, &eps, &sched).map_err(|e| e.to_string())?;
    let mut candidates: Vec<(String, usize)> = grads
        .iter()
        .flat_map(|(name, g)| g.data().iter().enumerate().filter(|(_, v)| v.abs() > 1e-6).map(move |(i, _)| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let h = 1e-3;
    for _ in 0..10 {
        let (name, i) = candidates.swap_remove(rng.random_range(0..candidates.len()));
        let analytic = grads[&name].data()[i];
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.get_mut(&name).unwrap().data_mut()[i] += delta;
            loss_and_grads(&net, &p, &x0, &cond, t, &eps, &sched).unwrap().0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        ensure!(rel <= 1e-2, "{name}[{i}]: analytic {analytic:e} vs numeric {numeric:e}");
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1} s");
    Ok(format!("10 parameters, worst relative error {worst:.1e}, {secs:.1} s"))
}

fn phantom_cases(seeds: std::ops::Range<u64>, cfg: &RunConfig) -> Vec<PreparedCase> {
    seeds
        .map(|s| {
            let ph = generate_phantom(&PhantomSpec { grid: [32; 3], seed: s, ..Default::default() }).unwrap();
            prepare_case(&format!("phantom_{s:03}"), &ph.image, &ph.anatomy_raw, &ph.ln_mask, &cfg.prepare, &cfg.anatomy).unwrap()
        })
        .collect()
}

fn node_count(stack: &ConditionStack) -> usize {
    let m: Vec<bool> = stack.ln_mask().iter().map(|v| *v != 0).collect();
    label(&m, stack.shape(), Connectivity::TwentySix).count
}

fn criterion_5() -> Outcome {
    let cfg = RunConfig::desk();
    let stacks: Vec<ConditionStack> =
        phantom_cases(0..20, &cfg).iter().map(|c| centred_patch(c, [32; 3], &cfg.anatomy).unwrap().condition).collect();
    let params = TransformParams::default();
    let (mut removed, mut fallbacks, mut multi) = (0, 0, 0);
    for call in 0..500u64 {
        let stack = &stacks[call as usize % stacks.len()];
        let (out, report) = transform_condition(stack, call, &params).map_err(|e| e.to_string())?;
        ensure!(out.anatomy() == stack.anatomy(), "call {call}: anatomy channels changed");
        let organs = out.organ_occupancy();
        let overlap = out.ln_mask().iter().zip(&organs).filter(|(l, o)| **l != 0 && **o).count();
        ensure!(overlap == 0, "call {call}: {overlap} lymph-node voxels on organs");
        let before = node_count(stack);
        let gone = report.outcomes.iter().filter(|o| **o == NodeOutcome::Removed).count();
        ensure!(gone <= 1 && (gone == 0 || before >= 2), "call {call}: removed {gone} of {before} nodes");
        ensure!(node_count(&out) == before - gone, "call {call}: {before} nodes, {gone} removed, {} after", node_count(&out));
        removed += gone;
        fallbacks += report.fallbacks();
        multi += (before >= 2) as usize;
    }
    Ok(format!("500 calls ({multi} with several nodes), {removed} removals, {fallbacks} kept originals, no violations"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_overlap, mut worst_assd) = (0.0f64, 0.0f64);
    for pair in 0..100 {
        let shape: [usize; 3] = std::array::from_fn(|_| rng.random_range(8..=16));
        let n: usize = shape.iter().product();
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..2.5));
        let (pa, pb) = (rng.random_range(0.01..0.3), rng.random_range(0.01..0.3));
        let mut a: Vec<bool> = (0..n).map(|_| rng.random_bool(pa)).collect();
        let mut b: Vec<bool> = (0..n).map(|_| rng.random_bool(pb)).collect();
        a[rng.random_range(0..n)] = true;
        b[rng.random_range(0..n)] = true;
        let geom = Geometry::new(shape, spacing).unwrap();
        let o = voxel_overlap_metrics(&LabelVolume::from_mask(geom, &a).unwrap(), &LabelVolume::from_mask(geom, &b).unwrap()).unwrap();
        let tp = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let (na, nb) = (a.iter().filter(|x| **x).count() as f64, b.iter().filter(|x| **x).count() as f64);
        let want = [2.0 * tp / (na + nb), tp / (na + nb - tp), tp / nb, tp / na];
        let got = [o.dsc, o.iou, o.recall, o.precision];
        let err = want.iter().zip(&got).map(|(w, g)| (w - g).abs()).fold(0.0, f64::max);
        worst_overlap = worst_overlap.max(err);
        ensure!(err <= 1e-9, "pair {pair}: overlap off by {err:e}");
        ensure!((o.dsc - 2.0 * o.iou / (1.0 + o.iou)).abs() <= 1e-12, "pair {pair}: Dice-Jaccard identity fails");
        let assd = assd_masks(&a, &b, shape, spacing).unwrap();
        let err = (assd - assd_oracle(&a, &b, shape, spacing)).abs();
        worst_assd = worst_assd.max(err);
        ensure!(err <= 1e-9, "pair {pair}: ASSD off by {err:e}");
        let nr = node_recall_masks(&a, &b, shape, 0.1).unwrap();
        let want = node_recall_oracle(&a, &b, shape, 0.1);
        ensure!(nr == want, "pair {pair}: NodeRecall {nr} vs oracle {want} over {} nodes", components_oracle(&b, shape).len());
    }
    Ok(format!("100 pairs, overlap error {worst_overlap:.1e}, ASSD error {worst_assd:.1e}, NodeRecall exact"))
}

/// Mean intensity inside the lymph-node mask minus mean over the other body voxels.
fn node_body_gap(img: &[f64], cond: &ConditionStack, body_channel: usize) -> f64 {
    let (ln, body) = (cond.ln_mask(), cond.anatomy_channel(body_channel));
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (i, v) in img.iter().enumerate() {
        if ln[i] != 0 {
            a += v;
            na += 1;
        } else if body[i] != 0 {
            b += v;
            nb += 1;
        }
    }
    a / na as f64 - b / nb.max(1) as f64
}

fn criterion_7(synthetic: &mut Vec<SegSample>) -> Outcome {
    let started = Instant::now();
    let cfg = RunConfig::desk();
    let cases = phantom_cases(0..8, &cfg);
    let anatomy: &AnatomyConfig = &cfg.anatomy;
    let body = anatomy.body_label() as usize - 1;
    let patches: Vec<_> = cases.iter().map(|c| centred_patch(c, cfg.denoiser.patch_shape, anatomy).unwrap()).collect();
    let train_gap = patches.iter().map(|p| node_body_gap(&p.image, &p.condition, body)).sum::<f64>() / patches.len() as f64;

    let sched = cfg.schedule.build().unwrap();
    ensure!(sched.steps() == 100 && cfg.training.iterations == 2000, "desk preset changed");
    let mut source = PatchSampler::new(cases, cfg.denoiser.patch_shape, anatomy.clone()).unwrap();
    let mut session = TrainSession::new(DenoiserState::init(cfg.denoiser.clone(), cfg.seed).unwrap(), &cfg.training);
    let losses = train(&mut session, &mut source, &sched, &cfg.training, &mut std::io::sink(), &mut |_| Ok(()))
        .map_err(|e| e.to_string())?;
    let trained = started.elapsed().as_secs_f64();
    let smoothed = smooth(&losses, 0.98);

    let net = session.state.network().unwrap();
    ensure!(cfg.sampling.clip_denoised, "desk preset samples without clamping");
    let model = ClampedX0 { inner: NetworkModel::new(&net, &session.state, Weights::Ema), sched: &sched };
    let geom = Geometry::new(cfg.denoiser.patch_shape, cfg.prepare.spacing_mm).unwrap();
    let (mut finite, mut inside, mut total, mut gap) = (true, 0usize, 0usize, 0.0);
    for (k, p) in patches.iter().enumerate() {
        let x = sample_loop(&model, &p.condition, &sched, 1000 + k as u64, patch_geometry(&cfg.denoiser)).map_err(|e| e.to_string())?;
        let v = x.to_f64();
        finite &= v.iter().all(|x| x.is_finite());
        inside += v.iter().filter(|x| x.abs() <= 1.5).count();
        total += v.len();
        gap += node_body_gap(&v, &p.condition, body);
        synthetic.push(SegSample {
            id: format!("synt_{k:03}"),
            image: ScalarVolume::new(geom, x.data().to_vec()).unwrap(),
            label: p.condition.ln_volume(geom).unwrap(),
        });
    }
    let gap = gap / patches.len() as f64;
    let frac = inside as f64 / total as f64;
    let detail = format!(
        "loss {:.3} -> {:.3} in {:.0} s, {:.2}% of voxels in [-1.5, 1.5], node-body gap {gap:.3} vs {train_gap:.3} in training",
        losses[0],
        smoothed.last().unwrap(),
        trained,
        100.0 * frac
    );
    ensure!(finite, "non-finite sample values; {detail}");
    ensure!(frac >= 0.99, "{detail}");
    ensure!(gap.signum() == train_gap.signum() && gap.abs() >= 0.25 * train_gap.abs(), "{detail}");
    Ok(detail)
}

fn criterion_8(synthetic: &[SegSample]) -> Outcome {
    let cfg = RunConfig::desk();
    ensure!(!synthetic.is_empty(), "no synthetic cases from criterion 7");
    let to_sample = |c: PreparedCase| SegSample { id: c.id, image: c.image, label: c.nodes };
    let real: Vec<SegSample> = phantom_cases(0..4, &cfg).into_iter().map(to_sample).collect();
    let test: Vec<PreparedCase> = phantom_cases(50..54, &cfg);

    let mut lines = Vec::new();
    for strategy in [Strategy::Real, Strategy::Synt, Strategy::RealSynt] {
        let seg = SegConfig { iterations: 100, checkpoint_every: 0, ..SegConfig::desk() };
        let mut model = SegModel::init(seg, strategy, 2).unwrap();
        let mut log = Vec::new();
        let losses = train_segmenter(&mut model, &real, synthetic, &mut log, &mut |_| Ok(())).map_err(|e| e.to_string())?;
        let head = losses[..10].iter().sum::<f64>() / 10.0;
        let tail = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        ensure!(tail < head, "{strategy}: loss did not decrease ({head:.3} -> {tail:.3})");
        let want_len = epoch_plan(strategy, real.len(), synthetic.len(), 2).unwrap().len();
        ensure!(
            String::from_utf8(log).unwrap().starts_with(&format!("# strategy {strategy} multiplier 2 epoch_length {want_len}\n")),
            "{strategy}: log header does not state the epoch composition"
        );
        let preds: Vec<LabelVolume> = test
            .iter()
            .map(|c| infer_segmenter(&model, &c.image, Some((&c.nodes, cfg.prepare.test_roi_expansion_mm))).unwrap())
            .collect();
        let cases: Vec<EvalCase> = test.iter().zip(&preds).map(|(c, p)| EvalCase { id: &c.id, pred: p, gt: &c.nodes }).collect();
        let report = evaluate_dataset(&cases, 0.1).map_err(|e| e.to_string())?;
        let table = report.to_table();
        for col in ["DSC", "IOU", "Recall", "Precision", "ASSD(mm)", "NodeRecall"] {
            ensure!(table.contains(col), "{strategy}: report lacks {col}");
        }
        let assd = report.assd_mm.map_or("undefined".to_string(), |v| format!("{v:.2}"));
        let nr = report.node_recall.map_or("undefined".to_string(), |v| format!("{v:.2}"));
        lines.push(format!("{strategy} loss {head:.3}->{tail:.3} DSC {:.3} ASSD {assd} NodeRecall {nr}", report.dsc));
    }

    for m in [5, 10, 20] {
        let synt_only = epoch_plan(Strategy::Synt, 88, 88 * m, m).unwrap();
        ensure!(synt_only.len() == 88 * m, "synt x{m}: epoch of {}", synt_only.len());
        let mixed = epoch_plan(Strategy::RealSynt, 88, 88 * m, m).unwrap();
        let real_n = mixed.iter().filter(|r| matches!(r, SampleRef::Real(_))).count();
        ensure!(real_n == 88 && mixed.len() - real_n == 88 * m, "real+synt x{m}: {real_n} real of {}", mixed.len());
    }
    Ok(format!("{}; multipliers 5/10/20 give 88 real + 440/880/1760 synthetic", lines.join("; ")))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut synthetic = Vec::new();
    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !run(n) {
            return;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    };
    report(1, "schedule", &mut criterion_1);
    report(2, "diffusion algebra", &mut criterion_2);
    report(3, "conditioning mechanics", &mut criterion_3);
    report(4, "gradient check", &mut criterion_4);
    report(5, "condition transforms", &mut criterion_5);
    report(6, "metric oracles", &mut criterion_6);
    report(7, "desk experiment", &mut || criterion_7(&mut synthetic));
    if run(8) && synthetic.is_empty() && !run(7) {
        println!("criterion 8 trains on the samples from criterion 7; run both together");
    }
    report(8, "segmentation strategies", &mut || criterion_8(&synthetic));
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
