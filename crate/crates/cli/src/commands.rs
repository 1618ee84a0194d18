use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lnsynth_core::checkpoint::{self, DiffusionCheckpoint, SegmentationCheckpoint, DIFFUSION_KIND, SEGMENTATION_KIND};
use lnsynth_core::conditions::transform_condition;
use lnsynth_core::config::RunConfig;
use lnsynth_core::dataset::{centred_patch, load_cases, load_entry, prepare_case, save_cases, PatchSampler, PreparedCase};
use lnsynth_core::denoiser::DenoiserState;
use lnsynth_core::diffusion::{sample_loop, train, ClampedX0, EpsilonModel, NetworkModel, TrainSession};
use lnsynth_core::manifest::{resolve, CaseEntry, Manifest, MANIFEST_FILE};
use lnsynth_core::metrics::{evaluate_dataset, EvalCase};
use lnsynth_core::nifti;
use lnsynth_core::phantom::{generate_phantom, PhantomSpec};
use lnsynth_core::seg::{export_dataset, infer_segmenter, train_segmenter, SegModel, SegSample, Strategy};
use lnsynth_core::volume::{Geometry, LabelVolume};
use lnsynth_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

const DIFFUSION_CKPT: &str = "diffusion.ckpt";
const SEGMENTER_CKPT: &str = "segmenter.ckpt";

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn log_file(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path).map_err(io(path))?;
    Ok(BufWriter::new(file))
}

fn seed_for(seed: u64, k: usize, salt: u64) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(salt)
}

pub fn phantom(spec_path: Option<&Path>, out: &Path, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Invalid("--count must be at least 1".into()));
    }
    let spec: PhantomSpec = match spec_path {
        Some(p) => toml::from_str(&fs::read_to_string(p).map_err(io(p))?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => PhantomSpec::default(),
    };
    spec.validate()?;
    create_dir(out)?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = format!("phantom_{i:03}");
            let ph = generate_phantom(&PhantomSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() })?;
            let entry = CaseEntry {
                id: id.clone(),
                image: format!("{id}_image.nii.gz").into(),
                anatomy: Some(format!("{id}_anatomy.nii.gz").into()),
                nodes: format!("{id}_nodes.nii.gz").into(),
            };
            nifti::write_scalar(&out.join(&entry.image), &ph.image)?;
            nifti::write_labels(&out.join(entry.anatomy.as_ref().unwrap()), &ph.anatomy_raw)?;
            nifti::write_labels(&out.join(&entry.nodes), &ph.ln_mask)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest { cases: entries }.save(&out.join(MANIFEST_FILE))?;
    write_text(&out.join("phantom.toml"), &toml::to_string_pretty(&spec).expect("spec serializes"))?;
    log::info!("wrote {count} phantom case(s) to {}", out.display());
    Ok(())
}

pub fn prepare(manifest_path: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (manifest, root) = Manifest::load_dir_or_file(manifest_path)?;
    if manifest.cases.is_empty() {
        return Err(Error::Data(format!("{}: no cases listed", manifest_path.display())));
    }
    let cases = manifest
        .cases
        .par_iter()
        .map(|e| {
            let image = nifti::read_scalar(&resolve(&root, &e.image))?;
            let nodes = nifti::read_labels(&resolve(&root, &e.nodes))?;
            let anatomy = match &e.anatomy {
                Some(p) => nifti::read_labels(&resolve(&root, p))?,
                None => LabelVolume::zeros(*image.geometry()),
            };
            let case = prepare_case(&e.id, &image, &anatomy, &nodes, &cfg.prepare, &cfg.anatomy)?;
            log::info!("prepared {} at {:?}", e.id, case.image.shape());
            Ok(case)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    save_cases(out, &cases)?;
    cfg.echo_into(out)
}

pub fn train_diffusion(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let cases = load_cases(data)?;
    let mut source = PatchSampler::new(cases, cfg.denoiser.patch_shape, cfg.anatomy.clone())?;
    let sched = cfg.schedule.build()?;
    let mut session = match resume {
        Some(p) => {
            let ck: DiffusionCheckpoint = checkpoint::load(p, DIFFUSION_KIND)?;
            if ck.session.state.config != cfg.denoiser {
                return Err(Error::Config(format!("{}: denoiser settings differ from {}", p.display(), config.display())));
            }
            ck.session.state.verify()?;
            log::info!("resuming at iteration {}", ck.session.iteration);
            ck.session
        }
        None => TrainSession::new(DenoiserState::init(cfg.denoiser.clone(), cfg.seed)?, &cfg.training),
    };
    create_dir(out)?;
    cfg.echo_into(out)?;
    let config_toml = cfg.to_toml();
    let ckpt_path = out.join(DIFFUSION_CKPT);
    let mut log = log_file(&out.join("train_log.csv"), resume.is_some())?;
    let losses = train(&mut session, &mut source, &sched, &cfg.training, &mut log, &mut |s| {
        log::info!("checkpoint at iteration {}", s.iteration);
        checkpoint::save(&ckpt_path, DIFFUSION_KIND, &DiffusionCheckpoint { session: s.clone(), config_toml: config_toml.clone() })
    })?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("{} iterations, loss {first:.4} -> {last:.4}", losses.len());
    }
    Ok(())
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub conditions: &'a Path,
    pub transform: bool,
    pub seed: u64,
    pub count: usize,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
}

#[derive(Serialize)]
struct SampleRecord {
    id: String,
    source: String,
    sample_seed: u64,
    transform_seed: Option<u64>,
    node_outcomes: Vec<String>,
}

pub fn sample(a: SampleArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Invalid("--count must be at least 1".into()));
    }
    let ck: DiffusionCheckpoint = checkpoint::load(a.checkpoint, DIFFUSION_KIND)?;
    let mut cfg = RunConfig::from_toml(&ck.config_toml)?;
    if let Some(p) = a.config {
        cfg.sampling = RunConfig::load(p)?.sampling;
    }
    let state = ck.session.state;
    state.verify()?;
    let cases = load_cases(a.conditions)?;
    if cases.is_empty() {
        return Err(Error::Data(format!("{}: no condition cases", a.conditions.display())));
    }
    let sched = cfg.schedule.build()?;
    let net = state.network()?;
    let raw = NetworkModel::new(&net, &state, cfg.sampling.weights);
    let clamped = ClampedX0 { inner: NetworkModel::new(&net, &state, cfg.sampling.weights), sched: &sched };
    let model: &(dyn EpsilonModel + Sync) = if cfg.sampling.clip_denoised { &clamped } else { &raw };
    let patch = state.config.patch_shape;
    let geom = Geometry::new(patch, cfg.prepare.spacing_mm)?;
    let results = (0..a.count)
        .into_par_iter()
        .map(|k| {
            let src = &cases[k % cases.len()];
            let base = centred_patch(src, patch, &cfg.anatomy)?;
            let sample_seed = seed_for(a.seed, k, 0x9E37_79B9_7F4A_7C15);
            let (cond, transform_seed, outcomes) = if a.transform {
                let ts = seed_for(a.seed, k, 0xD1B5_4A32_D192_ED03);
                let (c, report) = transform_condition(&base.condition, ts, &cfg.sampling.transform)?;
                (c, Some(ts), report.outcomes.iter().map(|o| format!("{o:?}")).collect())
            } else {
                (base.condition, None, Vec::new())
            };
            let image = sample_loop(model, &cond, &sched, sample_seed, geom)?;
            let id = format!("synt_{k:04}");
            log::info!("sampled {id} from {}", src.id);
            let case = PreparedCase { id: id.clone(), image, anatomy: cond.anatomy_labels(geom)?, nodes: cond.ln_volume(geom)? };
            let record = SampleRecord { id, source: src.id.clone(), sample_seed, transform_seed, node_outcomes: outcomes };
            Ok((case, record))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(a.out)?;
    let (samples, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    save_cases(a.out, &samples)?;
    write_json(&a.out.join("samples.json"), &records)?;
    cfg.echo_into(a.out)
}

fn seg_samples(dir: Option<&Path>) -> Result<Vec<SegSample>> {
    let Some(dir) = dir else { return Ok(Vec::new()) };
    Ok(load_cases(dir)?.into_iter().map(|c| SegSample { id: c.id, image: c.image, label: c.nodes }).collect())
}

pub struct TrainSegArgs<'a> {
    pub config: &'a Path,
    pub strategy: Strategy,
    pub multiplier: usize,
    pub real: Option<&'a Path>,
    pub synt: Option<&'a Path>,
    pub out: &'a Path,
    pub export: Option<&'a Path>,
}

pub fn train_seg(a: TrainSegArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let required = |dir: Option<&Path>, flag: &str| {
        seg_samples(Some(dir.ok_or_else(|| Error::Invalid(format!("{flag} is required for strategy {}", a.strategy)))?))
    };
    // under `synt`, real cases only fix how many synthetic draws an epoch has
    let real = match a.strategy {
        Strategy::Synt => seg_samples(a.real)?,
        _ => required(a.real, "--real")?,
    };
    let synt = match a.strategy {
        Strategy::Real => Vec::new(),
        _ => required(a.synt, "--synt")?,
    };
    let mut model = SegModel::init(cfg.segmentation.clone(), a.strategy, a.multiplier)?;
    create_dir(a.out)?;
    cfg.echo_into(a.out)?;
    let config_toml = cfg.to_toml();
    let ckpt_path = a.out.join(SEGMENTER_CKPT);
    let mut log = log_file(&a.out.join("seg_log.csv"), false)?;
    let losses = train_segmenter(&mut model, &real, &synt, &mut log, &mut |m| {
        checkpoint::save(&ckpt_path, SEGMENTATION_KIND, &SegmentationCheckpoint { model: m.clone(), config_toml: config_toml.clone() })
    })?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("strategy {}: {} iterations, loss {first:.4} -> {last:.4}", a.strategy, losses.len());
    }
    if let Some(dir) = a.export {
        let plan = lnsynth_core::seg::epoch_plan(a.strategy, real.len(), synt.len(), a.multiplier)?;
        let mut seen = std::collections::BTreeSet::new();
        let picked: Vec<SegSample> = plan
            .iter()
            .map(|r| match r {
                lnsynth_core::seg::SampleRef::Real(i) => &real[*i],
                lnsynth_core::seg::SampleRef::Synt(i) => &synt[*i],
            })
            .filter(|s| seen.insert(s.id.clone()))
            .cloned()
            .collect();
        export_dataset(dir, &picked)?;
    }
    Ok(())
}

pub fn predict(ckpt: &Path, data: &Path, out: &Path, roi_mm: Option<f64>, no_roi: bool) -> Result<()> {
    let ck: SegmentationCheckpoint = checkpoint::load(ckpt, SEGMENTATION_KIND)?;
    ck.model.verify()?;
    let cfg = RunConfig::from_toml(&ck.config_toml)?;
    let margin = roi_mm.unwrap_or(cfg.prepare.test_roi_expansion_mm);
    if !(margin >= 0.0) {
        return Err(Error::Invalid(format!("--roi-mm must be nonnegative, got {margin}")));
    }
    let (manifest, root) = Manifest::load_dir_or_file(data)?;
    create_dir(out)?;
    manifest
        .cases
        .par_iter()
        .map(|e| {
            let case = load_entry(&root, e)?;
            let roi = (!no_roi).then_some((&case.nodes, margin));
            let pred = infer_segmenter(&ck.model, &case.image, roi)?;
            nifti::write_labels(&out.join(format!("{}.nii.gz", case.id)), &pred)?;
            log::info!("{}: {} foreground voxels", case.id, pred.count_nonzero());
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    cfg.echo_into(out)
}

pub fn evaluate(pred_dir: &Path, gt: &Path, out: &Path, threshold: f64) -> Result<()> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("--node-threshold must lie in [0, 1), got {threshold}")));
    }
    let (manifest, root) = Manifest::load_dir_or_file(gt)?;
    let pairs = manifest
        .cases
        .par_iter()
        .map(|e| {
            let gt = nifti::read_labels(&resolve(&root, &e.nodes))?;
            let gt = LabelVolume::from_mask(*gt.geometry(), &gt.nonzero_mask())?;
            let path: PathBuf = pred_dir.join(format!("{}.nii.gz", e.id));
            if !path.exists() {
                return Err(Error::Data(format!("no prediction for case {} (expected {})", e.id, path.display())));
            }
            Ok((e.id.clone(), nifti::read_labels(&path)?, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let cases: Vec<EvalCase> = pairs.iter().map(|(id, p, g)| EvalCase { id, pred: p, gt: g }).collect();
    let report = evaluate_dataset(&cases, threshold)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}
