//! Prepared cases on disk, the preparation pipeline and patch sampling.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conditions::{
    build_anatomy_mask, crop_roi, extract_patch, patch_window, resample_labels, resample_scalar, roi_bounds,
    window_normalize, AnatomyConfig, ConditionStack,
};
use crate::config::PrepareConfig;
use crate::diffusion::PatchSource;
use crate::manifest::{resolve, CaseEntry, Manifest, MANIFEST_FILE};
use crate::nifti;
use crate::volume::{Bounds, LabelVolume, ScalarVolume};
use crate::{Error, Result};

/// Normalized image with its dense anatomy mask and binary node mask.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    pub image: ScalarVolume,
    pub anatomy: LabelVolume,
    pub nodes: LabelVolume,
}

/// Crop → resample → anatomy mask (on raw intensities) → window.
pub fn prepare_case(
    id: &str,
    image: &ScalarVolume,
    raw_anatomy: &LabelVolume,
    nodes: &LabelVolume,
    prep: &PrepareConfig,
    anatomy: &AnatomyConfig,
) -> Result<PreparedCase> {
    let tag = |e: Error| match e {
        Error::Data(m) => Error::Data(format!("case {id}: {m}")),
        Error::Shape { stage, detail } => Error::Data(format!("case {id}: {stage}: {detail}")),
        other => other,
    };
    if !image.geometry().matches(raw_anatomy.geometry()) || !image.geometry().matches(nodes.geometry()) {
        return Err(tag(Error::Data("image, anatomy and node grids differ".into())));
    }
    let binary = LabelVolume::new(*nodes.geometry(), nodes.data().iter().map(|v| (*v != 0) as u16).collect())?;
    let (img, ln) = crop_roi(image, &binary, prep.roi_expansion_mm).map_err(tag)?;
    let b = roi_bounds(&binary, prep.roi_expansion_mm).map_err(tag)?;
    let raw = raw_anatomy.crop(&b)?;
    let img = resample_scalar(&img, prep.spacing_mm)?;
    let raw = resample_labels(&raw, prep.spacing_mm)?;
    let ln = resample_labels(&ln, prep.spacing_mm)?;
    if ln.count_nonzero() == 0 {
        return Err(tag(Error::Data("lymph nodes vanished after resampling".into())));
    }
    let anat = build_anatomy_mask(&raw, &img, anatomy).map_err(tag)?;
    let img = window_normalize(&img, prep.window[0], prep.window[1])?;
    Ok(PreparedCase { id: id.to_string(), image: img, anatomy: anat, nodes: ln })
}

fn file_names(id: &str) -> [String; 3] {
    [format!("{id}_image.nii.gz"), format!("{id}_anatomy.nii.gz"), format!("{id}_nodes.nii.gz")]
}

/// Writes cases as NIfTI files plus `manifest.json` into `dir`.
pub fn save_cases<'a>(dir: &Path, cases: impl IntoIterator<Item = &'a PreparedCase>) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for c in cases {
        let [img, anat, nodes] = file_names(&c.id);
        nifti::write_scalar(&dir.join(&img), &c.image)?;
        nifti::write_labels(&dir.join(&anat), &c.anatomy)?;
        nifti::write_labels(&dir.join(&nodes), &c.nodes)?;
        manifest.cases.push(CaseEntry {
            id: c.id.clone(),
            image: PathBuf::from(img),
            anatomy: Some(PathBuf::from(anat)),
            nodes: PathBuf::from(nodes),
        });
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_entry(root: &Path, entry: &CaseEntry) -> Result<PreparedCase> {
    let image = nifti::read_scalar(&resolve(root, &entry.image))?;
    let nodes = nifti::read_labels(&resolve(root, &entry.nodes))?;
    let anatomy = match &entry.anatomy {
        Some(p) => nifti::read_labels(&resolve(root, p))?,
        None => LabelVolume::zeros(*image.geometry()),
    };
    if !image.geometry().matches(nodes.geometry()) || !image.geometry().matches(anatomy.geometry()) {
        return Err(Error::Data(format!("case {}: volume grids differ", entry.id)));
    }
    Ok(PreparedCase { id: entry.id.clone(), image, anatomy, nodes })
}

/// Loads every case listed under a dataset directory (or manifest file).
pub fn load_cases(path: &Path) -> Result<Vec<PreparedCase>> {
    let (manifest, root) = Manifest::load_dir_or_file(path)?;
    manifest.cases.iter().map(|e| load_entry(&root, e)).collect()
}

/// A patch-sized window placed around lymph-node voxels.
#[derive(Debug, Clone)]
pub struct Patch {
    pub start: [isize; 3],
    pub image: Vec<f64>,
    pub condition: ConditionStack,
}

/// Cuts the patch at `start` out of a prepared case; voxels beyond the
/// case are air.
pub fn case_patch(case: &PreparedCase, start: [isize; 3], patch: [usize; 3], anatomy: &AnatomyConfig) -> Result<Patch> {
    let grid = case.image.shape();
    let img = extract_patch(case.image.data(), grid, start, patch, -1.0f32);
    let anat = extract_patch(case.anatomy.data(), grid, start, patch, anatomy.air_label());
    let ln = extract_patch(case.nodes.data(), grid, start, patch, 0u16);
    let geom = crate::volume::Geometry::unit(patch);
    let anat = LabelVolume::new(geom, anat)?;
    let ln = LabelVolume::new(geom, ln.into_iter().map(|v| (v != 0) as u16).collect())?;
    let condition = ConditionStack::from_volumes(&anat, &ln, anatomy)?;
    Ok(Patch { start, image: img.into_iter().map(|v| v as f64).collect(), condition })
}

/// Deterministic patch centred on the lymph-node box.
pub fn centred_patch(case: &PreparedCase, patch: [usize; 3], anatomy: &AnatomyConfig) -> Result<Patch> {
    let b = Bounds::of_nonzero(case.nodes.data(), case.nodes.geometry())
        .ok_or_else(|| Error::Data(format!("case {} has no lymph-node voxels", case.id)))?;
    let start = patch_window(case.image.shape(), &b, patch, [0; 3]);
    case_patch(case, start, patch, anatomy)
}

/// Random training patches: a random case, centred on a random node voxel
/// with a small jitter.
pub struct PatchSampler {
    cases: Vec<PreparedCase>,
    node_voxels: Vec<Vec<usize>>,
    patch: [usize; 3],
    anatomy: AnatomyConfig,
    jitter: usize,
}

impl PatchSampler {
    pub fn new(cases: Vec<PreparedCase>, patch: [usize; 3], anatomy: AnatomyConfig) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Data("no training cases".into()));
        }
        let node_voxels: Vec<Vec<usize>> = cases
            .iter()
            .map(|c| c.nodes.data().iter().enumerate().filter(|(_, v)| **v != 0).map(|(i, _)| i).collect())
            .collect();
        if let Some(i) = node_voxels.iter().position(|v| v.is_empty()) {
            return Err(Error::Data(format!("case {} has no lymph-node voxels", cases[i].id)));
        }
        let jitter = patch.iter().min().copied().unwrap_or(0) / 8;
        Ok(Self { cases, node_voxels, patch, anatomy, jitter })
    }

    pub fn cases(&self) -> &[PreparedCase] {
        &self.cases
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Patch> {
        let ci = rng.random_range(0..self.cases.len());
        let case = &self.cases[ci];
        let geom = case.image.geometry();
        let centre = geom.coords(*self.node_voxels[ci].choose(rng).expect("nonempty"));
        let j = self.jitter as isize;
        let jitter: [isize; 3] = std::array::from_fn(|_| if j > 0 { rng.random_range(-(j as i64)..=j as i64) as isize } else { 0 });
        let b = Bounds { lo: centre, hi: centre.map(|c| c + 1) };
        let start = patch_window(geom.shape, &b, self.patch, jitter);
        case_patch(case, start, self.patch, &self.anatomy)
    }
}

impl PatchSource for PatchSampler {
    fn next_patch(&mut self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, ConditionStack)> {
        let p = self.draw(rng)?;
        Ok((p.image, p.condition))
    }
}
