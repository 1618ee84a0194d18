//! Orthogonal mid-slice previews.

use std::path::Path;

use image::{Rgb, RgbImage};
use lnsynth_core::nifti;
use lnsynth_core::volume::{LabelVolume, ScalarVolume};
use lnsynth_core::{Error, Result};

/// Axial (fixed axis 0), coronal (axis 1) and sagittal (axis 2) planes
/// through the volume centre.
const PLANES: [(&str, usize); 3] = [("axial", 0), ("coronal", 1), ("sagittal", 2)];

fn plane_image(vol: &ScalarVolume, labels: Option<&LabelVolume>, fixed: usize, window: [f64; 2]) -> RgbImage {
    let shape = vol.shape();
    let (ra, ca) = match fixed {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mid = shape[fixed] / 2;
    let span = (window[1] - window[0]).max(f64::EPSILON);
    RgbImage::from_fn(shape[ca] as u32, shape[ra] as u32, |c, r| {
        let mut p = [0usize; 3];
        p[fixed] = mid;
        // rows run top-down with the first axis at the bottom for coronal/sagittal views
        p[ra] = if fixed == 0 { r as usize } else { shape[ra] - 1 - r as usize };
        p[ca] = c as usize;
        let i = vol.geometry().index(p);
        let g = (((vol.data()[i] as f64 - window[0]) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        match labels {
            Some(l) if l.data()[i] != 0 => Rgb([g / 2 + 127, g / 2, g / 2]),
            _ => Rgb([g, g, g]),
        }
    })
}

pub fn write_slices(case: &Path, labels: Option<&Path>, out: &Path, window: Option<[f64; 2]>) -> Result<()> {
    let vol = nifti::read_scalar(case)?;
    let labels = labels.map(nifti::read_labels).transpose()?;
    if let Some(l) = &labels {
        if l.shape() != vol.shape() {
            return Err(Error::Data(format!("label grid {:?} differs from image grid {:?}", l.shape(), vol.shape())));
        }
    }
    let window = match window {
        Some([lo, hi]) if lo < hi => [lo, hi],
        Some(w) => return Err(Error::Invalid(format!("--window needs LO < HI, got {w:?}"))),
        None => vol.data().iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], v| [lo.min(*v as f64), hi.max(*v as f64)]),
    };
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let stem = case.file_name().and_then(|n| n.to_str()).unwrap_or("case");
    let stem = stem.trim_end_matches(".gz").trim_end_matches(".nii");
    for (name, axis) in PLANES {
        let path = out.join(format!("{stem}_{name}.png"));
        plane_image(&vol, labels.as_ref(), axis, window)
            .save(&path)
            .map_err(|e| Error::Data(format!("{}: cannot write PNG: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
