//! ROI cropping, resampling and intensity windowing.

use crate::volume::{Bounds, Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

/// Voxel box around all nonzero `ln_mask` voxels, grown by `expansion_mm`
/// on every side (rounded up to whole voxels) and clipped to the grid.
pub fn roi_bounds(ln_mask: &LabelVolume, expansion_mm: f64) -> Result<Bounds> {
    if !(expansion_mm >= 0.0) || !expansion_mm.is_finite() {
        return Err(Error::Invalid(format!("ROI expansion must be a nonnegative number, got {expansion_mm}")));
    }
    let geom = ln_mask.geometry();
    let tight = Bounds::of_nonzero(ln_mask.data(), geom)
        .ok_or_else(|| Error::Data("lymph-node mask is empty; cannot place an ROI".into()))?;
    let mut b = tight;
    for a in 0..3 {
        let grow = (expansion_mm / geom.spacing_mm[a] - 1e-9).ceil().max(0.0) as usize;
        b.lo[a] = tight.lo[a].saturating_sub(grow);
        b.hi[a] = (tight.hi[a] + grow).min(geom.shape[a]);
    }
    Ok(b)
}

pub fn crop_roi(image: &ScalarVolume, ln_mask: &LabelVolume, expansion_mm: f64) -> Result<(ScalarVolume, LabelVolume)> {
    if !image.geometry().matches(ln_mask.geometry()) {
        return Err(Error::shape("crop_roi", "image and lymph-node mask grids differ"));
    }
    let b = roi_bounds(ln_mask, expansion_mm)?;
    Ok((image.crop(&b)?, ln_mask.crop(&b)?))
}

/// Output extent and source coordinate map for one axis. Grids are aligned
/// on their outer edges, so source position of output voxel `j` is
/// `(j + 0.5)·t/s − 0.5`.
fn axis_map(n: usize, src_spacing: f64, dst_spacing: f64) -> (usize, Vec<f64>) {
    let m = ((n as f64 * src_spacing / dst_spacing).round() as usize).max(1);
    let ratio = dst_spacing / src_spacing;
    (m, (0..m).map(|j| (j as f64 + 0.5) * ratio - 0.5).collect())
}

fn resampled_geometry(geom: &Geometry, target: [f64; 3]) -> Result<(Geometry, [Vec<f64>; 3])> {
    if target.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::Invalid(format!("target spacing must be positive, got {target:?}")));
    }
    let maps: [(usize, Vec<f64>); 3] =
        std::array::from_fn(|a| axis_map(geom.shape[a], geom.spacing_mm[a], target[a]));
    let shape = [maps[0].0, maps[1].0, maps[2].0];
    let origin = std::array::from_fn(|a| geom.origin_mm[a] - geom.spacing_mm[a] / 2.0 + target[a] / 2.0);
    let [(_, m0), (_, m1), (_, m2)] = maps;
    Ok((Geometry::with_origin(shape, target, origin)?, [m0, m1, m2]))
}

/// Applies a 1D resampling along `axis` using `f(line, pos)`.
fn along_axis<T: Copy + Default>(
    data: &[T],
    shape: [usize; 3],
    axis: usize,
    coords: &[f64],
    f: impl Fn(&[T], f64) -> T,
) -> (Vec<T>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = coords.len();
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::default(); out_shape.iter().product()];
    let mut line = vec![T::default(); n];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * n * stride + inner;
            for (i, l) in line.iter_mut().enumerate() {
                *l = data[base + i * stride];
            }
            let obase = o * coords.len() * stride + inner;
            for (j, c) in coords.iter().enumerate() {
                out[obase + j * stride] = f(&line, *c);
            }
        }
    }
    (out, out_shape)
}

fn linear_1d(line: &[f32], pos: f64) -> f32 {
    let last = line.len() - 1;
    let p = pos.clamp(0.0, last as f64);
    let i0 = p.floor() as usize;
    let w = p - i0 as f64;
    if w == 0.0 || i0 == last {
        return line[i0];
    }
    (line[i0] as f64 * (1.0 - w) + line[i0 + 1] as f64 * w) as f32
}

/// Nearest index with ties rounded up, clamped to the line.
pub(crate) fn nearest_index(pos: f64, n: usize) -> usize {
    ((pos + 0.5).floor().max(0.0) as usize).min(n - 1)
}

/// Trilinear resampling (separable, edge-clamped).
pub fn resample_scalar(vol: &ScalarVolume, target_mm: [f64; 3]) -> Result<ScalarVolume> {
    let (geom, maps) = resampled_geometry(vol.geometry(), target_mm)?;
    let mut data = vol.data().to_vec();
    let mut shape = vol.shape();
    for (axis, coords) in maps.iter().enumerate() {
        (data, shape) = along_axis(&data, shape, axis, coords, linear_1d);
    }
    ScalarVolume::new(geom, data)
}

/// Nearest-neighbour resampling; label values are never blended.
pub fn resample_labels(vol: &LabelVolume, target_mm: [f64; 3]) -> Result<LabelVolume> {
    let (geom, maps) = resampled_geometry(vol.geometry(), target_mm)?;
    let mut data = vol.data().to_vec();
    let mut shape = vol.shape();
    for (axis, coords) in maps.iter().enumerate() {
        (data, shape) = along_axis(&data, shape, axis, coords, |line, p| line[nearest_index(p, line.len())]);
    }
    Ok(LabelVolume::new(geom, data)?.with_table(vol.label_table.clone()))
}

/// Clips to `[lo, hi]` and maps affinely onto `[-1, 1]`.
pub fn window_normalize(image: &ScalarVolume, lo: f64, hi: f64) -> Result<ScalarVolume> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid(format!("window needs lo < hi, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    Ok(image.map(|v| (2.0 * ((v as f64).clamp(lo, hi) - lo) / span - 1.0) as f32))
}

/// Inverse of [`window_normalize`] on its range.
pub fn window_denormalize(v: f64, lo: f64, hi: f64) -> f64 {
    (v + 1.0) / 2.0 * (hi - lo) + lo
}
