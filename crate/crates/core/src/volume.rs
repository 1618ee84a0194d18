//! Dense 3D grids with physical geometry.
//!
//! Axis order is `[a0, a1, a2]`, row-major, `a2` contiguous. Voxel `(0,0,0)`
//! has its centre at `origin_mm`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        Self::with_origin(shape, spacing_mm, [0.0; 3])
    }

    pub fn with_origin(shape: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Invalid(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::Invalid(format!("origin must be finite, got {origin_mm:?}")));
        }
        Ok(Self { shape, spacing_mm, origin_mm })
    }

    /// Unit spacing, zero origin.
    pub fn unit(shape: [usize; 3]) -> Self {
        Self { shape, spacing_mm: [1.0; 3], origin_mm: [0.0; 3] }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.shape[1] + p[1]) * self.shape[2] + p[2]
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let s = self.shape;
        [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]]
    }

    pub fn contains(&self, p: [isize; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.shape[a])
    }

    /// Same grid shape and spacing (origin may differ).
    pub fn matches(&self, other: &Geometry) -> bool {
        self.shape == other.shape
            && self.spacing_mm.iter().zip(&other.spacing_mm).all(|(a, b)| (a - b).abs() <= 1e-6 * a.max(*b))
    }

    /// Geometry of the sub-box `bounds`.
    pub fn crop(&self, bounds: &Bounds) -> Geometry {
        let mut origin = self.origin_mm;
        for a in 0..3 {
            origin[a] += bounds.lo[a] as f64 * self.spacing_mm[a];
        }
        Geometry { shape: bounds.shape(), spacing_mm: self.spacing_mm, origin_mm: origin }
    }
}

/// Half-open voxel box `lo..hi` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Bounds {
    pub fn shape(&self) -> [usize; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: shape }
    }

    /// Tight box around nonzero voxels, `None` when there are none.
    pub fn of_nonzero<T: Copy + PartialEq + Default>(data: &[T], geom: &Geometry) -> Option<Bounds> {
        let zero = T::default();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, v) in data.iter().enumerate() {
            if *v != zero {
                any = true;
                let c = geom.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a] + 1);
                }
            }
        }
        any.then_some(Bounds { lo, hi })
    }
}

fn crop_data<T: Copy>(data: &[T], geom: &Geometry, b: &Bounds) -> Vec<T> {
    let s = b.shape();
    let mut out = Vec::with_capacity(s.iter().product());
    for z in b.lo[0]..b.hi[0] {
        for y in b.lo[1]..b.hi[1] {
            let start = geom.index([z, y, b.lo[2]]);
            out.extend_from_slice(&data[start..start + s[2]]);
        }
    }
    out
}

fn check_bounds(geom: &Geometry, b: &Bounds) -> Result<()> {
    if (0..3).any(|a| b.lo[a] >= b.hi[a] || b.hi[a] > geom.shape[a]) {
        return Err(Error::Invalid(format!("crop box {b:?} invalid for grid {:?}", geom.shape)));
    }
    Ok(())
}

/// Real-valued intensity grid: images, noisy images, noise fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geom: Geometry,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::shape("scalar volume", format!("{} values for grid {:?}", data.len(), geom.shape)));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Self {
        Self { data: vec![value; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, f: impl Fn([usize; 3]) -> f32) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.coords(i))).collect();
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, p: [usize; 3]) -> f32 {
        self.data[self.geom.index(p)]
    }

    pub fn set_geometry(&mut self, geom: Geometry) -> Result<()> {
        if geom.len() != self.data.len() {
            return Err(Error::shape("scalar volume", "geometry does not fit data"));
        }
        self.geom = geom;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { geom: self.geom, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn crop(&self, b: &Bounds) -> Result<Self> {
        check_bounds(&self.geom, b)?;
        Ok(Self { geom: self.geom.crop(b), data: crop_data(&self.data, &self.geom, b) })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }
}

/// Integer label grid: anatomy masks, lymph-node masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geom: Geometry,
    data: Vec<u16>,
    pub label_table: BTreeMap<u16, String>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, data: Vec<u16>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::shape("label volume", format!("{} labels for grid {:?}", data.len(), geom.shape)));
        }
        Ok(Self { geom, data, label_table: BTreeMap::new() })
    }

    pub fn zeros(geom: Geometry) -> Self {
        Self { data: vec![0; geom.len()], geom, label_table: BTreeMap::new() }
    }

    pub fn from_fn(geom: Geometry, f: impl Fn([usize; 3]) -> u16) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.coords(i))).collect();
        Self { geom, data, label_table: BTreeMap::new() }
    }

    pub fn with_table(mut self, table: BTreeMap<u16, String>) -> Self {
        self.label_table = table;
        self
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geom.shape
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, p: [usize; 3]) -> u16 {
        self.data[self.geom.index(p)]
    }

    pub fn set_geometry(&mut self, geom: Geometry) -> Result<()> {
        if geom.len() != self.data.len() {
            return Err(Error::shape("label volume", "geometry does not fit data"));
        }
        self.geom = geom;
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v <= 1)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of nonzero voxels.
    pub fn nonzero_mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v != 0).collect()
    }

    pub fn crop(&self, b: &Bounds) -> Result<Self> {
        check_bounds(&self.geom, b)?;
        Ok(Self {
            geom: self.geom.crop(b),
            data: crop_data(&self.data, &self.geom, b),
            label_table: self.label_table.clone(),
        })
    }

    /// Binary volume from a boolean mask on this geometry.
    pub fn from_mask(geom: Geometry, mask: &[bool]) -> Result<Self> {
        Self::new(geom, mask.iter().map(|m| *m as u16).collect())
    }
}
