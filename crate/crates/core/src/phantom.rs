//! Procedural abdomen-like test volumes: a body cylinder in air, ellipsoid
//! organs and lobulated lymph nodes, all with Gaussian intensities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::volume::{Geometry, LabelVolume, ScalarVolume};
use crate::{Error, Result};

const MIN_EDGE: usize = 24;
const PLACEMENT_TRIES: usize = 500;
const MIN_NODE_CONTRAST: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub organ_count: usize,
    /// Inclusive range of node counts.
    pub node_count_range: [usize; 2],
    /// Inclusive range of node diameters, voxels.
    pub node_diameter_range: [f64; 2],
    /// `(mean, std)` per organ label, in order; reused cyclically.
    pub organ_intensity: Vec<(f64, f64)>,
    pub body_intensity: (f64, f64),
    pub node_intensity: (f64, f64),
    pub air_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [64; 3],
            spacing_mm: [1.0; 3],
            organ_count: 3,
            node_count_range: [1, 3],
            node_diameter_range: [4.0, 12.0],
            organ_intensity: vec![(210.0, 5.0), (75.0, 5.0), (-40.0, 5.0), (190.0, 5.0), (10.0, 5.0)],
            body_intensity: (40.0, 3.0),
            node_intensity: (140.0, 5.0),
            air_intensity: -1000.0,
            noise_sigma: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn organ_stats(&self, label: u16) -> (f64, f64) {
        self.organ_intensity[(label as usize - 1) % self.organ_intensity.len()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid.iter().any(|g| *g < MIN_EDGE) {
            return bad(format!("phantom grid {:?} must be at least {MIN_EDGE} per axis", self.grid));
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return bad("phantom spacing must be positive".into());
        }
        let [lo, hi] = self.node_count_range;
        if lo > hi {
            return bad("node_count_range must be [min, max] with min <= max".into());
        }
        let [dlo, dhi] = self.node_diameter_range;
        if !(4.0..=12.0).contains(&dlo) || !(4.0..=12.0).contains(&dhi) || dlo > dhi {
            return bad("node_diameter_range must lie within [4, 12] voxels".into());
        }
        if self.organ_count > 0 && self.organ_intensity.is_empty() {
            return bad("organ_intensity needs at least one entry".into());
        }
        for l in 1..=self.organ_count as u16 {
            let (m, _) = self.organ_stats(l);
            if (m - self.node_intensity.0).abs() < MIN_NODE_CONTRAST {
                return bad(format!("organ {l} mean {m} is within {MIN_NODE_CONTRAST} of the node mean"));
            }
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: ScalarVolume,
    /// Organs as labels `1..=organ_count`; nodes are not labelled here.
    pub anatomy_raw: LabelVolume,
    pub ln_mask: LabelVolume,
    /// Generator ground truth for the air region.
    pub air: Vec<bool>,
}

struct Grid {
    shape: [usize; 3],
}

impl Grid {
    fn idx(&self, p: [usize; 3]) -> usize {
        (p[0] * self.shape[1] + p[1]) * self.shape[2] + p[2]
    }
}

/// Voxels of an axis-aligned superellipsoid `Σ|d_a/r_a|^e ≤ 1`.
fn blob(centre: [f64; 3], radii: [f64; 3], exponent: f64, shape: [usize; 3]) -> Option<Vec<[usize; 3]>> {
    let lo: [isize; 3] = std::array::from_fn(|a| (centre[a] - radii[a]).floor() as isize);
    let hi: [isize; 3] = std::array::from_fn(|a| (centre[a] + radii[a]).ceil() as isize);
    let mut out = Vec::new();
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let p = [z, y, x];
                let s: f64 = (0..3).map(|a| ((p[a] as f64 - centre[a]) / radii[a]).abs().powf(exponent)).sum();
                if s <= 1.0 {
                    if (0..3).any(|a| p[a] < 0 || p[a] as usize >= shape[a]) {
                        return None;
                    }
                    out.push(p.map(|c| c as usize));
                }
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

fn dilated_hits(occupied: &[bool], grid: &Grid, voxels: &[[usize; 3]]) -> bool {
    let s = grid.shape;
    voxels.iter().any(|v| {
        (-1..=1isize).any(|dz| {
            (-1..=1isize).any(|dy| {
                (-1..=1isize).any(|dx| {
                    let q = [v[0] as isize + dz, v[1] as isize + dy, v[2] as isize + dx];
                    (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < s[a])
                        && occupied[grid.idx(q.map(|c| c as usize))]
                })
            })
        })
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let shape = spec.grid;
    let grid = Grid { shape };
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (cy, cx) = ((shape[1] as f64 - 1.0) / 2.0, (shape[2] as f64 - 1.0) / 2.0);
    let (ry, rx) = (0.45 * shape[1] as f64, 0.45 * shape[2] as f64);
    let mut body = vec![false; n];
    for i in 0..n {
        let y = (i / shape[2]) % shape[1];
        let x = i % shape[2];
        body[i] = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0;
    }
    let in_body = |v: &[usize; 3]| body[grid.idx(*v)];

    let mut raw = vec![0u16; n];
    let mut organ_occ = vec![false; n];
    let small = shape.iter().copied().min().unwrap() as f64;
    for label in 1..=spec.organ_count as u16 {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.08..0.16) * small);
            let centre: [f64; 3] = std::array::from_fn(|a| rng.random_range(radii[a]..shape[a] as f64 - 1.0 - radii[a]));
            let Some(vox) = blob(centre, radii, 2.0, shape) else { continue };
            if !vox.iter().all(in_body) || dilated_hits(&organ_occ, &grid, &vox) {
                continue;
            }
            for v in vox {
                raw[grid.idx(v)] = label;
                organ_occ[grid.idx(v)] = true;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!("could not place organ {label} in a {shape:?} phantom")));
        }
    }

    let [nlo, nhi] = spec.node_count_range;
    let count = rng.random_range(nlo..=nhi);
    let mut nodes = vec![false; n];
    for k in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let [dlo, dhi] = spec.node_diameter_range;
            let diameter = if dlo == dhi { dlo } else { rng.random_range(dlo..=dhi) };
            let radii: [f64; 3] = std::array::from_fn(|_| (diameter / 2.0 * rng.random_range(0.85..=1.0)).max(2.0));
            let exponent = rng.random_range(1.6..=3.0);
            let centre: [f64; 3] = std::array::from_fn(|a| rng.random_range(radii[a]..shape[a] as f64 - 1.0 - radii[a]));
            let Some(vox) = blob(centre, radii, exponent, shape) else { continue };
            if !vox.iter().all(in_body) || dilated_hits(&organ_occ, &grid, &vox) || dilated_hits(&nodes, &grid, &vox) {
                continue;
            }
            for v in vox {
                nodes[grid.idx(v)] = true;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!("could not place lymph node {} of {count}", k + 1)));
        }
    }

    let mut draw = |(mean, std): (f64, f64)| mean + std * rng.sample::<f64, _>(StandardNormal);
    let mut image = vec![0f32; n];
    for i in 0..n {
        let base = if nodes[i] {
            draw(spec.node_intensity)
        } else if raw[i] != 0 {
            draw(spec.organ_stats(raw[i]))
        } else if body[i] {
            draw(spec.body_intensity)
        } else {
            spec.air_intensity
        };
        image[i] = (base + draw((0.0, spec.noise_sigma))) as f32;
    }

    let geom = Geometry::new(shape, spec.spacing_mm)?;
    let table: BTreeMap<u16, String> = (1..=spec.organ_count as u16).map(|l| (l, format!("organ_{l}"))).collect();
    Ok(Phantom {
        image: ScalarVolume::new(geom, image)?,
        anatomy_raw: LabelVolume::new(geom, raw)?.with_table(table),
        ln_mask: LabelVolume::new(geom, nodes.iter().map(|v| *v as u16).collect())?,
        air: body.iter().map(|b| !b).collect(),
    })
}
