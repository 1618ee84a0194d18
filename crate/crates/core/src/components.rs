//! Connected-component labelling on binary 3D grids.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Component labels (0 = background, 1..=count) in scan order of first voxel.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    pub count: usize,
    pub sizes: Vec<usize>,
}

impl Components {
    /// Voxel indices of component `k` (1-based).
    pub fn voxels(&self, k: u32) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == k).map(|(i, _)| i).collect()
    }

    pub fn mask(&self, k: u32) -> Vec<bool> {
        self.labels.iter().map(|l| *l == k).collect()
    }

    /// Label of the largest component; ties go to the lower label.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(bs, _)| *s > bs) {
                best = Some((*s, i as u32 + 1));
            }
        }
        best.map(|(_, k)| k)
    }
}

pub fn label(mask: &[bool], shape: [usize; 3], conn: Connectivity) -> Components {
    let offsets = conn.offsets();
    let [d, h, w] = shape;
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let k = sizes.len() as u32 + 1;
        labels[start] = k;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
            for o in &offsets {
                let (nz, ny, nx) = (z + o[0], y + o[1], x + o[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (nz as usize * h + ny as usize) * w + nx as usize;
                if mask[j] && labels[j] == 0 {
                    labels[j] = k;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    Components { count: sizes.len(), labels, sizes }
}
