//! Dense 3D convolution via chunked im2col + GEMM.

use super::gemm;

/// Upper bound on im2col scratch, in elements (256 KiB of f64).
const COL_BUDGET: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let o = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        [o(self.input[0]), o(self.input[1]), o(self.input[2])]
    }

    pub fn valid(&self) -> bool {
        self.kernel >= 1
            && self.stride >= 1
            && self.input.iter().all(|&n| n + 2 * self.pad >= self.kernel)
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn out_len(&self) -> usize {
        self.output().iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Chunk length in output voxels: whole output rows within the scratch budget.
    fn chunk(&self) -> usize {
        let ow = self.output()[2];
        let rows = (COL_BUDGET / (self.rows() * ow).max(1)).max(1);
        (rows * ow).min(self.out_len())
    }
}

/// Output rows (z, y) covered by a chunk; a chunk is a whole number of rows.
fn rows_of(g: &ConvGeom, start: usize, len: usize) -> std::ops::Range<usize> {
    let ow = g.output()[2];
    start / ow..(start + len) / ow
}

/// Visits every (col row, output row) segment of a chunk. `f` receives the
/// destination offset within a col row, the source slice start (or `None`
/// when the whole segment lies in padding), and the valid `ox` range.
fn for_each_segment(
    g: &ConvGeom,
    rows: std::ops::Range<usize>,
    mut f: impl FnMut(usize, usize, Option<usize>, std::ops::Range<usize>, isize),
) {
    let [d, h, w] = g.input.map(|v| v as isize);
    let [_, oh, ow] = g.output();
    let (s, p, k) = (g.stride as isize, g.pad as isize, g.kernel);
    let plane = g.in_len();
    let mut row = 0;
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    // valid ox: 0 <= ox*s - p + kx < w
                    let off = kx as isize - p;
                    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
                    let hi = if w - off <= 0 { 0 } else { (((w - off - 1) / s) + 1).min(ow as isize) as usize };
                    let valid = lo..hi.max(lo);
                    for (ri, r) in rows.clone().enumerate() {
                        let oz = (r / oh) as isize;
                        let oy = (r % oh) as isize;
                        let iz = oz * s - p + kz as isize;
                        let iy = oy * s - p + ky as isize;
                        let src = (iz >= 0 && iz < d && iy >= 0 && iy < h)
                            .then(|| ci * plane + ((iz * h + iy) * w) as usize);
                        f(row, ri * ow, src, valid.clone(), off);
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, rows: std::ops::Range<usize>, col: &mut [f64]) {
    let len = rows.len() * g.output()[2];
    let ow = g.output()[2];
    let s = g.stride;
    for_each_segment(g, rows, |row, dst_off, src, valid, off| {
        let dst = &mut col[row * len + dst_off..row * len + dst_off + ow];
        match src {
            None => dst.fill(0.0),
            Some(base) => {
                dst[..valid.start].fill(0.0);
                dst[valid.end..].fill(0.0);
                if s == 1 {
                    let a = (base as isize + valid.start as isize + off) as usize;
                    dst[valid.clone()].copy_from_slice(&x[a..a + valid.len()]);
                } else {
                    for ox in valid {
                        dst[ox] = x[(base as isize + (ox * s) as isize + off) as usize];
                    }
                }
            }
        }
    });
}

fn col2im_add(col: &[f64], g: &ConvGeom, rows: std::ops::Range<usize>, dx: &mut [f64]) {
    let len = rows.len() * g.output()[2];
    let s = g.stride;
    for_each_segment(g, rows, |row, dst_off, src, valid, off| {
        let Some(base) = src else { return };
        let seg = &col[row * len + dst_off..];
        for ox in valid {
            dx[(base as isize + (ox * s) as isize + off) as usize] += seg[ox];
        }
    });
}

/// `x`: [cin, d, h, w]; `weight`: [cout, cin, k, k, k]; returns [cout, od, oh, ow].
pub fn forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let n = g.out_len();
    let kk = g.rows();
    let mut y = vec![0.0; g.cout * n];
    if let Some(b) = bias {
        for (c, bc) in b.iter().enumerate() {
            y[c * n..(c + 1) * n].fill(*bc);
        }
    }
    if g.is_pointwise() {
        gemm(g.cout, kk, n, 1.0, weight, kk, 1, x, n, 1, 1.0, &mut y, n, 1);
        return y;
    }
    let chunk = g.chunk();
    let mut col = vec![0.0; kk * chunk];
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        im2col(x, g, rows_of(g, start, len), &mut col[..kk * len]);
        gemm(g.cout, kk, len, 1.0, weight, kk, 1, &col, len, 1, 1.0, &mut y[start..], n, 1);
        start += len;
    }
    y
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn backward(x: &[f64], weight: &[f64], dy: &[f64], g: &ConvGeom, need_input: bool) -> ConvGrads {
    let n = g.out_len();
    let kk = g.rows();
    let mut dw = vec![0.0; g.cout * kk];
    let db: Vec<f64> = (0..g.cout).map(|c| dy[c * n..(c + 1) * n].iter().sum()).collect();
    let mut dx = need_input.then(|| vec![0.0; g.cin * g.in_len()]);
    if g.is_pointwise() {
        // dW = dY · Xᵀ, dX = Wᵀ · dY
        gemm(g.cout, n, kk, 1.0, dy, n, 1, x, 1, n, 0.0, &mut dw, kk, 1);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, g.cout, n, 1.0, weight, 1, kk, dy, n, 1, 0.0, dx, n, 1);
        }
        return ConvGrads { input: dx, weight: dw, bias: db };
    }
    let chunk = g.chunk();
    let mut col = vec![0.0; kk * chunk];
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let rows = rows_of(g, start, len);
        im2col(x, g, rows.clone(), &mut col[..kk * len]);
        gemm(g.cout, len, kk, 1.0, &dy[start..], n, 1, &col, 1, len, 1.0, &mut dw, kk, 1);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, g.cout, len, 1.0, weight, 1, kk, &dy[start..], n, 1, 0.0, &mut col, len, 1);
            col2im_add(&col[..kk * len], g, rows, dx);
        }
        start += len;
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}
