//! Brute-force references for surface distance and node detection.

pub fn surface_oracle(m: &[bool], s: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                if !m[(z * s[1] + y) * s[2] + x] {
                    continue;
                }
                let p = [z as isize, y as isize, x as isize];
                let exposed = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]].iter().any(|d: &[isize; 3]| {
                    let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                    (0..3).any(|a| q[a] < 0 || q[a] >= s[a] as isize)
                        || !m[((q[0] as usize) * s[1] + q[1] as usize) * s[2] + q[2] as usize]
                });
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

pub fn assd_oracle(a: &[bool], b: &[bool], s: [usize; 3], sp: [f64; 3]) -> f64 {
    let (sa, sb) = (surface_oracle(a, s), surface_oracle(b, s));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2)).sum::<f64>().sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / from.len() as f64
    };
    0.5 * (directed(&sa, &sb) + directed(&sb, &sa))
}

pub fn components_oracle(m: &[bool], s: [usize; 3]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; m.len()];
    let mut comps = Vec::new();
    for start in 0..m.len() {
        if !m[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut i = 0;
        while i < comp.len() {
            let v = comp[i];
            let p = [v / (s[1] * s[2]), (v / s[2]) % s[1], v % s[2]];
            for u in 0..m.len() {
                let q = [u / (s[1] * s[2]), (u / s[2]) % s[1], u % s[2]];
                if m[u] && !seen[u] && (0..3).all(|a| p[a].abs_diff(q[a]) <= 1) {
                    seen[u] = true;
                    comp.push(u);
                }
            }
            i += 1;
        }
        comps.push(comp);
    }
    comps
}

pub fn node_recall_oracle(pred: &[bool], gt: &[bool], s: [usize; 3], thr: f64) -> f64 {
    let gc = components_oracle(gt, s);
    let pc = components_oracle(pred, s);
    let hit = gc
        .iter()
        .filter(|g| {
            pc.iter().any(|p| {
                let inter = g.iter().filter(|v| p.contains(v)).count();
                2.0 * inter as f64 / (g.len() + p.len()) as f64 > thr
            })
        })
        .count();
    hit as f64 / gc.len() as f64
}
