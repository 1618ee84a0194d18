//! Dense reference implementation of the spatial transformer branch.

use lnsynth_core::denoiser::{Denoiser, DenoiserConfig};
use lnsynth_grad::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scramble(params: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// 8³ patch with the transformer at 2³ in the bottleneck.
pub fn oracle_config() -> DenoiserConfig {
    DenoiserConfig {
        channel_multipliers: vec![1, 2, 4],
        attention_resolution: 2,
        num_heads: 1,
        ..super::tiny_config(2)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn layer_norm(x: &[Vec<f64>], gamma: &[f64], beta: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter().enumerate().map(|(j, a)| (a - m) / (v + 1e-5).sqrt() * gamma[j] + beta[j]).collect()
        })
        .collect()
}

pub fn dense(x: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let (fout, fin) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fout)
                .map(|o| b.map_or(0.0, |b| b.data()[o]) + (0..fin).map(|i| row[i] * w.data()[o * fin + i]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum()).collect()
        })
        .collect()
}

pub fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (r, s) in a.iter_mut().zip(b) {
        for (x, y) in r.iter_mut().zip(s) {
            *x += y;
        }
    }
}

/// Dense reimplementation of the transformer branch for one head.
pub fn transformer_oracle(p: &ParamStore, stage: &str, h: &Tensor, tokens: &Tensor, groups: usize) -> Vec<f64> {
    let get = |n: &str| p.get(&format!("{stage}.{n}")).unwrap();
    let c = h.shape()[0];
    let n: usize = h.shape()[1..].iter().product();
    let per = c / groups;
    let mut x = vec![vec![0.0; c]; n];
    for g in 0..groups {
        let vals: Vec<f64> = (g * per..(g + 1) * per).flat_map(|ch| h.data()[ch * n..(ch + 1) * n].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        for ch in g * per..(g + 1) * per {
            for i in 0..n {
                let xhat = (h.data()[ch * n + i] - m) / (var + 1e-5).sqrt();
                x[i][ch] = xhat * get("norm.gamma").data()[ch] + get("norm.beta").data()[ch];
            }
        }
    }
    let pw = get("proj_in.weight").clone().reshape(&[c, c]).unwrap();
    let mut x = dense(&x, &pw, Some(get("proj_in.bias")));
    let tok: Vec<Vec<f64>> = tokens.data().chunks(tokens.shape()[1]).map(|r| r.to_vec()).collect();

    let a = layer_norm(&x, get("ln1.gamma").data(), get("ln1.beta").data());
    let att = softmax_attention(&dense(&a, get("attn1.q.weight"), None), &dense(&a, get("attn1.k.weight"), None), &dense(&a, get("attn1.v.weight"), None));
    add(&mut x, &dense(&att, get("attn1.out.weight"), Some(get("attn1.out.bias"))));

    let a = layer_norm(&x, get("ln2.gamma").data(), get("ln2.beta").data());
    let att = softmax_attention(&dense(&a, get("attn2.q.weight"), None), &dense(&tok, get("attn2.k.weight"), None), &dense(&tok, get("attn2.v.weight"), None));
    add(&mut x, &dense(&att, get("attn2.out.weight"), Some(get("attn2.out.bias"))));

    let a = layer_norm(&x, get("ln3.gamma").data(), get("ln3.beta").data());
    let f: Vec<Vec<f64>> = dense(&a, get("ff.0.weight"), Some(get("ff.0.bias"))).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    add(&mut x, &dense(&f, get("ff.2.weight"), Some(get("ff.2.bias"))));

    let po = get("proj_out.weight").clone().reshape(&[c, c]).unwrap();
    let y = dense(&x, &po, Some(get("proj_out.bias")));
    (0..c).flat_map(|ch| y.iter().map(move |r| r[ch]).collect::<Vec<_>>()).collect()
}

pub fn st_inputs(net: &Denoiser, seed: u64) -> (ParamStore, String, Tensor, Tensor) {
    let cfg = net.config();
    let mut params = net.init_params(seed);
    scramble(&mut params, seed, 0.5);
    let stage = net.transformer_stages()[0].clone();
    let c = cfg.channels()[cfg.attention_level().unwrap()];
    let r = cfg.attention_resolution;
    let h = Tensor::new(&[c, r, r, r], super::normals(c * r * r * r, seed + 1)).unwrap();
    let tokens = Tensor::new(&[r * r * r, cfg.context_dim], super::normals(r * r * r * cfg.context_dim, seed + 2)).unwrap();
    (params, stage, h, tokens)
}

