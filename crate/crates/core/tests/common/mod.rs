#![allow(dead_code)]

pub mod grads;

use std::collections::BTreeMap;

use mujica::autograd::Var;
use mujica::gradcheck::{self, GradReport};
use mujica::material::MapKind;
use mujica::model::{Connection, FusionMode, ModelConfig};
use mujica::params::{Graph, Init, ParamSet};
use mujica::tensor::Tensor;
use mujica::Result;

/// S=4, C=8, two fused maps: small enough for 64-bit finite differences.
pub fn tiny_config(connection: Connection, fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        channels: 8,
        embed_dim: 8,
        heads: 2,
        window: 4,
        cabs: 3,
        growth: 4,
        ffe_depth: 1,
        backbone_depth: 1,
        connection,
        fusion,
        fused_maps: vec![MapKind::Basecolor, MapKind::Normal],
        ..Default::default()
    }
}

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Init::new(seed).uniform::<f64>(shape, 0.5).map(|v| lo + (v + 0.5) * (hi - lo))
}

/// Parameters whose names start with any of `prefixes`; frozen flags kept.
pub fn subset(ps: &ParamSet<f64>, prefixes: &[&str]) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (k, v) in ps.iter() {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            out.insert(k.clone(), v.clone());
        }
    }
    for k in ps.frozen_names() {
        if out.contains(&k) {
            out.freeze_prefix(&k);
        }
    }
    out
}

/// `Σ w ⊙ x` with seeded weights, so every output entry matters.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(x), seed, -1.0, 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum_all(y))
}

/// Analytic gradients of `build` against central differences.
pub fn grad_check(
    ps: &ParamSet<f64>,
    step: f64,
    per_tensor: usize,
    build: impl Fn(&mut Graph<f64>) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new(ps);
    let loss = build(&mut g)?;
    let grads = g.param_grads(loss);
    gradcheck::check(ps, &grads, step, per_tensor, 17, |p| {
        let mut g = Graph::new(p);
        let l = build(&mut g)?;
        Ok(g.value(l).data()[0])
    })
}

/// A plausible 4×4-or-larger material: basecolor, normal near +z,
/// gray roughness.
pub fn material_tensors(h: usize, w: usize, seed: u64) -> BTreeMap<MapKind, Tensor<f64>> {
    let mut m = BTreeMap::new();
    m.insert(MapKind::Basecolor, random(&[h, w, 3], seed, 0.1, 0.9));
    let mut n = random(&[h, w, 3], seed + 1, 0.3, 0.7);
    for px in n.data_mut().chunks_mut(3) {
        px[2] = 0.9 + 0.05 * px[2];
    }
    m.insert(MapKind::Normal, n);
    let r = random(&[h, w, 1], seed + 2, 0.25, 0.85);
    let rough = Tensor::from_vec(&[h, w, 3], r.data().iter().flat_map(|&v| [v; 3]).collect()).unwrap();
    m.insert(MapKind::Roughness, rough);
    m
}

/// `base` shifted by ±[0.05, 0.15] per entry, keeping every difference far
/// from the Charbonnier ε where finite differences lose accuracy.
pub fn separated(base: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mag = random(base.shape(), seed, 0.05, 0.15);
    let sign = random(base.shape(), seed + 1, -1.0, 1.0);
    let data = base
        .data()
        .iter()
        .zip(mag.data())
        .zip(sign.data())
        .map(|((&b, &m), &s)| b + m.copysign(s))
        .collect();
    Tensor::from_vec(base.shape(), data).unwrap()
}

/// Literal per-query, per-key multi-stream window attention, before the
/// output projection, on `[nW, N, d]` inputs.
pub fn dense_attention(
    qs: &[Tensor<f64>],
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    biases: &[Tensor<f64>],
    heads: usize,
    s: usize,
) -> (Tensor<f64>, Vec<f64>) {
    let (nw, n, d) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let dh = d / heads;
    let span = 2 * s - 1;
    let mut out = vec![0.0; nw * n * d];
    let mut row_sums = Vec::new();
    for (q, b) in qs.iter().zip(biases) {
        for w in 0..nw {
            for h in 0..heads {
                for i in 0..n {
                    let mut logits = vec![0.0; n];
                    for j in 0..n {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q.data()[(w * n + i) * d + h * dh + c] * k.data()[(w * n + j) * d + h * dh + c];
                        }
                        let (yi, xi) = ((i / s) as isize, (i % s) as isize);
                        let (yj, xj) = ((j / s) as isize, (j % s) as isize);
                        let dy = (yi - yj + s as isize - 1) as usize;
                        let dx = (xi - xj + s as isize - 1) as usize;
                        logits[j] = dot / (dh as f64).sqrt() + b.data()[h * span * span + dy * span + dx];
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    row_sums.push(e.iter().map(|x| x / z).sum());
                    for j in 0..n {
                        let p = e[j] / z;
                        for c in 0..dh {
                            out[(w * n + i) * d + h * dh + c] += p * v.data()[(w * n + j) * d + h * dh + c];
                        }
                    }
                }
            }
        }
    }
    (Tensor::from_vec(k.shape(), out).unwrap(), row_sums)
}

/// `x · W + b` over the last axis.
pub fn affine(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / cin;
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut s = b.data()[o];
            for i in 0..cin {
                s += x.data()[r * cin + i] * w.data()[i * cout + o];
            }
            out[r * cout + o] = s;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_vec(&shape, out).unwrap()
}

/// Plain-loop SSIM with an 11×11 Gaussian window (σ 1.5), valid positions.
pub fn ssim_reference(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (y, row) in g.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for ch in 0..c {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dy][dx] / total;
                        let i = ((y0 + dy) * w + x0 + dx) * c + ch;
                        let (va, vb) = (a.data()[i] as f64, b.data()[i] as f64);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}
