//! Finite-difference checks shared by the gradient tests and acceptance.

use std::collections::BTreeMap;

use mujica::adapter::{cab_forward, cab_prefix, fusion_forward, mujica_forward, wmca, Mujica};
use mujica::gradcheck::GradReport;
use mujica::losses::{total_loss, Objective};
use mujica::material::MapKind;
use mujica::model::{Connection, FusionMode};
use mujica::params::ParamSet;
use mujica::render::fibonacci_hemisphere;
use mujica::Result;

use super::{grad_check, material_tensors, random, separated, subset, tiny_config, weighted_sum};

pub const STEP: f64 = 1e-4;
const B: MapKind = MapKind::Basecolor;
const N: MapKind = MapKind::Normal;

/// Tiny model with nonzero α and FFE projections so every path carries
/// gradient.
pub fn model(connection: Connection, fusion: FusionMode, seed: u64) -> Mujica<f64> {
    let mut m = Mujica::<f64>::new(tiny_config(connection, fusion), seed).unwrap();
    for name in m.params.trainable_names() {
        if name.ends_with(".alpha") || name.contains(".ffe.") {
            let t = m.params.get_mut(&name).unwrap();
            let r = random(t.shape(), seed + name.len() as u64, -0.3, 0.3);
            *t = r.map(|v| v + 0.05);
        }
    }
    m
}

pub fn wmca_check() -> Result<GradReport> {
    let m = model(Connection::Dc, FusionMode::Wmca, 1);
    let prefix = format!("{}.attn", cab_prefix(B, 0));
    let mut ps = subset(&m.params, &[&prefix]);
    ps.insert("input.basecolor", random(&[4, 16, 8], 2, -1.0, 1.0));
    ps.insert("input.normal", random(&[4, 16, 8], 3, -1.0, 1.0));
    grad_check(&ps, STEP, 6, |g| {
        let xb = g.p("input.basecolor")?;
        let xn = g.p("input.normal")?;
        let y = wmca(g, &prefix, &[(B, xb), (N, xn)], B, 2, 4)?;
        weighted_sum(g, y, 4)
    })
}

pub fn cab_check(fusion: FusionMode) -> Result<GradReport> {
    let m = model(Connection::Dc, fusion, 5);
    let prefix = cab_prefix(N, 1);
    let mut ps = subset(&m.params, &[&prefix]);
    ps.insert("input.dense", random(&[8, 8, 12], 6, -1.0, 1.0));
    ps.insert("input.cross", random(&[8, 8, 8], 7, -1.0, 1.0));
    let cfg = m.config.clone();
    grad_check(&ps, STEP, 5, |g| {
        let d = g.p("input.dense")?;
        let c = g.p("input.cross")?;
        let y = cab_forward(g, &cfg, N, 1, d, &[(B, c)])?;
        weighted_sum(g, y, 8)
    })
}

pub fn fusion_check(conn: Connection) -> Result<GradReport> {
    let m = model(conn, FusionMode::Wmca, 9);
    let mut ps = subset(&m.params, &["adapter."]);
    for (i, k) in [B, N].iter().enumerate() {
        ps.insert(format!("input.deep.{k}"), random(&[4, 4, 8], 10 + i as u64, -1.0, 1.0));
        ps.insert(format!("input.shallow.{k}"), random(&[4, 4, 8], 20 + i as u64, -1.0, 1.0));
    }
    let cfg = m.config.clone();
    grad_check(&ps, STEP, 3, |g| {
        let mut deep = BTreeMap::new();
        let mut shallow = BTreeMap::new();
        for k in [B, N] {
            deep.insert(k, g.p(&format!("input.deep.{k}"))?);
            shallow.insert(k, g.p(&format!("input.shallow.{k}"))?);
        }
        let out = fusion_forward(g, &cfg, &deep, &shallow)?;
        let a = weighted_sum(g, out[&B], 30)?;
        let b = weighted_sum(g, out[&N], 31)?;
        g.add(a, b)
    })
}

/// Gradient of the total loss with respect to the SR maps, through the
/// renderer; 4×4 maps, one light.
pub fn total_loss_check() -> Result<GradReport> {
    let gt = material_tensors(4, 4, 40);
    let mut ps = ParamSet::<f64>::new();
    for (i, (k, t)) in gt.iter().enumerate() {
        ps.insert(format!("sr.{k}"), separated(t, 50 + 2 * i as u64));
    }
    let lights = fibonacci_hemisphere(1).unwrap();
    let obj = Objective::default();
    grad_check(&ps, STEP, 48, |g| {
        let gt_v: BTreeMap<_, _> = gt.iter().map(|(&k, t)| (k, g.constant(t.clone()))).collect();
        let mut sr = BTreeMap::new();
        for k in [B, N, MapKind::Roughness] {
            sr.insert(k, g.p(&format!("sr.{k}"))?);
        }
        Ok(total_loss(g, &sr, &gt_v, &lights, &obj)?.loss)
    })
}

/// Whole adapter forward. Residual chaining keeps kinked activations off
/// the path.
pub fn end_to_end_check() -> Result<GradReport> {
    let m = model(Connection::Rc, FusionMode::Wmca, 60);
    let cfg = m.config.clone();
    let lr = material_tensors(4, 4, 62);
    grad_check(&m.params, STEP, 2, |g| {
        let inputs: BTreeMap<_, _> = lr.iter().map(|(&k, t)| (k, g.constant(t.clone()))).collect();
        let out = mujica_forward(g, &cfg, &inputs)?;
        let mut terms = Vec::new();
        for (i, (_, v)) in out.into_iter().enumerate() {
            terms.push(weighted_sum(g, v, 70 + i as u64)?);
        }
        g.add_scalars(&terms)
    })
}
