//! Charbonnier and layer-weighted feature losses on maps and renderings.
//!
//! `total = rec + mat` where
//! `rec = Σ_lights [ρ(R(gt), R(sr)) + P(R(gt), R(sr))]` and
//! `mat = Σ_maps [ρ(gt, sr) + P(gt, sr)]`, with `ρ` the Charbonnier
//! penalty and `P` the feature loss.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::material::MapKind;
use crate::params::Init;
use crate::render::{LightSet, ShadingParams};
use crate::tensor::{Real, Tensor};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_LAMBDAS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const EXTRACTOR_SEED: u64 = 0x5eed;

impl<T: Real> Tape<T> {
    /// `mean(√((pred − gt)² + ε²))` as a scalar.
    pub fn charbonnier(&mut self, pred: Var, gt: Var, eps: f64) -> Result<Var> {
        if self.shape(pred) != self.shape(gt) {
            return Err(Error::Shape(format!(
                "charbonnier of {:?} and {:?}",
                self.shape(pred),
                self.shape(gt)
            )));
        }
        let (p, t) = (self.value_rc(pred), self.value_rc(gt));
        let e2 = T::c(eps * eps);
        let n = T::c(p.len() as f64);
        let roots: Vec<T> = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt())
            .collect();
        // offset by ε so equal inputs give exactly ε
        let eps_t = T::c(eps);
        let mean = eps_t + roots.iter().fold(T::zero(), |s, &r| s + (r - eps_t)) / n;
        Ok(self.push_op(&[pred, gt], Tensor::scalar(mean), move |g, sink| {
            let k = g.data()[0] / n;
            let grad: Vec<T> = p
                .data()
                .iter()
                .zip(t.data())
                .zip(&roots)
                .map(|((&a, &b), &r)| if r > T::zero() { k * (a - b) / r } else { T::zero() })
                .collect();
            let shape = p.shape().to_vec();
            if sink.wants(gt) {
                let neg: Vec<T> = grad.iter().map(|&v| -v).collect();
                sink.add(gt, Tensor::from_vec(&shape, neg).expect("shape"));
            }
            sink.add(pred, Tensor::from_vec(&shape, grad).expect("shape"));
        }))
    }
}

/// Plain-value Charbonnier for reports and oracles.
pub fn charbonnier_value<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, eps: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("charbonnier of {:?} and {:?}", pred.shape(), gt.shape())));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a.f64() - b.f64();
            (d * d + eps * eps).sqrt() - eps
        })
        .sum();
    Ok(eps + sum / pred.len() as f64)
}

/// One feature stage; stages compose, so stage `i` sees stage `i−1`'s output.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureStage {
    Identity,
    /// 3×3 conv (padding 1) followed by ReLU.
    Conv { weight: Tensor<f32>, bias: Tensor<f32>, stride: usize },
}

/// Frozen feature pyramid with per-stage weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<FeatureStage>,
    lambdas: Vec<f64>,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::random_pyramid(&DEFAULT_WIDTHS, &DEFAULT_LAMBDAS, EXTRACTOR_SEED).expect("default extractor")
    }
}

impl PerceptualExtractor {
    pub fn new(stages: Vec<FeatureStage>, lambdas: Vec<f64>) -> Result<Self> {
        if stages.len() != lambdas.len() {
            return Err(Error::Invalid(format!("{} stages but {} weights", stages.len(), lambdas.len())));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Invalid("feature weights must be finite and nonnegative".into()));
        }
        let mut cin = 3;
        for (i, s) in stages.iter().enumerate() {
            if let FeatureStage::Conv { weight, bias, stride } = s {
                let ws = weight.shape();
                if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != cin || bias.shape() != [ws[3]] || *stride == 0 {
                    return Err(Error::Shape(format!("feature stage {i}: weight {ws:?} for {cin} input channels")));
                }
                cin = ws[3];
            }
        }
        Ok(Self { stages, lambdas })
    }

    /// Seeded random stride-2 conv pyramid with He-uniform weights.
    pub fn random_pyramid(widths: &[usize], lambdas: &[f64], seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut cin = 3;
        let stages = widths
            .iter()
            .map(|&cout| {
                let fan_in = 9 * cin;
                let weight = init.uniform(&[3, 3, cin, cout], (6.0 / fan_in as f64).sqrt());
                cin = cout;
                FeatureStage::Conv { weight, bias: Tensor::zeros(&[cout]), stride: 2 }
            })
            .collect();
        Self::new(stages, lambdas.to_vec())
    }

    /// Single identity stage with weight 1.
    pub fn identity() -> Self {
        Self { stages: vec![FeatureStage::Identity], lambdas: vec![1.0] }
    }

    /// No stages; the feature loss is identically zero.
    pub fn none() -> Self {
        Self { stages: Vec::new(), lambdas: Vec::new() }
    }

    /// Loads `stage{i}.w` / `stage{i}.b` tensors and a `lambda` vector from a
    /// checkpoint-format file. Stages use stride 2.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path)?;
        let lambdas: Vec<f64> = ck.tensor("lambda")?.data().iter().map(|&v| v as f64).collect();
        let stages = (0..lambdas.len())
            .map(|i| {
                Ok(FeatureStage::Conv {
                    weight: ck.tensor(&format!("stage{i}.w"))?.clone(),
                    bias: ck.tensor(&format!("stage{i}.b"))?.clone(),
                    stride: 2,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages, lambdas)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn stages(&self) -> &[FeatureStage] {
        &self.stages
    }

    /// Feature maps of every stage.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, img: Var) -> Result<Vec<Var>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            if let FeatureStage::Conv { weight, bias, stride } = s {
                let w = tape.constant(weight.cast());
                let b = tape.constant(bias.cast());
                let y = tape.conv2d(x, w, Some(b), *stride, 1)?;
                x = tape.relu(y);
            }
            out.push(x);
        }
        Ok(out)
    }

    /// `Σ_i λ_i · ρ(φ_i(gt), φ_i(pred))`.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, pred: Var, gt: Var, eps: f64) -> Result<Var> {
        let fp = self.features(tape, pred)?;
        let fg = self.features(tape, gt)?;
        let mut terms = Vec::new();
        for ((&a, &b), &lambda) in fp.iter().zip(&fg).zip(&self.lambdas) {
            if lambda != 0.0 {
                let c = tape.charbonnier(a, b, eps)?;
                terms.push(tape.scale(c, T::c(lambda)));
            }
        }
        if terms.is_empty() {
            return Ok(tape.constant(Tensor::scalar(T::zero())));
        }
        tape.add_scalars(&terms)
    }
}

/// Everything the objective needs besides the maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub extractor: PerceptualExtractor,
    pub eps: f64,
    pub shading: ShadingParams,
}

impl Default for Objective {
    fn default() -> Self {
        Self { extractor: PerceptualExtractor::default(), eps: CHARBONNIER_EPS, shading: ShadingParams::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rec: f64,
    pub mat: f64,
    pub rec_pixel: f64,
    pub rec_perc: f64,
    pub mat_pixel: f64,
    pub mat_perc: f64,
    pub per_map: BTreeMap<MapKind, f64>,
    pub per_light: Vec<f64>,
    pub lights: usize,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.rec, self.mat].iter().all(|v| v.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.total += r.total / n;
            out.rec += r.rec / n;
            out.mat += r.mat / n;
            out.rec_pixel += r.rec_pixel / n;
            out.rec_perc += r.rec_perc / n;
            out.mat_pixel += r.mat_pixel / n;
            out.mat_perc += r.mat_perc / n;
            for (k, v) in &r.per_map {
                *out.per_map.entry(*k).or_default() += v / n;
            }
            if out.per_light.len() < r.per_light.len() {
                out.per_light.resize(r.per_light.len(), 0.0);
            }
            for (o, v) in out.per_light.iter_mut().zip(&r.per_light) {
                *o += v / n;
            }
            out.lights = r.lights;
        }
        out
    }
}

/// A scalar loss on the tape plus its breakdown.
pub struct LossTerms {
    pub loss: Var,
    pub report: LossReport,
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].f64()
}

fn sum<T: Real>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    if xs.is_empty() {
        Ok(tape.constant(Tensor::scalar(T::zero())))
    } else {
        tape.add_scalars(xs)
    }
}

fn render_inputs(maps: &BTreeMap<MapKind, Var>) -> Result<(Var, Var, Var, Option<Var>)> {
    let get = |k: MapKind| {
        maps.get(&k)
            .copied()
            .ok_or_else(|| Error::MissingMap { kind: k, location: "render input".into() })
    };
    Ok((get(MapKind::Basecolor)?, get(MapKind::Normal)?, get(MapKind::Roughness)?, maps.get(&MapKind::Metallic).copied()))
}

/// Render loss summed over lights. Both sides need basecolor, normal and
/// roughness; metallic is used when present.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    sr: &BTreeMap<MapKind, Var>,
    gt: &BTreeMap<MapKind, Var>,
    lights: &LightSet,
    obj: &Objective,
) -> Result<LossTerms> {
    if lights.is_empty() {
        return Err(Error::Invalid("reconstruction loss needs at least one light".into()));
    }
    let (sb, sn, sr_r, sm) = render_inputs(sr)?;
    let (gb, gn, gr, gm) = render_inputs(gt)?;
    if sm.is_some() != gm.is_some() {
        return Err(Error::Invalid("metallic present on only one side".into()));
    }
    let mut pixel = Vec::new();
    let mut perc = Vec::new();
    let mut per_light = Vec::new();
    for light in &lights.lights {
        let rs = tape.render(sb, sn, sr_r, sm, light, &obj.shading)?;
        let rg = tape.render(gb, gn, gr, gm, light, &obj.shading)?;
        let p = tape.charbonnier(rg, rs, obj.eps)?;
        let f = obj.extractor.loss(tape, rs, rg, obj.eps)?;
        per_light.push(scalar(tape, p) + scalar(tape, f));
        pixel.push(p);
        perc.push(f);
    }
    let pixel = sum(tape, &pixel)?;
    let perc = sum(tape, &perc)?;
    let loss = tape.add(pixel, perc)?;
    let report = LossReport {
        rec: scalar(tape, loss),
        rec_pixel: scalar(tape, pixel),
        rec_perc: scalar(tape, perc),
        per_light,
        lights: lights.len(),
        ..Default::default()
    };
    Ok(LossTerms { loss, report })
}

/// Direct map loss summed over maps; both sides must hold the same kinds.
pub fn material_loss<T: Real>(
    tape: &mut Tape<T>,
    sr: &BTreeMap<MapKind, Var>,
    gt: &BTreeMap<MapKind, Var>,
    obj: &Objective,
) -> Result<LossTerms> {
    if sr.keys().ne(gt.keys()) {
        return Err(Error::Invalid(format!(
            "material loss over {:?} vs {:?}",
            sr.keys().collect::<Vec<_>>(),
            gt.keys().collect::<Vec<_>>()
        )));
    }
    let mut pixel = Vec::new();
    let mut perc = Vec::new();
    let mut per_map = BTreeMap::new();
    for (k, &s) in sr {
        let g = gt[k];
        let p = tape.charbonnier(g, s, obj.eps)?;
        let f = obj.extractor.loss(tape, s, g, obj.eps)?;
        per_map.insert(*k, scalar(tape, p) + scalar(tape, f));
        pixel.push(p);
        perc.push(f);
    }
    let pixel = sum(tape, &pixel)?;
    let perc = sum(tape, &perc)?;
    let loss = tape.add(pixel, perc)?;
    let report = LossReport {
        mat: scalar(tape, loss),
        mat_pixel: scalar(tape, pixel),
        mat_perc: scalar(tape, perc),
        per_map,
        ..Default::default()
    };
    Ok(LossTerms { loss, report })
}

/// `rec + mat`. `sr` holds the super-resolved maps; renders take any map
/// missing from `sr` from `gt`, and the map term covers `sr`'s maps only.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    sr: &BTreeMap<MapKind, Var>,
    gt: &BTreeMap<MapKind, Var>,
    lights: &LightSet,
    obj: &Objective,
) -> Result<LossTerms> {
    let mut render_sr = gt.clone();
    for (k, &v) in sr {
        if !gt.contains_key(k) {
            return Err(Error::MissingMap { kind: *k, location: "ground truth".into() });
        }
        render_sr.insert(*k, v);
    }
    let gt_mat: BTreeMap<MapKind, Var> = sr.keys().map(|k| (*k, gt[k])).collect();
    let rec = reconstruction_loss(tape, &render_sr, gt, lights, obj)?;
    let mat = material_loss(tape, sr, &gt_mat, obj)?;
    let loss = tape.add(rec.loss, mat.loss)?;
    let report = LossReport {
        total: scalar(tape, loss),
        mat: mat.report.mat,
        mat_pixel: mat.report.mat_pixel,
        mat_perc: mat.report.mat_perc,
        per_map: mat.report.per_map,
        ..rec.report
    };
    Ok(LossTerms { loss, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::fibonacci_hemisphere;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn charbonnier_examples() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[4, 4, 3], |i| i as f64 * 0.01));
        let b = tp.constant(t(&[4, 4, 3], |i| i as f64 * 0.01 + 3e-3));
        let same = tp.charbonnier(a, a, 1e-3).unwrap();
        assert_eq!(tp.value(same).data()[0], 1e-3);
        let d = tp.charbonnier(a, b, 1e-3).unwrap();
        assert!((tp.value(d).data()[0] - 1e-5f64.sqrt()).abs() < 1e-12);
        let mae = tp.charbonnier(a, b, 0.0).unwrap();
        assert!((tp.value(mae).data()[0] - 3e-3).abs() < 1e-12);
        let c = tp.constant(Tensor::zeros(&[2]));
        assert!(tp.charbonnier(a, c, 1e-3).is_err());
    }

    #[test]
    fn feature_loss_reductions() {
        let ex = PerceptualExtractor::default();
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(t(&[16, 16, 3], |i| (i as f64 * 0.37).sin().abs()));
        let b = tp.constant(t(&[16, 16, 3], |i| (i as f64 * 0.11).cos().abs()));
        let same = ex.loss(&mut tp, a, a, 1e-3).unwrap();
        let expect: f64 = DEFAULT_LAMBDAS.iter().sum::<f64>() * 1e-3;
        assert!((tp.value(same).data()[0] - expect).abs() < 1e-15);
        let zero = PerceptualExtractor::random_pyramid(&DEFAULT_WIDTHS, &[0.0; 4], 1).unwrap();
        let z = zero.loss(&mut tp, a, b, 1e-3).unwrap();
        assert_eq!(tp.value(z).data()[0], 0.0);
        let id = PerceptualExtractor::identity().loss(&mut tp, a, b, 1e-3).unwrap();
        let direct = tp.charbonnier(b, a, 1e-3).unwrap();
        assert_eq!(tp.value(id).data()[0], tp.value(direct).data()[0]);
        assert!(PerceptualExtractor::new(vec![FeatureStage::Identity], vec![]).is_err());
    }

    fn material(seed: usize) -> BTreeMap<MapKind, Tensor<f64>> {
        let mk = |off: usize, lo: f64, hi: f64| t(&[4, 4, 3], |i| lo + (hi - lo) * (((i + off + seed) as f64 * 0.618).fract()));
        let mut m = BTreeMap::new();
        m.insert(MapKind::Basecolor, mk(0, 0.1, 0.9));
        let mut n = mk(7, 0.35, 0.65);
        for px in n.data_mut().chunks_mut(3) {
            px[2] = 0.95;
        }
        m.insert(MapKind::Normal, n);
        let r = mk(3, 0.2, 0.8);
        let r = t(&[4, 4, 3], |i| r.data()[i / 3 * 3]);
        m.insert(MapKind::Roughness, r);
        m
    }

    #[test]
    fn identical_sets_hit_the_plateau() {
        let obj = Objective::default();
        let lights = fibonacci_hemisphere(3).unwrap();
        let mut tp = Tape::<f64>::new();
        let gt: BTreeMap<_, _> = material(0).into_iter().map(|(k, v)| (k, tp.constant(v))).collect();
        let terms = total_loss(&mut tp, &gt, &gt, &lights, &obj).unwrap();
        let unit = 1e-3 * (1.0 + DEFAULT_LAMBDAS.iter().sum::<f64>());
        let r = &terms.report;
        assert!((r.rec - 3.0 * unit).abs() < 1e-12);
        assert!((r.mat - 3.0 * unit).abs() < 1e-12);
        assert!((r.total - (r.rec + r.mat)).abs() < 1e-12);
        assert_eq!(r.per_light.len(), 3);
    }

    #[test]
    fn perturbing_one_map_changes_only_its_entry() {
        let obj = Objective::default();
        let lights = fibonacci_hemisphere(1).unwrap();
        let mut tp = Tape::<f64>::new();
        let gt: BTreeMap<_, _> = material(0).into_iter().map(|(k, v)| (k, tp.constant(v))).collect();
        let mut sr = gt.clone();
        sr.insert(MapKind::Basecolor, tp.constant(material(5)[&MapKind::Basecolor].clone()));
        let r = total_loss(&mut tp, &sr, &gt, &lights, &obj).unwrap().report;
        let unit = 1e-3 * (1.0 + DEFAULT_LAMBDAS.iter().sum::<f64>());
        assert!(r.per_map[&MapKind::Basecolor] > unit + 1e-6);
        assert!((r.per_map[&MapKind::Normal] - unit).abs() < 1e-15);
        assert!((r.per_map[&MapKind::Roughness] - unit).abs() < 1e-15);
    }

    #[test]
    fn empty_light_set_rejected() {
        let lights = LightSet { lights: Vec::new() };
        let mut tp = Tape::<f64>::new();
        let gt: BTreeMap<_, _> = material(0).into_iter().map(|(k, v)| (k, tp.constant(v))).collect();
        assert!(reconstruction_loss(&mut tp, &gt, &gt, &lights, &Objective::default()).is_err());
    }
}
