//! PSNR/SSIM on maps and renderings, per-light consistency, and the bicubic
//! baseline. All metrics work in linear space on [0, 1] values.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Mujica;
use crate::error::{Error, Result};
use crate::material::{bicubic_resample_set, save_material_set, save_png, BitDepth, MapKind, MaterialSet};
use crate::render::{linear_to_srgb, render_set, LightSet, ShadingParams};
use crate::tensor::Tensor;
use crate::train::Pair;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`] when MSE < 1e-10.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut t = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM (11×11, σ 1.5, K1 0.01, K2 0.03, range 1), averaged
/// over channels and valid window positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, c) = match *a.shape() {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        ref s => return Err(Error::Shape(format!("ssim expects an image, got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Resolution(format!("{h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let taps = gaussian_taps();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let ma = filter_valid(&pa, h, w, &taps);
        let mb = filter_valid(&pb, h, w, &taps);
        let saa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let sbb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let sab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let (vx, vy, cov) = (saa[i] - mx * mx, sbb[i] - my * my, sab[i] - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    /// `None` when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
}

impl ImageMetrics {
    pub fn between(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Self> {
        let ssim = match ssim(a, b) {
            Ok(v) => Some(v),
            Err(Error::Resolution(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { psnr: psnr(a, b)?, ssim })
    }
}

/// Render metrics of one set against another under a light set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderMetrics {
    pub per_light: Vec<ImageMetrics>,
    pub psnr_mean: f64,
    pub ssim_mean: Option<f64>,
    /// Across-light standard deviation of per-light PSNR; a consistency
    /// proxy where lower means more uniform fidelity across lights.
    pub psnr_std_across_lights: f64,
}

fn render_metrics(sr: &MaterialSet, gt: &MaterialSet, lights: &LightSet, sh: &ShadingParams) -> Result<RenderMetrics> {
    let rs = render_set(sr, lights, sh)?;
    let rg = render_set(gt, lights, sh)?;
    let per_light = rs
        .iter()
        .zip(&rg)
        .map(|(a, b)| ImageMetrics::between(a, b))
        .collect::<Result<Vec<_>>>()?;
    let n = per_light.len() as f64;
    let psnr_mean = per_light.iter().map(|m| m.psnr).sum::<f64>() / n;
    let var = per_light.iter().map(|m| (m.psnr - psnr_mean).powi(2)).sum::<f64>() / n;
    let ssim_mean = per_light.iter().map(|m| m.ssim).sum::<Option<f64>>().map(|s| s / n);
    Ok(RenderMetrics { per_light, psnr_mean, ssim_mean, psnr_std_across_lights: var.sqrt() })
}

/// Per-light render fidelity and its across-light spread; needs ≥ 2 lights.
pub fn consistency_report(
    sr: &MaterialSet,
    gt: &MaterialSet,
    lights: &LightSet,
    sh: &ShadingParams,
) -> Result<RenderMetrics> {
    if lights.len() < 2 {
        return Err(Error::Invalid("consistency needs at least two lights".into()));
    }
    render_metrics(sr, gt, lights, sh)
}

/// Map and render metrics of one reconstruction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_map: BTreeMap<MapKind, ImageMetrics>,
    pub render: RenderMetrics,
    /// Reserved for an externally supplied learned perceptual metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
}

/// Metrics of `sr` against `gt` over `sr_maps`. Renders take `sr_maps`
/// from `sr` and every other map from `gt`.
pub fn metrics(
    sr: &MaterialSet,
    gt: &MaterialSet,
    sr_maps: &[MapKind],
    lights: &LightSet,
    sh: &ShadingParams,
) -> Result<MetricsReport> {
    let mut per_map = BTreeMap::new();
    for &k in sr_maps {
        per_map.insert(k, ImageMetrics::between(&sr.require(k)?.pixels, &gt.require(k)?.pixels)?);
    }
    let render = render_metrics(&sr.substitute(gt, sr_maps)?, gt, lights, sh)?;
    Ok(MetricsReport { per_map, render, perceptual: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub gt_substitute: bool,
    pub baseline_bicubic: bool,
    pub lights_n: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { gt_substitute: true, baseline_bicubic: true, lights_n: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialEval {
    pub material: String,
    pub model: MetricsReport,
    pub baseline: Option<MetricsReport>,
    /// Model minus baseline mean render PSNR.
    pub render_psnr_delta: Option<f64>,
}

/// Upscales `pair.lr` with `model` and scores it (and optionally bicubic)
/// against `pair.hr`.
pub fn evaluate_pair(
    model: &Mujica<f32>,
    pair: &Pair,
    lights: &LightSet,
    sh: &ShadingParams,
    opts: &EvalOptions,
) -> Result<(MaterialEval, MaterialSet)> {
    let sr = model.upscale(&pair.lr)?;
    if sr.resolution() != pair.hr.resolution() {
        return Err(Error::Resolution(format!(
            "model output {:?} vs ground truth {:?}",
            sr.resolution(),
            pair.hr.resolution()
        )));
    }
    // with substitution only the fused maps are scored as reconstructions
    let sr_maps = if opts.gt_substitute { model.config.fused_kinds() } else { sr.kinds() };
    let m = metrics(&sr, &pair.hr, &sr_maps, lights, sh)?;
    let baseline = if opts.baseline_bicubic {
        let up = bicubic_resample_set(&pair.lr, model.config.scale as f64)?;
        Some(metrics(&up, &pair.hr, &sr_maps, lights, sh)?)
    } else {
        None
    };
    let render_psnr_delta = baseline.as_ref().map(|b| m.render.psnr_mean - b.render.psnr_mean);
    Ok((MaterialEval { material: pair.name.clone(), model: m, baseline, render_psnr_delta }, sr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub materials: Vec<MaterialEval>,
    pub mean_render_psnr: f64,
    pub mean_baseline_render_psnr: Option<f64>,
    pub lights: usize,
    pub gt_substitute: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per material and map, plus a `render` row per material.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["material", "target", "psnr", "ssim", "baseline_psnr", "baseline_ssim", "psnr_std_across_lights"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for m in &self.materials {
            for (k, im) in &m.model.per_map {
                let b = m.baseline.as_ref().and_then(|b| b.per_map.get(k));
                w.write_record([
                    m.material.clone(),
                    k.to_string(),
                    fmt(Some(im.psnr)),
                    fmt(im.ssim),
                    fmt(b.map(|b| b.psnr)),
                    fmt(b.and_then(|b| b.ssim)),
                    String::new(),
                ])?;
            }
            let r = &m.model.render;
            let b = m.baseline.as_ref().map(|b| &b.render);
            w.write_record([
                m.material.clone(),
                "render".into(),
                fmt(Some(r.psnr_mean)),
                fmt(r.ssim_mean),
                fmt(b.map(|b| b.psnr_mean)),
                fmt(b.and_then(|b| b.ssim_mean)),
                fmt(Some(r.psnr_std_across_lights)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `<dir>/sr/<kind>.png` (16-bit) and sRGB render previews
/// `<dir>/render_{i}.png` of the SR set with GT substitution applied.
pub fn write_previews(dir: &Path, sr: &MaterialSet, gt: &MaterialSet, sr_maps: &[MapKind], lights: &LightSet, sh: &ShadingParams) -> Result<()> {
    save_material_set(sr, &dir.join("sr"), BitDepth::Sixteen)?;
    for (i, img) in render_set(&sr.substitute(gt, sr_maps)?, lights, sh)?.iter().enumerate() {
        save_png(&img.map(linear_to_srgb), &dir.join(format!("render_{i:02}.png")), BitDepth::Eight, false)?;
    }
    Ok(())
}

/// Evaluates every pair; deterministic for fixed inputs. With `out`, each
/// material also gets [`write_previews`] under `out/<material>/`.
pub fn evaluate_model(
    model: &Mujica<f32>,
    pairs: &[Pair],
    opts: &EvalOptions,
    sh: &ShadingParams,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let lights = crate::render::fibonacci_hemisphere(opts.lights_n)?;
    let materials: Vec<MaterialEval> = pairs
        .par_iter()
        .map(|p| {
            let (e, sr) = evaluate_pair(model, p, &lights, sh, opts)?;
            if let Some(dir) = out {
                let maps = if opts.gt_substitute { model.config.fused_kinds() } else { sr.kinds() };
                write_previews(&dir.join(&p.name), &sr, &p.hr, &maps, &lights, sh)?;
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let n = materials.len().max(1) as f64;
    let mean_render_psnr = materials.iter().map(|m| m.model.render.psnr_mean).sum::<f64>() / n;
    let mean_baseline_render_psnr = materials
        .iter()
        .map(|m| m.baseline.as_ref().map(|b| b.render.psnr_mean))
        .sum::<Option<f64>>()
        .map(|s| s / n);
    Ok(EvalReport { materials, mean_render_psnr, mean_baseline_render_psnr, lights: lights.len(), gt_substitute: opts.gt_substitute })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::from_vec(&[h, w, 3], (0..h * w * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |_| 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = img(4, 4, |_| 0.75);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
        let c = img(4, 4, |_| 0.5);
        assert!((psnr(&a, &c).unwrap() - psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&a, &img(2, 2, |_| 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_inverse() {
        let a = img(16, 16, |i| ((i * 37 % 101) as f32) / 100.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&img(8, 8, |_| 0.0), &img(8, 8, |_| 0.0)).is_err());
    }
}
