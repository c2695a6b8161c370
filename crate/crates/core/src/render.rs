//! Cook-Torrance shading of material sets under distant point lights
//! (GGX distribution, Smith/Schlick-GGX geometry, Schlick Fresnel,
//! metalness workflow), with a differentiable tape operation for the
//! render-space losses.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::material::{MapKind, MaterialSet};
use crate::tensor::{Real, Tensor};

/// Minimum roughness used inside the distribution term.
pub const MIN_ROUGHNESS: f64 = 0.01;
const SPEC_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector from the surface toward the light, `z > 0`.
    pub direction: [f64; 3],
    pub intensity: f64,
}

impl Light {
    pub fn new(direction: [f64; 3], intensity: f64) -> Result<Self> {
        let [x, y, z] = direction;
        let len = (x * x + y * y + z * z).sqrt();
        if !(len > 0.0) || !(z > 0.0) || !(intensity >= 0.0) {
            return Err(Error::Invalid(format!(
                "light direction {direction:?} / intensity {intensity} invalid"
            )));
        }
        Ok(Self { direction: [x / len, y / len, z / len], intensity })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSet {
    pub lights: Vec<Light>,
}

impl LightSet {
    pub fn new(lights: Vec<Light>) -> Result<Self> {
        if lights.is_empty() {
            return Err(Error::Invalid("light set is empty".into()));
        }
        Ok(Self { lights })
    }

    pub fn len(&self) -> usize {
        self.lights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lights.is_empty()
    }

    /// JSON array of `[x, y, z, intensity]` rows.
    pub fn to_json(&self) -> String {
        let rows: Vec<[f64; 4]> = self
            .lights
            .iter()
            .map(|l| [l.direction[0], l.direction[1], l.direction[2], l.intensity])
            .collect();
        serde_json::to_string_pretty(&rows).expect("serialisable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = serde_json::from_str(s)?;
        let lights = rows
            .into_iter()
            .map(|r| match r.as_slice() {
                [x, y, z] => Light::new([*x, *y, *z], 1.0),
                [x, y, z, i] => Light::new([*x, *y, *z], *i),
                _ => Err(Error::Invalid(format!("light row {r:?} needs 3 or 4 numbers"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lights)
    }

    pub fn with_intensity(mut self, intensity: f64) -> Self {
        for l in &mut self.lights {
            l.intensity = intensity;
        }
        self
    }
}

/// `n` quasi-uniform directions on the upper hemisphere:
/// `z_i = (i + ½)/n`, azimuth stepping by the golden-ratio conjugate turn.
pub fn fibonacci_hemisphere(n: usize) -> Result<LightSet> {
    if n == 0 {
        return Err(Error::Invalid("fibonacci_hemisphere needs n >= 1".into()));
    }
    let golden_conj = (5f64.sqrt() - 1.0) / 2.0;
    let lights = (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = 2.0 * PI * ((i as f64 * golden_conj).fract());
            Light { direction: [r * phi.cos(), r * phi.sin(), z], intensity: 1.0 }
        })
        .collect();
    LightSet::new(lights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadingParams {
    pub view: [f64; 3],
    pub f0_dielectric: f64,
    pub exposure: f64,
}

impl Default for ShadingParams {
    fn default() -> Self {
        Self { view: [0.0, 0.0, 1.0], f0_dielectric: 0.04, exposure: 1.0 }
    }
}

// ----------------------------------------------------------------------
// scalar terms

/// Trowbridge-Reitz GGX distribution with `α = roughness²`.
pub fn ndf_ggx(n_dot_h: f64, roughness: f64) -> f64 {
    ndf(n_dot_h, roughness)
}

/// Smith geometry with the Schlick-GGX `G1` and `k = (r + 1)²/8`.
pub fn geometry_smith(n_dot_v: f64, n_dot_l: f64, roughness: f64) -> Result<f64> {
    if !(n_dot_v > 0.0 && n_dot_l > 0.0) {
        return Err(Error::Invalid(format!(
            "geometry term needs positive cosines, got n.v={n_dot_v} n.l={n_dot_l}"
        )));
    }
    Ok(geometry(n_dot_v, n_dot_l, roughness))
}

/// Smith geometry with an explicit remapping constant `k`.
pub fn geometry_smith_k(n_dot_v: f64, n_dot_l: f64, k: f64) -> f64 {
    g1(n_dot_v, k) * g1(n_dot_l, k)
}

pub fn fresnel_schlick(h_dot_v: f64, f0: [f64; 3]) -> [f64; 3] {
    let w = pow5(1.0 - h_dot_v);
    f0.map(|f| f + (1.0 - f) * w)
}

// ----------------------------------------------------------------------
// shading, generic over plain and dual numbers

/// Arithmetic needed by the shading function.
pub trait ShadeNum:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
}

impl ShadeNum for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number with `N` tangent slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; N];
        d[slot] = 1.0;
        Self { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += o.d[i];
        }
        Self { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= o.d[i];
        }
        Self { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + o.d[i] * self.v;
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Self { v: q, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { v: -self.v, d: self.d.map(|x| -x) }
    }
}

impl<const N: usize> ShadeNum for Dual<N> {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let k = if s > 0.0 { 0.5 / s } else { 0.0 };
        Self { v: s, d: self.d.map(|x| x * k) }
    }
}

fn pow5<N: ShadeNum>(x: N) -> N {
    let x2 = x * x;
    x2 * x2 * x
}

fn ndf<N: ShadeNum>(n_dot_h: N, roughness: N) -> N {
    let r = if roughness.val() < MIN_ROUGHNESS { N::cst(MIN_ROUGHNESS) } else { roughness };
    let a = r * r;
    let a2 = a * a;
    let t = n_dot_h * n_dot_h * (a2 - N::cst(1.0)) + N::cst(1.0);
    a2 / (N::cst(PI) * t * t)
}

fn g1<N: ShadeNum>(x: N, k: N) -> N {
    x / (x * (N::cst(1.0) - k) + k)
}

fn geometry<N: ShadeNum>(n_dot_v: N, n_dot_l: N, roughness: N) -> N {
    let rp = roughness + N::cst(1.0);
    let k = rp * rp / N::cst(8.0);
    g1(n_dot_v, k) * g1(n_dot_l, k)
}

fn dot3<N: ShadeNum>(a: [N; 3], b: [N; 3]) -> N {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize3<N: ShadeNum>(v: [N; 3]) -> Option<[N; 3]> {
    let len = dot3(v, v).sqrt();
    if len.val() <= 1e-12 {
        None
    } else {
        Some(v.map(|c| c / len))
    }
}

/// Unclamped outgoing radiance of one pixel.
///
/// `normal_px` is the encoded normal (`2p − 1` is decoded here). Pixels
/// facing away from the light or the viewer return zero.
pub fn shade<N: ShadeNum>(
    basecolor: [N; 3],
    normal_px: [N; 3],
    roughness: N,
    metallic: N,
    light: &Light,
    sh: &ShadingParams,
) -> [N; 3] {
    let zero = [N::cst(0.0); 3];
    let one = N::cst(1.0);
    let n = normalize3(normal_px.map(|p| N::cst(2.0) * p - one))
        .unwrap_or([N::cst(0.0), N::cst(0.0), one]);
    let l = light.direction.map(N::cst);
    let v = sh.view.map(N::cst);
    let n_dot_l = dot3(n, l);
    let n_dot_v = dot3(n, v);
    if n_dot_l.val() <= 0.0 || n_dot_v.val() <= 0.0 {
        return zero;
    }
    let h = normalize3([l[0] + v[0], l[1] + v[1], l[2] + v[2]]).unwrap_or([N::cst(0.0), N::cst(0.0), one]);
    let n_dot_h = {
        let d = dot3(n, h);
        if d.val() < 0.0 {
            N::cst(0.0)
        } else {
            d
        }
    };
    let h_dot_v = {
        let d = dot3(h, v);
        if d.val() < 0.0 {
            N::cst(0.0)
        } else {
            d
        }
    };
    let d = ndf(n_dot_h, roughness);
    let g = geometry(n_dot_v, n_dot_l, roughness);
    let w = pow5(one - h_dot_v);
    let f0d = N::cst(sh.f0_dielectric);
    let denom = N::cst(4.0) * n_dot_v * n_dot_l + N::cst(SPEC_EPS);
    let scale = N::cst(light.intensity * sh.exposure) * n_dot_l;
    let mut out = zero;
    for c in 0..3 {
        let f0 = f0d + (basecolor[c] - f0d) * metallic;
        let f = f0 + (one - f0) * w;
        let kd = (one - f) * (one - metallic);
        let diffuse = kd * basecolor[c] / N::cst(PI);
        let spec = d * f * g / denom;
        out[c] = (diffuse + spec) * scale;
    }
    out
}

/// Per-pixel material inputs pulled from `[H, W, 3]` maps.
struct MapViews<'a, T> {
    base: &'a [T],
    normal: &'a [T],
    rough: &'a [T],
    metal: Option<&'a [T]>,
}

impl<T: Real> MapViews<'_, T> {
    fn pixel(&self, i: usize) -> ([f64; 3], [f64; 3], f64, f64) {
        let j = i * 3;
        let g = |s: &[T], c: usize| s[j + c].f64();
        let mean = |s: &[T]| (g(s, 0) + g(s, 1) + g(s, 2)) / 3.0;
        (
            [g(self.base, 0), g(self.base, 1), g(self.base, 2)],
            [g(self.normal, 0), g(self.normal, 1), g(self.normal, 2)],
            mean(self.rough),
            self.metal.map(mean).unwrap_or(0.0),
        )
    }
}

fn check_maps(shapes: &[&[usize]]) -> Result<(usize, usize)> {
    let first = shapes[0];
    if first.len() != 3 || first[2] != 3 {
        return Err(Error::Shape(format!("render input {first:?} is not [H,W,3]")));
    }
    for s in shapes {
        if *s != first {
            return Err(Error::Shape(format!("render inputs {s:?} vs {first:?}")));
        }
    }
    Ok((first[0], first[1]))
}

/// Linear-space render of one light, clamped to `[0, 1]`. Metallic
/// defaults to zero when absent.
pub fn render_point_light(set: &MaterialSet, light: &Light, sh: &ShadingParams) -> Result<Tensor<f32>> {
    let base = set.require(MapKind::Basecolor)?;
    let normal = set.require(MapKind::Normal)?;
    let rough = set.require(MapKind::Roughness)?;
    let metal = set.get(MapKind::Metallic);
    render_maps(&base.pixels, &normal.pixels, &rough.pixels, metal.map(|m| &m.pixels), light, sh)
}

pub fn render_maps<T: Real>(
    base: &Tensor<T>,
    normal: &Tensor<T>,
    rough: &Tensor<T>,
    metal: Option<&Tensor<T>>,
    light: &Light,
    sh: &ShadingParams,
) -> Result<Tensor<T>> {
    let mut shapes = vec![base.shape(), normal.shape(), rough.shape()];
    shapes.extend(metal.map(|m| m.shape()));
    let (h, w) = check_maps(&shapes)?;
    let views = MapViews {
        base: base.data(),
        normal: normal.data(),
        rough: rough.data(),
        metal: metal.map(|m| m.data()),
    };
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let (b, n, r, m) = views.pixel(i);
        let px = shade(b, n, r, m, light, sh);
        out.extend(px.map(|v| T::c(v.clamp(0.0, 1.0))));
    }
    Tensor::from_vec(&[h, w, 3], out)
}

/// Renders the set under every light, in light order.
pub fn render_set(set: &MaterialSet, lights: &LightSet, sh: &ShadingParams) -> Result<Vec<Tensor<f32>>> {
    lights.lights.par_iter().map(|l| render_point_light(set, l, sh)).collect()
}

/// Display transform for PNG previews only.
pub fn linear_to_srgb(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

const SLOTS: usize = 8;

impl<T: Real> Tape<T> {
    /// Differentiable [`render_maps`]. The per-pixel Jacobian is obtained by
    /// forward-mode duals during the forward pass and contracted with the
    /// incoming gradient on the way back; clamped outputs pass no gradient.
    pub fn render(
        &mut self,
        base: Var,
        normal: Var,
        rough: Var,
        metal: Option<Var>,
        light: &Light,
        sh: &ShadingParams,
    ) -> Result<Var> {
        let mut shapes = vec![self.shape(base), self.shape(normal), self.shape(rough)];
        if let Some(m) = metal {
            shapes.push(self.shape(m));
        }
        let (h, w) = check_maps(&shapes)?;
        let npx = h * w;
        let (vb, vn, vr) = (self.value_rc(base), self.value_rc(normal), self.value_rc(rough));
        let vm = metal.map(|m| self.value_rc(m));
        let views = MapViews {
            base: vb.data(),
            normal: vn.data(),
            rough: vr.data(),
            metal: vm.as_ref().map(|m| m.data()),
        };
        let mut out = Vec::with_capacity(npx * 3);
        // jac[px][out_c][slot]
        let mut jac = vec![0.0f64; npx * 3 * SLOTS];
        for i in 0..npx {
            let (b, n, r, m) = views.pixel(i);
            let bd = [0, 1, 2].map(|c| Dual::<SLOTS>::var(b[c], c));
            let nd = [0, 1, 2].map(|c| Dual::<SLOTS>::var(n[c], 3 + c));
            let rd = Dual::<SLOTS>::var(r, 6);
            let md = Dual::<SLOTS>::var(m, 7);
            let px = shade(bd, nd, rd, md, light, sh);
            for c in 0..3 {
                let v = px[c].v;
                out.push(T::c(v.clamp(0.0, 1.0)));
                if v > 0.0 && v < 1.0 {
                    jac[(i * 3 + c) * SLOTS..(i * 3 + c + 1) * SLOTS].copy_from_slice(&px[c].d);
                }
            }
        }
        let value = Tensor::from_vec(&[h, w, 3], out)?;
        let mut inputs = vec![base, normal, rough];
        inputs.extend(metal);
        Ok(self.push_op(&inputs, value, move |g, s| {
            let gd = g.data();
            let mut db = vec![T::zero(); npx * 3];
            let mut dn = vec![T::zero(); npx * 3];
            let mut dr = vec![T::zero(); npx * 3];
            let mut dm = vec![T::zero(); npx * 3];
            for i in 0..npx {
                let mut acc = [0.0f64; SLOTS];
                for c in 0..3 {
                    let gv = gd[i * 3 + c].f64();
                    if gv == 0.0 {
                        continue;
                    }
                    let row = &jac[(i * 3 + c) * SLOTS..(i * 3 + c + 1) * SLOTS];
                    for k in 0..SLOTS {
                        acc[k] += gv * row[k];
                    }
                }
                for c in 0..3 {
                    db[i * 3 + c] = T::c(acc[c]);
                    dn[i * 3 + c] = T::c(acc[3 + c]);
                    // scalar maps enter through their channel mean
                    dr[i * 3 + c] = T::c(acc[6] / 3.0);
                    dm[i * 3 + c] = T::c(acc[7] / 3.0);
                }
            }
            let shape = [h, w, 3];
            s.add(base, Tensor::from_vec(&shape, db).expect("shape"));
            s.add(normal, Tensor::from_vec(&shape, dn).expect("shape"));
            s.add(rough, Tensor::from_vec(&shape, dr).expect("shape"));
            if let Some(m) = metal {
                s.add(m, Tensor::from_vec(&shape, dm).expect("shape"));
            }
        }))
    }
}
