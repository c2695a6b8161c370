//! PBR material map sets: loading, saving, normal decoding, bicubic
//! resampling, and aligned LR/HR cropping.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Basecolor,
    Normal,
    Roughness,
    Metallic,
}

impl MapKind {
    pub const ALL: [MapKind; 4] =
        [MapKind::Basecolor, MapKind::Normal, MapKind::Roughness, MapKind::Metallic];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Basecolor => "basecolor",
            MapKind::Normal => "normal",
            MapKind::Roughness => "roughness",
            MapKind::Metallic => "metallic",
        }
    }

    /// Scalar maps are stored as three equal channels.
    pub fn is_gray(self) -> bool {
        matches!(self, MapKind::Roughness | MapKind::Metallic)
    }

    pub fn file_name(self) -> String {
        format!("{}.png", self.name())
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Invalid(format!("unknown map kind `{s}`")))
    }
}

/// One texture map; `pixels` is `[H, W, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMap {
    pub kind: MapKind,
    pub pixels: Tensor<f32>,
}

impl MaterialMap {
    pub fn new(kind: MapKind, pixels: Tensor<f32>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Shape(format!("{kind} map must be [H,W,3], got {s:?}")));
        }
        Ok(Self { kind, pixels })
    }

    pub fn constant(kind: MapKind, h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let data = (0..h * w).flat_map(|_| rgb).collect();
        Self { kind, pixels: Tensor::from_vec(&[h, w, 3], data).expect("shape") }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn at(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width() + x) * 3;
        let d = self.pixels.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self { kind: self.kind, pixels: crop_image(&self.pixels, y0, x0, h, w)? })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaterialSet {
    maps: BTreeMap<MapKind, MaterialMap>,
}

impl MaterialSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_maps(maps: impl IntoIterator<Item = MaterialMap>) -> Result<Self> {
        let mut set = Self::new();
        for m in maps {
            set.insert(m)?;
        }
        Ok(set)
    }

    /// Adds or replaces a map; all maps must share one resolution.
    pub fn insert(&mut self, map: MaterialMap) -> Result<()> {
        if let Some(res) = self.resolution() {
            let other_kinds = self.maps.keys().any(|&k| k != map.kind);
            if other_kinds && res != map.resolution() {
                return Err(Error::Resolution(format!(
                    "{} is {:?}, set is {res:?}",
                    map.kind,
                    map.resolution()
                )));
            }
        }
        self.maps.insert(map.kind, map);
        Ok(())
    }

    pub fn get(&self, kind: MapKind) -> Option<&MaterialMap> {
        self.maps.get(&kind)
    }

    pub fn require(&self, kind: MapKind) -> Result<&MaterialMap> {
        self.get(kind)
            .ok_or_else(|| Error::MissingMap { kind, location: "material set".into() })
    }

    pub fn contains(&self, kind: MapKind) -> bool {
        self.maps.contains_key(&kind)
    }

    pub fn kinds(&self) -> Vec<MapKind> {
        self.maps.keys().copied().collect()
    }

    pub fn maps(&self) -> impl Iterator<Item = &MaterialMap> {
        self.maps.values()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.maps.values().next().map(|m| m.resolution())
    }

    pub fn map_each(&self, f: impl Fn(&MaterialMap) -> Result<MaterialMap>) -> Result<Self> {
        Self::from_maps(self.maps.values().map(f).collect::<Result<Vec<_>>>()?)
    }

    /// Copy in which every map absent from `keep` is taken from `other`.
    pub fn substitute(&self, other: &MaterialSet, keep: &[MapKind]) -> Result<Self> {
        let mut out = other.clone();
        for &k in keep {
            if let Some(m) = self.get(k) {
                out.insert(m.clone())?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Normal-map pixels whose decoded vector pointed below the surface.
    pub degenerate_normals: usize,
}

fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    let rgb = img.to_rgb16();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

/// Loads every `<kind>.png` under `dir`. Kinds in `required` must exist.
pub fn load_material_set(dir: &Path, required: &[MapKind]) -> Result<(MaterialSet, LoadReport)> {
    let mut set = MaterialSet::new();
    let mut report = LoadReport::default();
    for kind in MapKind::ALL {
        let path = dir.join(kind.file_name());
        if !path.exists() {
            if required.contains(&kind) {
                return Err(Error::MissingMap { kind, location: dir.display().to_string() });
            }
            continue;
        }
        let mut pixels = read_png(&path)?;
        if kind.is_gray() {
            for px in pixels.data_mut().chunks_mut(3) {
                let v = px[0];
                px.fill(v);
            }
        }
        let mut map = MaterialMap::new(kind, pixels)?;
        if kind == MapKind::Normal {
            report.degenerate_normals = repair_normals(&mut map);
        }
        set.insert(map).map_err(|e| match e {
            Error::Resolution(msg) => Error::Resolution(format!("{}: {msg}", dir.display())),
            other => other,
        })?;
    }
    Ok((set, report))
}

/// Rewrites below-horizon or zero-length normal pixels as the flat normal.
fn repair_normals(map: &mut MaterialMap) -> usize {
    let mut bad = 0;
    for px in map.pixels.data_mut().chunks_mut(3) {
        let v = [2.0 * px[0] - 1.0, 2.0 * px[1] - 1.0, 2.0 * px[2] - 1.0];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len <= 1e-12 || v[2] <= 0.0 {
            px.copy_from_slice(&[0.5, 0.5, 1.0]);
            bad += 1;
        }
    }
    bad
}

/// Tangent-space unit normals `normalize(2p − 1)`. Pixels that decode to a
/// zero vector or to `z ≤ 0` are replaced by `(0, 0, 1)`; their count is
/// returned alongside.
pub fn decode_normal(map: &MaterialMap) -> Result<(Tensor<f32>, usize)> {
    if map.kind != MapKind::Normal {
        return Err(Error::Invalid(format!("decode_normal on a {} map", map.kind)));
    }
    let mut out = map.pixels.clone();
    let mut bad = 0;
    for px in out.data_mut().chunks_mut(3) {
        let v = [
            2.0 * px[0] as f64 - 1.0,
            2.0 * px[1] as f64 - 1.0,
            2.0 * px[2] as f64 - 1.0,
        ];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len <= 1e-12 || v[2] <= 0.0 {
            px.copy_from_slice(&[0.0, 0.0, 1.0]);
            bad += 1;
        } else {
            for c in 0..3 {
                px[c] = (v[c] / len) as f32;
            }
        }
    }
    Ok((out, bad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max + 0.5).floor()
}

/// Writes one PNG per map; scalar maps are stored as grayscale.
pub fn save_material_set(set: &MaterialSet, dir: &Path, depth: BitDepth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for map in set.maps() {
        save_png(&map.pixels, &dir.join(map.kind.file_name()), depth, map.kind.is_gray())?;
    }
    Ok(())
}

/// Saves an `[H, W, 3]` image with values in `[0, 1]` (round-half-up).
pub fn save_png(img: &Tensor<f32>, path: &Path, depth: BitDepth, gray: bool) -> Result<()> {
    let (h, w) = (img.shape()[0] as u32, img.shape()[1] as u32);
    let err = |source| Error::Image { path: path.into(), source };
    let px = img.data();
    match (depth, gray) {
        (BitDepth::Eight, false) => {
            let raw = px.iter().map(|&v| quantize(v, 255.0) as u8).collect();
            ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w, h, raw).expect("size").save(path).map_err(err)
        }
        (BitDepth::Eight, true) => {
            let raw = px.chunks(3).map(|p| quantize(p[0], 255.0) as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, raw).expect("size").save(path).map_err(err)
        }
        (BitDepth::Sixteen, false) => {
            let raw = px.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw).expect("size").save(path).map_err(err)
        }
        (BitDepth::Sixteen, true) => {
            let raw = px.chunks(3).map(|p| quantize(p[0], 65535.0) as u16).collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, raw).expect("size").save(path).map_err(err)
        }
    }
}

pub fn crop_image(img: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    let (ih, iw, c) = (s[0], s[1], s[2]);
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::Shape(format!("crop {h}x{w}@({y0},{x0}) outside {ih}x{iw}")));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let row = (y * iw + x0) * c;
        data.extend_from_slice(&img.data()[row..row + w * c]);
    }
    Tensor::from_vec(&[h, w, c], data)
}

/// Catmull-Rom family cubic kernel with `a = −0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample `(first tap, weights)` for a 1D resize. When shrinking,
/// the kernel is stretched by `1/scale` (antialiased); taps beyond the edge
/// are clamped to the border sample.
pub(crate) fn resize_weights(n_in: usize, n_out: usize) -> Vec<(isize, Vec<f64>)> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let first = (center - support).floor() as isize;
            let last = (center + support).ceil() as isize;
            let mut ws: Vec<f64> =
                (first..=last).map(|j| cubic_kernel((center - j as f64) * stretch)).collect();
            let sum: f64 = ws.iter().sum();
            ws.iter_mut().for_each(|w| *w /= sum);
            (first, ws)
        })
        .collect()
}

/// Separable bicubic resize of an `[H, W, C]` image to `out_h × out_w`,
/// clamped to `[0, 1]`.
pub fn resize_bicubic(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("resize {s:?} to {out_h}x{out_w}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    // horizontal pass
    let wx = resize_weights(w, out_w);
    let mut tmp = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (ox, (first, ws)) in wx.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in ws.iter().enumerate() {
                    let x = clampi(first + t as isize, w);
                    acc += wt * img.data()[(y * w + x) * c + ch] as f64;
                }
                tmp[(y * out_w + ox) * c + ch] = acc;
            }
        }
    }
    // vertical pass
    let wy = resize_weights(h, out_h);
    let mut out = vec![0.0f32; out_h * out_w * c];
    for (oy, (first, ws)) in wy.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in ws.iter().enumerate() {
                    let y = clampi(first + t as isize, h);
                    acc += wt * tmp[(y * out_w + ox) * c + ch];
                }
                out[(oy * out_w + ox) * c + ch] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, c], out)
}

fn scaled_dim(n: usize, scale: f64) -> Result<usize> {
    let v = n as f64 * scale;
    if (v - v.round()).abs() > 1e-9 || v.round() < 1.0 {
        return Err(Error::Invalid(format!("{n} x {scale} is not an integral size")));
    }
    Ok(v.round() as usize)
}

/// Bicubic rescale by one of the supported factors.
pub fn bicubic_resample(map: &MaterialMap, scale: f64) -> Result<MaterialMap> {
    if ![0.25, 0.5, 1.0, 2.0, 4.0].contains(&scale) {
        return Err(Error::Invalid(format!("unsupported scale {scale}")));
    }
    if scale == 1.0 {
        return Ok(map.clone());
    }
    let oh = scaled_dim(map.height(), scale)?;
    let ow = scaled_dim(map.width(), scale)?;
    Ok(MaterialMap { kind: map.kind, pixels: resize_bicubic(&map.pixels, oh, ow)? })
}

pub fn bicubic_resample_set(set: &MaterialSet, scale: f64) -> Result<MaterialSet> {
    set.map_each(|m| bicubic_resample(m, scale))
}

/// Aligned random crops: a `patch²` LR window and the matching
/// `(patch·scale)²` HR window at `scale ×` the LR origin.
pub fn random_crop_pair<R: Rng + ?Sized>(
    hr: &MaterialSet,
    lr: &MaterialSet,
    patch: usize,
    scale: usize,
    rng: &mut R,
) -> Result<(MaterialSet, MaterialSet)> {
    let (lh, lw) = lr.resolution().ok_or_else(|| Error::Invalid("empty LR set".into()))?;
    let (hh, hw) = hr.resolution().ok_or_else(|| Error::Invalid("empty HR set".into()))?;
    if (hh, hw) != (lh * scale, lw * scale) {
        return Err(Error::Resolution(format!(
            "HR {hh}x{hw} is not {scale}x LR {lh}x{lw}"
        )));
    }
    if patch == 0 || patch > lh || patch > lw {
        return Err(Error::Invalid(format!("patch {patch} larger than LR {lh}x{lw}")));
    }
    let y = rng.gen_range(0..=lh - patch);
    let x = rng.gen_range(0..=lw - patch);
    let lr_c = lr.map_each(|m| m.crop(y, x, patch, patch))?;
    let hp = patch * scale;
    let hr_c = hr.map_each(|m| m.crop(y * scale, x * scale, hp, hp))?;
    Ok((hr_c, lr_c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<(String, PathBuf)>,
    pub split: Split,
}

#[derive(Deserialize)]
struct IndexFile {
    #[serde(default)]
    train: Vec<String>,
    #[serde(default)]
    val: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

impl DatasetIndex {
    /// Material directories under `root`. If `root/index.json` exists it
    /// selects the split's ids; otherwise every directory holding at least
    /// one map belongs to every split.
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let index = root.join("index.json");
        let entries: Vec<(String, PathBuf)> = if index.exists() {
            let f: IndexFile = serde_json::from_reader(std::fs::File::open(&index)?)?;
            let ids = match split {
                Split::Train => f.train,
                Split::Val => f.val,
                Split::Test => f.test,
            };
            ids.into_iter().map(|id| (id.clone(), root.join(&id))).collect()
        } else {
            let mut v = Vec::new();
            for e in std::fs::read_dir(root)? {
                let p = e?.path();
                if p.is_dir() && MapKind::ALL.iter().any(|k| p.join(k.file_name()).exists()) {
                    let id = p.file_name().expect("dir name").to_string_lossy().into_owned();
                    v.push((id, p));
                }
            }
            v.sort();
            v
        };
        let idx = Self { entries, split };
        idx.validate()?;
        Ok(idx)
    }

    pub fn from_entries(entries: Vec<(String, PathBuf)>, split: Split) -> Result<Self> {
        let idx = Self { entries, split };
        idx.validate()?;
        Ok(idx)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Invalid(format!("dataset split {:?} is empty", self.split)));
        }
        let mut ids: Vec<&String> = self.entries.iter().map(|(id, _)| id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.entries.len() {
            return Err(Error::Invalid("duplicate material ids".into()));
        }
        Ok(())
    }
}
