//! Frozen single-image path: shallow 3×3 conv, a shape-preserving surrogate
//! backbone of window-attention blocks, and the pixel-shuffle head.

pub mod layers;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::material::MapKind;
use crate::params::{Graph, Init, ParamSet};
use crate::tensor::{Real, Tensor};
use layers::{conv, init_conv, TransformerBlock};

pub use layers::LN_EPS;

/// How cross-map attention blocks are wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    /// Plain chaining, no input residual on the fused output.
    Nrc,
    /// Plain chaining plus the α-scaled input residual.
    Rc,
    /// Dense concatenation of transitioned block outputs plus the α-residual.
    Dc,
}

/// Token mixer inside each fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenate all modality streams and mix with one 1×1 conv.
    ConcatConv,
    /// Window-based multi-head cross-map attention.
    Wmca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub cabs: usize,
    pub growth: usize,
    pub ffe_depth: usize,
    pub scale: usize,
    pub fused_maps: Vec<MapKind>,
    pub connection: Connection,
    pub fusion: FusionMode,
    pub backbone_depth: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            embed_dim: 48,
            heads: 6,
            window: 8,
            cabs: 4,
            growth: 16,
            ffe_depth: 3,
            scale: 2,
            fused_maps: vec![MapKind::Basecolor, MapKind::Normal],
            connection: Connection::Dc,
            fusion: FusionMode::Wmca,
            backbone_depth: 2,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.embed_dim == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("channels, embed_dim, window and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.cabs == 0 {
            return bad("cabs must be at least 1".into());
        }
        if self.connection == Connection::Dc && self.cabs > 1 && self.growth == 0 {
            return bad("growth must be positive for dense connections".into());
        }
        if !matches!(self.scale, 2 | 4) {
            return bad(format!("unsupported scale {}", self.scale));
        }
        if self.fused_maps.is_empty() {
            return bad("fused_maps is empty".into());
        }
        let mut seen = self.fused_maps.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.fused_maps.len() {
            return bad("fused_maps lists a map twice".into());
        }
        Ok(())
    }

    /// Fused kinds in canonical order, independent of how they were listed.
    pub fn fused_kinds(&self) -> Vec<MapKind> {
        let mut k = self.fused_maps.clone();
        k.sort();
        k.dedup();
        k
    }

    pub fn is_fused(&self, kind: MapKind) -> bool {
        self.fused_maps.contains(&kind)
    }

    /// Channel width entering each fusion block.
    pub fn block_input_widths(&self) -> Vec<usize> {
        (0..self.cabs)
            .map(|l| match self.connection {
                Connection::Dc => self.channels + l * self.growth,
                Connection::Rc | Connection::Nrc => self.channels,
            })
            .collect()
    }

    /// Number of ×2 pixel-shuffle stages in the head.
    pub fn upsample_stages(&self) -> usize {
        match self.scale {
            4 => 2,
            _ => 1,
        }
    }

    pub fn backbone_blocks(&self) -> Vec<TransformerBlock> {
        (0..self.backbone_depth)
            .map(|i| self.block(format!("sisr.backbone.block{i}")))
            .collect()
    }

    pub(crate) fn block(&self, prefix: String) -> TransformerBlock {
        TransformerBlock {
            prefix,
            channels: self.channels,
            dim: self.embed_dim,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Closed-form size of the single-image path.
    pub fn sisr_param_count(&self) -> usize {
        let c = self.channels;
        let shallow = 9 * 3 * c + c;
        let backbone: usize = self.backbone_blocks().iter().map(|b| b.param_count()).sum();
        let up = self.upsample_stages() * (9 * c * 4 * c + 4 * c);
        let out = 9 * c * 3 + 3;
        shallow + backbone + up + out
    }
}

/// Prefix shared by every parameter of the frozen single-image path.
pub const SISR_PREFIX: &str = "sisr.";

pub fn init_sisr<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, cfg: &ModelConfig) {
    let c = cfg.channels;
    init_conv(ps, init, "sisr.shallow", 3, 3, c);
    for b in cfg.backbone_blocks() {
        b.init(ps, init);
    }
    for j in 0..cfg.upsample_stages() {
        init_conv(ps, init, &format!("sisr.recon.up{j}"), 3, c, 4 * c);
    }
    init_conv(ps, init, "sisr.recon.out", 3, c, 3);
}

/// One zero-padded 3×3 conv from RGB to `C` channels, shared by all maps.
pub fn shallow_extract<T: Real>(g: &mut Graph<T>, img: Var) -> Result<Var> {
    conv(g, "sisr.shallow", img, 1, 1)
}

pub fn surrogate_backbone_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, f0: Var) -> Result<Var> {
    let mut x = f0;
    for b in cfg.backbone_blocks() {
        x = b.forward(g, x)?;
    }
    Ok(x)
}

/// Pixel-shuffle head; the output is unclamped.
pub fn reconstruct_hq<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, f: Var) -> Result<Var> {
    let mut x = f;
    for j in 0..cfg.upsample_stages() {
        x = conv(g, &format!("sisr.recon.up{j}"), x, 1, 1)?;
        x = g.pixel_shuffle(x, 2)?;
    }
    conv(g, "sisr.recon.out", x, 1, 1)
}

/// Shallow, backbone and head in sequence; returns `(F0, F_DF, image)`.
pub fn sisr_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, img: Var) -> Result<(Var, Var, Var)> {
    let f0 = shallow_extract(g, img)?;
    let fdf = surrogate_backbone_forward(g, cfg, f0)?;
    let sum = g.add(fdf, f0)?;
    let out = reconstruct_hq(g, cfg, sum)?;
    Ok((f0, fdf, out))
}

/// Mirror-pads `[H,W,C]` at the bottom and right up to multiples of `m`.
pub fn pad_reflect<T: Real>(img: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(img)?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if ph == h && pw == w {
        return Ok(img.clone());
    }
    if ph - h >= h || pw - w >= w {
        return Err(Error::Resolution(format!("{h}×{w} too small to reflect-pad to a multiple of {m}")));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let src = img.data();
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            let sx = reflect(x, w);
            out.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::from_vec(&[ph, pw, c], out)
}

pub(crate) fn dims3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("expected [H, W, C], got {s:?}"))),
    }
}
