//! Trainable cross-map adapter between the frozen backbone and the frozen
//! reconstruction head.
//!
//! Per fused map `m`, with `F0`/`F_DF` the shallow and deep features:
//!
//! ```text
//! x_1 = B_1([F_DF + F0], F_DF of the other maps)
//! x_l = B_l([F_DF + F0, H_1(x_1), …, H_{l−1}(x_{l−1})], x_{l−1} of the other maps)
//! F_fused = α·x_L + (F_DF + F0)
//! SR = Recon(FFE(F_fused))
//! ```
//!
//! Maps outside the fused set go through the single-image path only.

use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::material::{MapKind, MaterialMap, MaterialSet};
use crate::model::layers::{self, bias_table_len, init_linear, init_mlp, init_norm, linear, mlp, norm};
use crate::model::{self, dims3, pad_reflect, Connection, FusionMode, ModelConfig, SISR_PREFIX};
use crate::params::{Graph, Init, ParamSet};
use crate::tensor::{Real, Tensor};

pub const ADAPTER_PREFIX: &str = "adapter.";
pub const TRANSITION_SLOPE: f64 = 0.2;

pub fn modality_prefix(m: MapKind) -> String {
    format!("adapter.{m}")
}

pub fn cab_prefix(m: MapKind, l: usize) -> String {
    format!("adapter.{m}.cab{l}")
}

pub fn transition_prefix(m: MapKind, l: usize) -> String {
    format!("adapter.{m}.trans{l}")
}

pub fn alpha_name(m: MapKind) -> String {
    format!("adapter.{m}.alpha")
}

pub fn ffe_prefix(m: MapKind, j: usize) -> String {
    format!("adapter.{m}.ffe.block{j}")
}

/// Multi-head cross-map attention over window grids `[nW, S², C]`.
///
/// Every stream contributes a query through its own `q.{kind}` projection
/// and bias table `bias.{kind}`; keys and values come from `own` alone.
/// Output is projected back to `C` channels.
pub fn wmca<T: Real>(
    g: &mut Graph<T>,
    prefix: &str,
    streams: &[(MapKind, Var)],
    own: MapKind,
    heads: usize,
    window: usize,
) -> Result<Var> {
    let x_own = streams
        .iter()
        .find(|(k, _)| *k == own)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::Invalid(format!("query streams lack the own map {own}")))?;
    let shape = g.shape(x_own).to_vec();
    let mut qs = Vec::with_capacity(streams.len());
    let mut biases = Vec::with_capacity(streams.len());
    for &(kind, x) in streams {
        if g.shape(x) != shape.as_slice() {
            return Err(Error::Shape(format!("stream {kind} has shape {:?}, expected {shape:?}", g.shape(x))));
        }
        qs.push(linear(g, &format!("{prefix}.q.{kind}"), x)?);
        biases.push(g.p(&format!("{prefix}.bias.{kind}"))?);
    }
    let k = linear(g, &format!("{prefix}.k"), x_own)?;
    let v = linear(g, &format!("{prefix}.v"), x_own)?;
    let a = g.window_attention(&qs, k, v, &biases, heads, window)?;
    linear(g, &format!("{prefix}.proj"), a)
}

fn init_cab<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, cfg: &ModelConfig, m: MapKind, l: usize, width: usize) {
    let p = cab_prefix(m, l);
    let (c, d) = (cfg.channels, cfg.embed_dim);
    let kinds = cfg.fused_kinds();
    init_linear(ps, init, &format!("{p}.in"), width, c);
    init_norm(ps, &format!("{p}.norm1"), c);
    for &i in kinds.iter().filter(|&&i| i != m) {
        init_norm(ps, &format!("{p}.cross_norm.{i}"), c);
    }
    match cfg.fusion {
        FusionMode::Wmca => {
            for &i in &kinds {
                init_linear(ps, init, &format!("{p}.attn.q.{i}"), c, d);
                ps.insert(
                    format!("{p}.attn.bias.{i}"),
                    init.small(&[cfg.heads, bias_table_len(cfg.window)], 0.02),
                );
            }
            init_linear(ps, init, &format!("{p}.attn.k"), c, d);
            init_linear(ps, init, &format!("{p}.attn.v"), c, d);
            init_linear(ps, init, &format!("{p}.attn.proj"), d, c);
        }
        FusionMode::ConcatConv => {
            init_linear(ps, init, &format!("{p}.mix"), kinds.len() * c, c);
        }
    }
    init_norm(ps, &format!("{p}.norm2"), c);
    init_mlp(ps, init, &format!("{p}.mlp"), c, cfg.mlp_ratio);
}

/// Cross-map attention block `l` of map `m`.
///
/// `dense_input` is `[H, W, width_l]`; `cross` holds the other maps'
/// `[H, W, C]` streams. Returns `[H, W, C]`.
pub fn cab_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    m: MapKind,
    l: usize,
    dense_input: Var,
    cross: &[(MapKind, Var)],
) -> Result<Var> {
    let p = cab_prefix(m, l);
    let widths = cfg.block_input_widths();
    let shape = g.shape(dense_input).to_vec();
    if shape.len() != 3 || Some(&shape[2]) != widths.get(l) {
        return Err(Error::Shape(format!(
            "block {l} of {m} expects {:?} input channels, got {shape:?}",
            widths.get(l)
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let xp = linear(g, &format!("{p}.in"), dense_input)?;
    let xn = norm(g, &format!("{p}.norm1"), xp)?;
    let mut streams = vec![(m, xn)];
    for &(kind, x) in cross {
        let xc = norm(g, &format!("{p}.cross_norm.{kind}"), x)?;
        streams.push((kind, xc));
    }
    streams.sort_by_key(|&(k, _)| k);
    let mixed = match cfg.fusion {
        FusionMode::Wmca => {
            let s = cfg.window;
            let mut wins = Vec::with_capacity(streams.len());
            for &(kind, x) in &streams {
                wins.push((kind, g.window_partition(x, s)?));
            }
            let a = wmca(g, &format!("{p}.attn"), &wins, m, cfg.heads, s)?;
            g.window_reverse(a, h, w, s)?
        }
        FusionMode::ConcatConv => {
            let xs: Vec<Var> = streams.iter().map(|&(_, x)| x).collect();
            let cat = g.concat_last(&xs)?;
            linear(g, &format!("{p}.mix"), cat)?
        }
    };
    let hres = g.add(xp, mixed)?;
    let hn = norm(g, &format!("{p}.norm2"), hres)?;
    let f = mlp(g, &format!("{p}.mlp"), hn)?;
    g.add(hres, f)
}

/// 1×1 conv to the growth width followed by LeakyReLU(0.2).
pub fn transition<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let y = linear(g, prefix, x)?;
    Ok(g.leaky_relu(y, T::c(TRANSITION_SLOPE)))
}

/// Runs all fusion blocks for every fused map in lockstep.
pub fn fusion_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    deep: &BTreeMap<MapKind, Var>,
    shallow: &BTreeMap<MapKind, Var>,
) -> Result<BTreeMap<MapKind, Var>> {
    let kinds = cfg.fused_kinds();
    let mut base = BTreeMap::new();
    for &m in &kinds {
        let (&fdf, &f0) = deep
            .get(&m)
            .zip(shallow.get(&m))
            .ok_or_else(|| Error::MissingMap { kind: m, location: "fusion input features".into() })?;
        base.insert(m, g.add(fdf, f0)?);
    }
    let mut dense: BTreeMap<MapKind, Vec<Var>> = kinds.iter().map(|&m| (m, vec![base[&m]])).collect();
    let mut prev: BTreeMap<MapKind, Var> = kinds.iter().map(|&m| (m, deep[&m])).collect();
    for l in 0..cfg.cabs {
        let mut next = BTreeMap::new();
        for &m in &kinds {
            let input = match cfg.connection {
                Connection::Dc => {
                    let parts = &dense[&m];
                    if parts.len() == 1 {
                        parts[0]
                    } else {
                        g.concat_last(parts)?
                    }
                }
                Connection::Rc | Connection::Nrc if l == 0 => base[&m],
                Connection::Rc | Connection::Nrc => prev[&m],
            };
            let cross: Vec<(MapKind, Var)> =
                prev.iter().filter(|(&k, _)| k != m).map(|(&k, &v)| (k, v)).collect();
            next.insert(m, cab_forward(g, cfg, m, l, input, &cross)?);
        }
        if cfg.connection == Connection::Dc && l + 1 < cfg.cabs {
            for &m in &kinds {
                let t = transition(g, &transition_prefix(m, l), next[&m])?;
                dense.get_mut(&m).expect("dense entry").push(t);
            }
        }
        prev = next;
    }
    let mut out = BTreeMap::new();
    for &m in &kinds {
        let x = prev[&m];
        let fused = match cfg.connection {
            Connection::Nrc => x,
            Connection::Rc | Connection::Dc => {
                let alpha = g.p(&alpha_name(m))?;
                let scaled = g.scale_by(x, alpha)?;
                g.add(scaled, base[&m])?
            }
        };
        out.insert(m, fused);
    }
    Ok(out)
}

pub fn ffe_blocks(cfg: &ModelConfig, m: MapKind) -> Vec<layers::TransformerBlock> {
    (0..cfg.ffe_depth).map(|j| cfg.block(ffe_prefix(m, j))).collect()
}

/// Per-map residual window-attention stack after fusion.
pub fn ffe_forward<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, m: MapKind, x: Var) -> Result<Var> {
    let mut y = x;
    for b in ffe_blocks(cfg, m) {
        y = b.forward(g, y)?;
    }
    Ok(y)
}

/// Full forward over LR map images `[h, w, 3]`; returns unclamped SR
/// images for every input map.
pub fn mujica_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    lr: &BTreeMap<MapKind, Var>,
) -> Result<BTreeMap<MapKind, Var>> {
    for m in cfg.fused_kinds() {
        if !lr.contains_key(&m) {
            return Err(Error::MissingMap { kind: m, location: "model input".into() });
        }
    }
    let mut shallow = BTreeMap::new();
    let mut deep = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (&kind, &img) in lr {
        let f0 = model::shallow_extract(g, img)?;
        let fdf = model::surrogate_backbone_forward(g, cfg, f0)?;
        if cfg.is_fused(kind) {
            shallow.insert(kind, f0);
            deep.insert(kind, fdf);
        } else {
            let sum = g.add(fdf, f0)?;
            out.insert(kind, model::reconstruct_hq(g, cfg, sum)?);
        }
    }
    let fused = fusion_forward(g, cfg, &deep, &shallow)?;
    for (m, f) in fused {
        let y = ffe_forward(g, cfg, m, f)?;
        out.insert(m, model::reconstruct_hq(g, cfg, y)?);
    }
    Ok(out)
}

/// Model configuration plus every named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Mujica<T = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Mujica<T> {
    /// Seeded initialisation: α = 0, FFE blocks copied from the backbone
    /// with zeroed output projections, single-image path frozen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        model::init_sisr(&mut params, &mut init, &config);
        let widths = config.block_input_widths();
        for m in config.fused_kinds() {
            for (l, &width) in widths.iter().enumerate() {
                init_cab(&mut params, &mut init, &config, m, l, width);
            }
            if config.connection == Connection::Dc {
                for l in 0..config.cabs - 1 {
                    init_linear(&mut params, &mut init, &transition_prefix(m, l), config.channels, config.growth);
                }
            }
            if config.connection != Connection::Nrc {
                params.insert(alpha_name(m), Tensor::zeros(&[1]));
            }
            for b in ffe_blocks(&config, m) {
                b.init(&mut params, &mut init);
            }
        }
        let mut model = Self { config, params };
        model.reset_ffe_from_backbone()?;
        model.params.freeze_prefix(SISR_PREFIX);
        Ok(model)
    }

    /// Copies backbone block `j mod depth` into FFE block `j` and zeroes the
    /// FFE output projections so every FFE stack is the identity.
    pub fn reset_ffe_from_backbone(&mut self) -> Result<()> {
        let depth = self.config.backbone_depth;
        for m in self.config.fused_kinds() {
            for (j, b) in ffe_blocks(&self.config, m).into_iter().enumerate() {
                if depth > 0 {
                    let src = format!("sisr.backbone.block{}", j % depth);
                    self.params.copy_prefix(&format!("{src}."), &format!("{}.", b.prefix));
                }
                for n in b.output_projections() {
                    self.params.get_mut(&n)?.data_mut().fill(T::zero());
                }
            }
        }
        Ok(())
    }

    /// Count of adapter parameters derived from the configuration alone.
    pub fn adapter_param_count(cfg: &ModelConfig) -> usize {
        let (c, d) = (cfg.channels, cfg.embed_dim);
        let n = cfg.fused_kinds().len();
        let hidden = c * cfg.mlp_ratio;
        let per_cab_fixed = 2 * c // norm1
            + (n - 1) * 2 * c // cross norms
            + 2 * c // norm2
            + c * hidden + hidden + hidden * c + c; // mlp
        let mixer = match cfg.fusion {
            FusionMode::Wmca => n * (c * d + d + cfg.heads * bias_table_len(cfg.window)) + 2 * (c * d + d) + d * c + c,
            FusionMode::ConcatConv => n * c * c + c,
        };
        let cabs: usize = cfg.block_input_widths().iter().map(|&w| w * c + c + per_cab_fixed + mixer).sum();
        let trans = if cfg.connection == Connection::Dc { (cfg.cabs - 1) * (c * cfg.growth + cfg.growth) } else { 0 };
        let alpha = usize::from(cfg.connection != Connection::Nrc);
        let ffe: usize = ffe_blocks(cfg, MapKind::Basecolor).iter().map(|b| b.param_count()).sum();
        n * (cabs + trans + alpha + ffe)
    }

    /// Single-image path only, for warm-up and baselines.
    pub fn sisr_forward(&self, g: &mut Graph<T>, img: Var) -> Result<Var> {
        Ok(model::sisr_forward(g, &self.config, img)?.2)
    }

    pub fn forward(&self, g: &mut Graph<T>, lr: &BTreeMap<MapKind, Var>) -> Result<BTreeMap<MapKind, Var>> {
        mujica_forward(g, &self.config, lr)
    }

    /// Inference on a whole LR material. Sizes that the window does not
    /// divide are reflect-padded and cropped back; outputs are clamped to
    /// [0, 1] and gray maps keep equal channels.
    pub fn upscale(&self, lr: &MaterialSet) -> Result<MaterialSet> {
        self.upscale_with(lr, false)
    }

    /// As [`Mujica::upscale`] but through the single-image path for every map.
    pub fn upscale_sisr(&self, lr: &MaterialSet) -> Result<MaterialSet> {
        self.upscale_with(lr, true)
    }

    /// Tiled [`Mujica::upscale`]: overlapping `tile²` LR tiles, each output
    /// pixel taken from the tile where it lies furthest from an edge.
    ///
    /// Tile origins stay on the window grid. A tile edge disturbs its whole
    /// window plus the 3×3 halo of the head, so the overlap is raised to at
    /// least `window + 2`; kept pixels then match untiled inference.
    pub fn upscale_tiled(&self, lr: &MaterialSet, tile: usize, overlap: usize) -> Result<MaterialSet> {
        let (h, w) = lr.resolution().ok_or_else(|| Error::Invalid("empty material".into()))?;
        let win = self.config.window;
        if tile == 0 || tile % win != 0 {
            return Err(Error::Invalid(format!("tile {tile} must be a positive multiple of the window {win}")));
        }
        let overlap = overlap.max(win + 2);
        if 2 * overlap >= tile {
            return Err(Error::Invalid(format!("overlap {overlap} leaves no tile interior for tile {tile}")));
        }
        if tile >= h && tile >= w {
            return self.upscale(lr);
        }
        let ys = tile_origins(h, tile, overlap, win);
        let xs = tile_origins(w, tile, overlap, win);
        let owner_y = owners(h, tile, &ys);
        let owner_x = owners(w, tile, &xs);
        let s = self.config.scale;
        let mut out: BTreeMap<MapKind, Tensor<f32>> =
            lr.kinds().into_iter().map(|k| (k, Tensor::zeros(&[h * s, w * s, 3]))).collect();
        for (ty, &y0) in ys.iter().enumerate() {
            for (tx, &x0) in xs.iter().enumerate() {
                let (th, tw) = (tile.min(h - y0), tile.min(w - x0));
                let sr = self.upscale(&lr.map_each(|m| m.crop(y0, x0, th, tw))?)?;
                for map in sr.maps() {
                    let dst = out.get_mut(&map.kind).expect("kind present");
                    let dw = w * s;
                    for y in 0..th * s {
                        if owner_y[(y0 * s + y) / s] != ty {
                            continue;
                        }
                        for x in 0..tw * s {
                            if owner_x[(x0 * s + x) / s] != tx {
                                continue;
                            }
                            let d = ((y0 * s + y) * dw + x0 * s + x) * 3;
                            let src = (y * tw * s + x) * 3;
                            dst.data_mut()[d..d + 3].copy_from_slice(&map.pixels.data()[src..src + 3]);
                        }
                    }
                }
            }
        }
        MaterialSet::from_maps(out.into_iter().map(|(k, t)| MaterialMap { kind: k, pixels: t }))
    }

    fn upscale_with(&self, lr: &MaterialSet, sisr_only: bool) -> Result<MaterialSet> {
        let (h, w) = lr.resolution().ok_or_else(|| Error::Invalid("empty material".into()))?;
        let s = self.config.scale;
        let mut g = Graph::inference(&self.params);
        let mut inputs = BTreeMap::new();
        for map in lr.maps() {
            let padded = pad_reflect(&map.pixels.cast::<T>(), self.config.window)?;
            inputs.insert(map.kind, g.constant(padded));
        }
        let outs = if sisr_only {
            let mut o = BTreeMap::new();
            for (&k, &x) in &inputs {
                o.insert(k, self.sisr_forward(&mut g, x)?);
            }
            o
        } else {
            for m in self.config.fused_kinds() {
                if !lr.contains(m) {
                    return Err(Error::MissingMap { kind: m, location: "LR material".into() });
                }
            }
            self.forward(&mut g, &inputs)?
        };
        let mut set = MaterialSet::new();
        for (kind, v) in outs {
            let img = finish_output(g.value(v), kind, h * s, w * s)?;
            set.insert(MaterialMap::new(kind, img)?)?;
        }
        Ok(set)
    }
}

/// Window-aligned tile origins with stride `tile − 2·overlap` (rounded down
/// to the window). The last origin is the smallest aligned one whose tile
/// reaches `n`.
fn tile_origins(n: usize, tile: usize, overlap: usize, win: usize) -> Vec<usize> {
    let stride = ((tile - 2 * overlap) / win * win).max(win);
    let mut v = vec![0];
    while v[v.len() - 1] + tile < n {
        v.push(v[v.len() - 1] + stride);
    }
    if v.len() > 1 {
        let end = v.len() - 1;
        v[end] = (n - tile).div_ceil(win) * win;
    }
    v
}

/// For each coordinate, the tile in which it is most central.
fn owners(n: usize, tile: usize, origins: &[usize]) -> Vec<usize> {
    (0..n)
        .map(|i| {
            origins
                .iter()
                .enumerate()
                .filter(|(_, &o)| i >= o && i < o + tile)
                .max_by_key(|(_, &o)| (i - o).min((o + tile).min(n) - 1 - i))
                .map(|(t, _)| t)
                .expect("tiles cover every coordinate")
        })
        .collect()
}

/// Crops to `h × w`, clamps to [0, 1] and averages gray maps' channels.
fn finish_output<T: Real>(t: &Tensor<T>, kind: MapKind, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (_, tw, c) = dims3(t)?;
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = &t.data()[(y * tw + x) * c..(y * tw + x + 1) * c];
            let clamp = |v: T| v.to_f32().unwrap_or(0.0).clamp(0.0, 1.0);
            if kind.is_gray() {
                let mean = px.iter().fold(T::zero(), |a, &b| a + b) / T::c(c as f64);
                out.extend([clamp(mean); 3]);
            } else {
                out.extend(px.iter().map(|&v| clamp(v)));
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], out)
}
